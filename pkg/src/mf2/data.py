"""Face samples, label tables, JSONL manifests and procedural fixtures."""

from __future__ import annotations

import io
import json
import os
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from PIL import Image

from .errors import DuplicateFrame, InvalidArgument, MalformedRecord, UnknownLabel
from .landmarks import DEFAULT_AU_MAP, N_LANDMARKS, canonical_landmarks


@dataclass(frozen=True)
class LabelTable:
    """Ordered label names with a bijective index map."""

    names: tuple

    def __post_init__(self):
        if len(set(self.names)) != len(self.names):
            raise ValueError("label names must be unique")

    def __len__(self):
        return len(self.names)

    def __iter__(self):
        return iter(self.names)

    def __contains__(self, item):
        return item in self.names

    def index(self, name) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise UnknownLabel(f"unknown label {name!r}") from None

    def name(self, idx: int):
        return self.names[idx]


# Column order of the AU and emotion result tables.
AU_TABLE = LabelTable((1, 2, 4, 6, 7, 10, 12, 15, 23, 24, 25, 26))
EMOTION_TABLE = LabelTable(("Neutral", "Anger", "Disgust", "Fear", "Happiness", "Sadness", "Surprise", "Other"))

AU_IDS = AU_TABLE.names
EMOTIONS = EMOTION_TABLE.names
N_AU = len(AU_TABLE)
N_EMOTION = len(EMOTION_TABLE)


@dataclass(frozen=True)
class FaceSample:
    """One face frame.

    ``au_labels``/``emotion`` are ``None`` when the source record lacks them; the
    pixels live at ``image_path`` relative to the owning manifest's root.
    """

    sample_id: str
    video_id: str
    frame_index: int
    image_path: str
    landmarks: tuple
    au_labels: Optional[tuple] = None
    emotion: Optional[str] = None

    @property
    def key(self):
        return (self.video_id, self.frame_index)

    @property
    def active_aus(self) -> tuple:
        if self.au_labels is None:
            return ()
        return tuple(au for au, v in zip(AU_IDS, self.au_labels) if v)

    def landmarks_array(self) -> np.ndarray:
        return np.asarray(self.landmarks, dtype=np.float64)

    def to_record(self) -> dict:
        rec = {
            "sample_id": self.sample_id,
            "video_id": self.video_id,
            "frame_index": self.frame_index,
            "image_path": self.image_path,
            "landmarks": [list(p) for p in self.landmarks],
        }
        if self.au_labels is not None:
            rec["au_labels"] = list(self.au_labels)
        if self.emotion is not None:
            rec["emotion"] = self.emotion
        return rec


@dataclass(frozen=True)
class DatasetManifest:
    samples: tuple
    split: str = "unsplit"
    root: Optional[Path] = None
    # In-memory pixels keyed by image_path; used by fixtures before they are written out.
    images: dict = field(default_factory=dict, compare=False, repr=False)
    class_counts: dict = field(init=False, compare=False)
    au_counts: dict = field(init=False, compare=False)

    def __post_init__(self):
        if self.split not in ("train", "val", "unsplit"):
            raise InvalidArgument(f"split must be train|val|unsplit, got {self.split!r}")
        object.__setattr__(self, "samples", tuple(self.samples))
        emo = Counter(s.emotion for s in self.samples if s.emotion is not None)
        object.__setattr__(self, "class_counts", {e: emo.get(e, 0) for e in EMOTIONS})
        au = {a: 0 for a in AU_IDS}
        for s in self.samples:
            for a in s.active_aus:
                au[a] += 1
        object.__setattr__(self, "au_counts", au)

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def derive(self, samples: Iterable[FaceSample], split: Optional[str] = None) -> "DatasetManifest":
        """New manifest over ``samples`` sharing this one's root and pixel cache."""
        return replace(self, samples=tuple(samples), split=split or self.split)

    @property
    def video_ids(self) -> list:
        return sorted({s.video_id for s in self.samples})

    def load_image(self, sample: FaceSample) -> np.ndarray:
        """uint8 pixels [H, W, 3]."""
        if sample.image_path in self.images:
            return self.images[sample.image_path]
        if self.root is None:
            raise FileNotFoundError(f"no root to resolve {sample.image_path}")
        with Image.open(self.root / sample.image_path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8)


def _parse_record(rec: dict, line_no: int, image_size: Optional[int]) -> FaceSample:
    if not isinstance(rec, dict):
        raise MalformedRecord(line_no, "record is not an object")
    for key, typ in (("sample_id", str), ("video_id", str), ("frame_index", int), ("image_path", str),
                     ("landmarks", list)):
        if key not in rec:
            raise MalformedRecord(line_no, f"missing field {key!r}")
        if not isinstance(rec[key], typ) or isinstance(rec[key], bool):
            raise MalformedRecord(line_no, f"field {key!r} must be {typ.__name__}")
    if rec["frame_index"] < 0:
        raise MalformedRecord(line_no, "frame_index must be non-negative")
    lms = rec["landmarks"]
    if len(lms) != N_LANDMARKS or any(not isinstance(p, list) or len(p) != 2 for p in lms):
        raise MalformedRecord(line_no, f"landmarks must be {N_LANDMARKS} (x, y) pairs")
    try:
        landmarks = tuple((float(x), float(y)) for x, y in lms)
    except (TypeError, ValueError):
        raise MalformedRecord(line_no, "landmark coordinates must be numbers") from None
    if image_size is not None and any(not (0 <= c < image_size) for p in landmarks for c in p):
        raise MalformedRecord(line_no, f"landmark outside [0, {image_size})")

    au_labels = None
    if "au_labels" in rec:
        au = rec["au_labels"]
        if not isinstance(au, list) or len(au) != N_AU:
            raise MalformedRecord(line_no, f"au_labels must have {N_AU} entries")
        if any(v not in (0, 1) or isinstance(v, bool) for v in au):
            raise UnknownLabel(f"line {line_no}: AU activations must be 0/1")
        au_labels = tuple(int(v) for v in au)
    emotion = rec.get("emotion")
    if emotion is not None:
        if not isinstance(emotion, str):
            raise MalformedRecord(line_no, "emotion must be a string")
        if emotion not in EMOTION_TABLE:
            raise UnknownLabel(f"line {line_no}: unknown emotion {emotion!r}")
    return FaceSample(rec["sample_id"], rec["video_id"], rec["frame_index"], rec["image_path"],
                      landmarks, au_labels, emotion)


def _check_unique(samples: Sequence[FaceSample]) -> None:
    seen = {}
    for i, s in enumerate(samples):
        if s.key in seen:
            raise DuplicateFrame(f"{s.video_id}#{s.frame_index} appears twice (records {seen[s.key] + 1} and {i + 1})")
        seen[s.key] = i


def load_manifest(path, split: Optional[str] = None, image_size: Optional[int] = None) -> DatasetManifest:
    """Read a JSONL manifest.

    ``split`` defaults to the file stem when it is ``train``/``val``, otherwise
    ``unsplit``. Landmark bounds are only checked when ``image_size`` is given.
    """
    path = Path(path)
    samples = []
    with path.open("r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedRecord(line_no, f"invalid JSON: {exc.msg}") from None
            samples.append(_parse_record(rec, line_no, image_size))
    _check_unique(samples)
    if split is None:
        split = path.stem if path.stem in ("train", "val") else "unsplit"
    return DatasetManifest(tuple(samples), split=split, root=path.parent)


def dumps_record(sample: FaceSample) -> str:
    return json.dumps(sample.to_record(), sort_keys=True)


def save_manifest(manifest: DatasetManifest, path) -> Path:
    """Write sorted-key JSONL; pixels held only in memory are written as PNGs next to it.

    Image paths are rewritten relative to the new location when the manifest moves.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    out_root = path.parent.resolve()
    lines = []
    for s in manifest.samples:
        rel = s.image_path
        if s.image_path in manifest.images:
            target = out_root / rel
            if not target.exists():
                target.parent.mkdir(parents=True, exist_ok=True)
                target.write_bytes(encode_png(manifest.images[s.image_path]))
        elif manifest.root is not None and Path(manifest.root).resolve() != out_root:
            rel = os.path.relpath(Path(manifest.root).resolve() / s.image_path, out_root)
        lines.append(dumps_record(replace(s, image_path=rel)))
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    return path


def encode_png(pixels: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(np.asarray(pixels, dtype=np.uint8), mode="RGB").save(buf, format="PNG", optimize=False)
    return buf.getvalue()


# --- procedural fixtures -----------------------------------------------------

# Prototypical AU sets per emotion; only AUs in the 12-AU set are used.
EMOTION_PROTOTYPES = {
    "Neutral": (),
    "Anger": (4, 7, 23, 24),
    "Disgust": (4, 10, 15),
    "Fear": (1, 2, 4, 7, 25),
    "Happiness": (6, 12, 25),
    "Sadness": (1, 4, 15),
    "Surprise": (1, 2, 25, 26),
    "Other": (7, 26),
}

_EMOTION_TINT = np.array([
    [0.0, 0.0, 0.0], [0.9, -0.3, -0.3], [-0.3, 0.9, -0.3], [-0.3, -0.3, 0.9],
    [0.7, 0.7, -0.6], [-0.6, 0.7, 0.7], [0.7, -0.6, 0.7], [-0.5, -0.5, -0.5],
])
_AU_SIGNATURE = np.array([
    [1, 0, 0], [0, 1, 0], [0, 0, 1], [1, 1, 0], [0, 1, 1], [1, 0, 1],
    [1, -1, 0], [0, 1, -1], [-1, 0, 1], [1, 1, -1], [-1, 1, 1], [1, -1, 1],
], dtype=np.float64)


def _fixture_landmarks(rng: np.random.Generator, image_size: int, video_shift: np.ndarray) -> np.ndarray:
    base = canonical_landmarks(image_size)
    centre = image_size / 2.0
    scale = 1.0 + rng.uniform(-0.03, 0.03)
    pts = (base - centre) * scale + centre + video_shift + rng.normal(0.0, 0.005 * image_size, size=base.shape)
    pts = np.clip(pts, 0.0, image_size - 0.01)
    return np.floor(pts * 100.0) / 100.0


def _fixture_image(rng: np.random.Generator, image_size: int, landmarks: np.ndarray,
                   au_labels: Sequence[int], emotion: str) -> np.ndarray:
    s = image_size
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64) + 0.5
    img = 0.30 + rng.normal(0.0, 0.05, size=(s, s, 3))
    jaw = landmarks[:17]
    cx, cy = landmarks[:, 0].mean(), landmarks[:, 1].mean()
    rx = max((jaw[:, 0].max() - jaw[:, 0].min()) / 2.0, 1.0)
    ry = max((jaw[:, 1].max() - landmarks[17:27, 1].min()) / 1.6, 1.0)
    face = (((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2) <= 1.0
    img[face] += 0.20
    img += 0.12 * face[..., None] * _EMOTION_TINT[EMOTION_TABLE.index(emotion)]
    sigma = s / 14.0
    for j, (au, active) in enumerate(zip(AU_IDS, au_labels)):
        if not active:
            continue
        px, py = DEFAULT_AU_MAP.center_px(landmarks, au)
        ox, oy = DEFAULT_AU_MAP.offset(au)
        px, py = px + ox * s / 14.0, py + oy * s / 14.0
        blob = np.exp(-((xx - px) ** 2 + (yy - py) ** 2) / (2 * sigma**2))
        img += 0.25 * blob[..., None] * _AU_SIGNATURE[j]
    return (np.clip(img, 0.0, 1.0) * 255.0).round().astype(np.uint8)


def make_fixture_dataset(n_videos: int, frames_per_video: int, seed: int = 0,
                         image_size: int = 224, au_flip_prob: float = 0.1) -> DatasetManifest:
    """Synthetic stand-in for a labelled face-video corpus.

    Emotions are dealt round-robin over all frames and then shuffled, so every
    class appears once there are at least 8 frames. AU activations start from a
    per-emotion prototype with independent flips. Images carry an emotion tint
    and an AU-specific colour blob at each active AU's landmark centre.
    """
    if n_videos < 1 or frames_per_video < 1:
        raise InvalidArgument("n_videos and frames_per_video must be >= 1")
    if image_size < 8:
        raise InvalidArgument("image_size must be >= 8")
    rng = np.random.default_rng(seed)
    total = n_videos * frames_per_video
    emotions = [EMOTIONS[i % N_EMOTION] for i in range(total)]
    order = rng.permutation(total)
    emotions = [emotions[i] for i in order]

    samples, images = [], {}
    for v in range(n_videos):
        video_id = f"vid{v:03d}"
        video_shift = rng.uniform(-0.03, 0.03, size=2) * image_size
        for f in range(frames_per_video):
            emotion = emotions[v * frames_per_video + f]
            proto = EMOTION_PROTOTYPES[emotion]
            flips = rng.random(N_AU) < au_flip_prob
            au = tuple(int((a in proto) ^ bool(fl)) for a, fl in zip(AU_IDS, flips))
            lms = _fixture_landmarks(rng, image_size, video_shift)
            path = f"images/{video_id}/{f:05d}.png"
            images[path] = _fixture_image(rng, image_size, lms, au, emotion)
            samples.append(FaceSample(f"{video_id}_{f:05d}", video_id, f, path,
                                      tuple((float(x), float(y)) for x, y in lms), au, emotion))
    return DatasetManifest(tuple(samples), split="unsplit", root=None, images=images)
