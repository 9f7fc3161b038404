"""Dataset construction: filtering, class balancing, video-disjoint splits,
three-stage caption prompts and caption generation through a pluggable client.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import os
import re
import urllib.request
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Optional, Protocol, Sequence

import numpy as np

from .data import AU_IDS, EMOTIONS, DatasetManifest, FaceSample, encode_png
from .errors import (AnnotationFailed, EmptyClass, InsufficientVideos, InvalidArgument, MissingLabel,
                     UnknownCaptionType, UnlabeledSample)
from .templates import (CAPTION_MAX_TOKENS, CAPTION_TYPES, FORMAT_TEXT, ROLE_TEXT, SIGNAL_TEXT, TASK_TEXT,
                        mock_caption, render_au_payload, render_emotion_payload)
from .tokenizer import Tokenizer, default_tokenizer

log = logging.getLogger(__name__)

DEFAULT_TRAIN_FRACTION = 0.903


# --- filtering, balancing, splitting ----------------------------------------

def filter_samples(manifest: DatasetManifest) -> DatasetManifest:
    """Keep samples that carry both an AU vector and an emotion label, in order."""
    kept = [s for s in manifest.samples
            if s.au_labels is not None and len(s.au_labels) == len(AU_IDS) and s.emotion is not None]
    return manifest.derive(kept)


def balance_classes(manifest: DatasetManifest, tolerance: float = 0.10, seed: int = 0) -> DatasetManifest:
    """Subsample every emotion class to at most ``floor(min_count * (1 + tolerance))``.

    Retained samples keep their original order; nothing is duplicated.
    """
    if tolerance < 0:
        raise InvalidArgument("tolerance must be >= 0")
    if any(s.emotion is None for s in manifest.samples):
        raise UnlabeledSample("balance_classes needs every sample to carry an emotion label")
    by_class = defaultdict(list)
    for i, s in enumerate(manifest.samples):
        by_class[s.emotion].append(i)
    missing = [e for e in EMOTIONS if not by_class[e]]
    if missing:
        raise EmptyClass(f"no samples for: {', '.join(missing)}")
    cap = int(np.floor(min(len(v) for v in by_class.values()) * (1.0 + tolerance) + 1e-9))
    rng = np.random.default_rng(seed)
    keep = set()
    for e in EMOTIONS:
        idx = by_class[e]
        if len(idx) > cap:
            idx = rng.choice(idx, size=cap, replace=False).tolist()
        keep.update(idx)
    return manifest.derive(s for i, s in enumerate(manifest.samples) if i in keep)


def split_by_video(manifest: DatasetManifest, train_fraction: float = DEFAULT_TRAIN_FRACTION,
                   seed: int = 0) -> tuple:
    """Video-disjoint (train, val) split.

    The number of train videos is fixed to ``round(train_fraction * n_videos)``
    (at least one video per side). Videos are then placed greedily, largest
    first, on whichever side is relatively further below its image target.
    """
    if not 0.0 < train_fraction < 1.0:
        raise InvalidArgument("train_fraction must lie in (0, 1)")
    groups = defaultdict(list)
    for s in manifest.samples:
        groups[s.video_id].append(s)
    videos = sorted(groups)
    if len(videos) < 2:
        raise InsufficientVideos(f"need at least 2 videos, got {len(videos)}")

    n_train = min(max(int(round(train_fraction * len(videos))), 1), len(videos) - 1)
    n_val = len(videos) - n_train
    total = len(manifest.samples)
    target = {"train": train_fraction * total, "val": (1.0 - train_fraction) * total}

    rng = np.random.default_rng(seed)
    tiebreak = {v: k for k, v in enumerate(rng.permutation(len(videos)))}
    order = sorted(range(len(videos)), key=lambda k: (-len(groups[videos[k]]), tiebreak[k]))

    assigned = {"train": set(), "val": set()}
    images = {"train": 0, "val": 0}
    for k in order:
        vid = videos[k]
        if len(assigned["train"]) == n_train:
            side = "val"
        elif len(assigned["val"]) == n_val:
            side = "train"
        else:
            deficit = {s: (target[s] - images[s]) / target[s] for s in ("train", "val")}
            side = "train" if deficit["train"] >= deficit["val"] else "val"
        assigned[side].add(vid)
        images[side] += len(groups[vid])

    train = manifest.derive((s for s in manifest.samples if s.video_id in assigned["train"]), split="train")
    val = manifest.derive((s for s in manifest.samples if s.video_id in assigned["val"]), split="val")
    return train, val


# --- prompts -----------------------------------------------------------------

@dataclass(frozen=True)
class PromptBundle:
    caption_type: str
    initial_setup: str
    output_format: str
    output_signal: str
    ground_truth_payload: str
    # Structured copy of the ground truth, for clients that fill templates.
    au_labels: Optional[tuple] = None
    emotion: Optional[str] = None

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode("utf-8")).hexdigest()

    def as_messages(self) -> list:
        return [
            {"role": "system", "content": self.initial_setup},
            {"role": "user", "content": self.output_format},
            {"role": "user", "content": f"{self.output_signal}\n{self.ground_truth_payload}"},
        ]


def build_prompt(sample: FaceSample, caption_type: str, max_tokens: Optional[dict] = None) -> PromptBundle:
    if caption_type not in CAPTION_TYPES:
        raise UnknownCaptionType(f"unknown caption type {caption_type!r}")
    budgets = {**CAPTION_MAX_TOKENS, **(max_tokens or {})}
    needs_au = caption_type in ("au", "key_au")
    needs_emo = caption_type in ("emotion", "key_au")
    if needs_au and sample.au_labels is None:
        raise MissingLabel(f"{sample.sample_id}: {caption_type} caption needs AU labels")
    if needs_emo and sample.emotion is None:
        raise MissingLabel(f"{sample.sample_id}: {caption_type} caption needs an emotion label")

    payload = []
    if needs_au:
        payload.append(render_au_payload(sample.au_labels))
    if needs_emo:
        payload.append(render_emotion_payload(sample.emotion))
    return PromptBundle(
        caption_type=caption_type,
        initial_setup=f"{ROLE_TEXT[caption_type]} {TASK_TEXT[caption_type]}",
        output_format=FORMAT_TEXT[caption_type],
        output_signal=SIGNAL_TEXT.format(budget=budgets[caption_type]),
        ground_truth_payload=" ".join(payload),
        au_labels=tuple(sample.au_labels) if needs_au else None,
        emotion=sample.emotion if needs_emo else None,
    )


# --- captions ------------------------------------------------------------------

@dataclass(frozen=True)
class CaptionRecord:
    sample_id: str
    caption_type: str
    text: str
    token_count: int
    prompt_hash: str

    def to_json(self) -> str:
        return json.dumps({"sample_id": self.sample_id, "caption_type": self.caption_type,
                           "text": self.text, "prompt_hash": self.prompt_hash}, sort_keys=True)


class Violation(str, Enum):
    EMPTY = "EmptyCaption"
    LENGTH = "LengthExceeded"
    UNKNOWN_TYPE = "UnknownCaptionType"


def make_record(sample_id: str, caption_type: str, text: str, prompt_hash: str,
                tokenizer: Optional[Tokenizer] = None) -> CaptionRecord:
    tok = tokenizer or default_tokenizer()
    return CaptionRecord(sample_id, caption_type, text, tok.count(text), prompt_hash)


def validate_caption(record: CaptionRecord, max_tokens: Optional[dict] = None) -> list:
    budgets = {**CAPTION_MAX_TOKENS, **(max_tokens or {})}
    out = []
    if not record.text.strip() or record.token_count == 0:
        out.append(Violation.EMPTY)
    if record.caption_type not in budgets:
        out.append(Violation.UNKNOWN_TYPE)
    elif record.token_count > budgets[record.caption_type]:
        out.append(Violation.LENGTH)
    return out


def save_captions(records: Iterable[CaptionRecord], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(r.to_json() + "\n" for r in records), encoding="utf-8")
    return path


def load_captions(path, tokenizer: Optional[Tokenizer] = None) -> list:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            r = json.loads(line)
            out.append(make_record(r["sample_id"], r["caption_type"], r["text"], r["prompt_hash"], tokenizer))
    return out


_AU_SPLIT = re.compile(r"(?=\bAU\d+\b)")


def split_au_caption(text: str) -> dict:
    """Per-AU sentences of an AU caption, keyed by AU id (first mention wins)."""
    out = {}
    for chunk in _AU_SPLIT.split(text):
        m = re.match(r"AU(\d+)\b", chunk)
        if m and int(m.group(1)) in AU_IDS and int(m.group(1)) not in out:
            out[int(m.group(1))] = chunk.strip()
    return out


# --- clients -------------------------------------------------------------------

class AnnotationClient(Protocol):
    def generate(self, image: Optional[np.ndarray], bundle: PromptBundle) -> str: ...


class MockClient:
    """Fills fixed sentence templates from the bundle's ground truth; ignores the image."""

    needs_image = False

    def __init__(self, seed: int = 0):
        self.seed = seed

    def generate(self, image, bundle: PromptBundle) -> str:
        return mock_caption(bundle.caption_type, bundle.au_labels, bundle.emotion, self.seed)


class RemoteClient:
    """JSON-over-HTTP client.

    Request body: ``{"caption_type", "messages", "image_png_base64"}``;
    the response must be a JSON object with a ``"text"`` field.
    Transport errors propagate to the caller.
    """

    needs_image = True

    def __init__(self, endpoint: str, timeout: float = 60.0):
        self.endpoint = endpoint
        self.timeout = timeout

    @classmethod
    def from_env(cls, var: str = "MF2_LLM_ENDPOINT", **kw) -> "RemoteClient":
        endpoint = os.environ.get(var)
        if not endpoint:
            raise InvalidArgument(f"environment variable {var} is not set")
        return cls(endpoint, **kw)

    def request_body(self, image, bundle: PromptBundle) -> dict:
        body = {"caption_type": bundle.caption_type, "messages": bundle.as_messages()}
        if image is not None:
            body["image_png_base64"] = base64.b64encode(encode_png(image)).decode("ascii")
        return body

    def generate(self, image, bundle: PromptBundle) -> str:
        data = json.dumps(self.request_body(image, bundle)).encode("utf-8")
        req = urllib.request.Request(self.endpoint, data=data, headers={"Content-Type": "application/json"})
        with urllib.request.urlopen(req, timeout=self.timeout) as resp:
            payload = json.loads(resp.read().decode("utf-8"))
        return str(payload.get("text", ""))


@dataclass
class AnnotationResult:
    records: list = field(default_factory=list)
    failures: list = field(default_factory=list)


def annotate_dataset(manifest: DatasetManifest, client, caption_types: Sequence[str] = CAPTION_TYPES,
                     max_tokens: Optional[dict] = None, tokenizer: Optional[Tokenizer] = None,
                     max_workers: int = 1) -> AnnotationResult:
    """One caption per (sample, type); invalid captions are retried once, then reported.

    Records come back ordered by (sample_id, caption_type) whatever the
    completion order of concurrent client calls.
    """
    for t in caption_types:
        if t not in CAPTION_TYPES:
            raise UnknownCaptionType(f"unknown caption type {t!r}")
    tok = tokenizer or default_tokenizer()
    jobs = [(s, t) for s in manifest.samples for t in caption_types]

    def run(job):
        sample, ctype = job
        try:
            bundle = build_prompt(sample, ctype, max_tokens)
        except MissingLabel as exc:
            return AnnotationFailed(sample.sample_id, ctype, str(exc))
        image = manifest.load_image(sample) if getattr(client, "needs_image", True) else None
        problems = []
        for _ in range(2):
            rec = make_record(sample.sample_id, ctype, client.generate(image, bundle), bundle.digest(), tok)
            problems = validate_caption(rec, max_tokens)
            if not problems:
                return rec
        return AnnotationFailed(sample.sample_id, ctype, ",".join(p.value for p in problems))

    if max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(j) for j in jobs]

    out = AnnotationResult()
    for r in sorted(results, key=lambda r: (r.sample_id, r.caption_type)):
        (out.failures if isinstance(r, AnnotationFailed) else out.records).append(r)
    if out.failures:
        log.warning("annotation failed for %d captions", len(out.failures))
    return out
