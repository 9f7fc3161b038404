"""68-point face layout, AU-to-landmark mapping and a stub landmark provider.

Point indices follow the common iBUG 68 convention (0-based):
jaw 0-16, brows 17-26, nose 27-35, eyes 36-47, outer lips 48-59, inner lips 60-67.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import BadAUMap

N_LANDMARKS = 68


def _arc(cx, cy, rx, ry, t0, t1, n):
    t = np.linspace(t0, t1, n)
    return np.stack([cx + rx * np.cos(t), cy + ry * np.sin(t)], axis=1)


def _canonical_unit() -> np.ndarray:
    pts = [
        _arc(0.5, 0.45, 0.40, 0.48, np.pi, 0.0, 17),  # jaw, left to right
        np.stack([np.linspace(0.18, 0.44, 5), 0.30 - 0.04 * np.sin(np.linspace(0, np.pi, 5))], 1),
        np.stack([np.linspace(0.56, 0.82, 5), 0.30 - 0.04 * np.sin(np.linspace(0, np.pi, 5))], 1),
        np.stack([np.full(4, 0.5), np.linspace(0.38, 0.56, 4)], 1),
        np.stack([np.linspace(0.42, 0.58, 5), 0.60 + 0.02 * np.sin(np.linspace(0, np.pi, 5))], 1),
        _arc(0.32, 0.40, 0.07, 0.03, np.pi, 3 * np.pi, 7)[:6],
        _arc(0.68, 0.40, 0.07, 0.03, np.pi, 3 * np.pi, 7)[:6],
        _arc(0.5, 0.76, 0.14, 0.06, np.pi, 3 * np.pi, 13)[:12],
        _arc(0.5, 0.76, 0.09, 0.03, np.pi, 3 * np.pi, 9)[:8],
    ]
    out = np.concatenate(pts, axis=0)
    assert out.shape == (N_LANDMARKS, 2)
    return out


_CANONICAL = _canonical_unit()


def canonical_landmarks(image_size: int) -> np.ndarray:
    """Canonical frontal face scaled to an ``image_size`` square, shape [68, 2]."""
    return np.clip(_CANONICAL * image_size, 0.0, np.nextafter(image_size, 0))


@dataclass(frozen=True)
class AULandmarkMap:
    """AU id -> (landmark indices, (dx, dy) offset in patch units)."""

    entries: Mapping[int, tuple[tuple[int, ...], tuple[float, float]]]

    def __post_init__(self):
        for au, (idx, off) in self.entries.items():
            if not idx or any(not 0 <= i < N_LANDMARKS for i in idx):
                raise BadAUMap(f"AU{au}: landmark indices must be in [0, {N_LANDMARKS})")
            if len(off) != 2:
                raise BadAUMap(f"AU{au}: offset must be (dx, dy)")

    def check_complete(self, au_ids) -> None:
        missing = [a for a in au_ids if a not in self.entries]
        if missing:
            raise BadAUMap(f"unmapped AUs: {missing}")

    def center_px(self, landmarks: np.ndarray, au: int) -> np.ndarray:
        """Mean of the AU's landmarks in pixel coordinates (offset not applied)."""
        if au not in self.entries:
            raise BadAUMap(f"AU{au} is not mapped")
        idx, _ = self.entries[au]
        return np.asarray(landmarks, dtype=np.float64)[list(idx)].mean(axis=0)

    def offset(self, au: int) -> tuple[float, float]:
        return self.entries[au][1]

    def to_json(self) -> str:
        return json.dumps({str(k): {"landmarks": list(v[0]), "offset": list(v[1])}
                           for k, v in sorted(self.entries.items())}, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "AULandmarkMap":
        raw = json.loads(text)
        return cls({int(k): (tuple(int(i) for i in v["landmarks"]), tuple(float(o) for o in v["offset"]))
                    for k, v in raw.items()})

    @classmethod
    def load(cls, path) -> "AULandmarkMap":
        return cls.from_json(Path(path).read_text())


DEFAULT_AU_MAP = AULandmarkMap({
    1: ((21, 22), (0.0, 0.0)),            # inner brows
    2: ((17, 18), (0.0, 0.0)),            # outer brow
    4: ((19, 20, 21, 22, 23, 24), (0.0, 0.5)),  # glabella
    6: ((36, 40, 41), (0.0, 1.0)),        # cheek below the eye
    7: ((36, 37, 38, 39, 40, 41), (0.0, 0.0)),  # lids
    10: ((33, 50, 51, 52), (0.0, 0.0)),   # nose-adjacent upper lip
    12: ((48,), (0.0, 0.0)),              # mouth corner
    15: ((54,), (0.0, 1.0)),              # other corner, pulled down
    23: ((61, 62, 63, 65, 66, 67), (0.0, 0.0)),
    24: ((50, 51, 52, 56, 57, 58), (0.0, 0.0)),
    25: ((62, 66), (0.0, 0.0)),
    26: ((57, 8), (0.0, 0.0)),            # lower lip to chin
})


class StubLandmarkProvider:
    """Returns the landmarks stored with a sample; falls back to the canonical face.

    Stands in for a real landmark detector.
    """

    def __init__(self, image_size: int):
        self.image_size = image_size

    def __call__(self, sample=None) -> np.ndarray:
        if sample is not None and getattr(sample, "landmarks", None) is not None:
            return np.asarray(sample.landmarks, dtype=np.float64)
        return canonical_landmarks(self.image_size)
