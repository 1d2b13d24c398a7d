"""TSN-style temporal segmentation, sparse sampling and score consensus."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from egofusion.formats import read_frames

LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class SegmentPlan:
    k: int
    boundaries: tuple[tuple[int, int], ...]

    def sizes(self) -> list[int]:
        return [b - a for a, b in self.boundaries]


def split_segments(n: int, k: int = 3) -> SegmentPlan:
    """Contiguous split of ``n`` frames into ``k`` segments.

    The first ``n % k`` segments take one extra frame. With ``n < k`` every
    segment holds a single frame and frames are reused.
    """
    if n < 1 or k < 1:
        raise ValueError("need n >= 1 and k >= 1")
    if n < k:
        starts = [i * n // k for i in range(k)]
        return SegmentPlan(k, tuple((s, s + 1) for s in starts))
    base, extra = divmod(n, k)
    bounds, start = [], 0
    for i in range(k):
        size = base + (1 if i < extra else 0)
        bounds.append((start, start + size))
        start += size
    return SegmentPlan(k, tuple(bounds))


def sample_train(plan: SegmentPlan, rng: np.random.Generator) -> np.ndarray:
    """One uniformly random frame index per segment."""
    lo = np.array([a for a, _ in plan.boundaries])
    hi = np.array([b for _, b in plan.boundaries])
    return rng.integers(lo, hi)


def sample_test(n: int, count: int = 25) -> np.ndarray:
    """``count`` centred, evenly spaced indices over the whole clip."""
    if n < 1:
        raise ValueError("need n >= 1")
    i = np.arange(count)
    return ((2 * i + 1) * n) // (2 * count)


def consensus_average(scores: Sequence[np.ndarray]) -> np.ndarray:
    if len(scores) == 0:
        raise ValueError("consensus of an empty score list")
    stacked = np.stack([np.asarray(s, dtype=np.float64) for s in scores])
    return stacked.mean(axis=0)


def to_gray(frame: np.ndarray) -> np.ndarray:
    if frame.shape[0] == 3:
        return np.tensordot(LUMA, frame, axes=1)
    return frame.mean(axis=0)


def frame_diff_flow(frames: np.ndarray) -> np.ndarray:
    """Cheap 2-channel motion surrogate for consecutive frame pairs.

    For each pair the grayscale temporal difference is taken; its central
    spatial gradients along x and y form the two output channels.
    Input (T, C, H, W), output (T-1, 2, H, W).
    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 4 or frames.shape[0] < 2:
        raise ValueError("frame_diff_flow needs at least two (C, H, W) frames")
    gray = np.stack([to_gray(f) for f in frames])
    diff = gray[1:] - gray[:-1]
    dy, dx = np.gradient(diff, axis=(1, 2))
    return np.stack([dx, dy], axis=1).astype(np.float32)


def center_crop(frames: np.ndarray, size: int) -> np.ndarray:
    h, w = frames.shape[-2:]
    top, left = (h - size) // 2, (w - size) // 2
    return frames[..., top:top + size, left:left + size]


def random_crop_flip(frames: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    """Same random crop and horizontal flip for every frame in the stack."""
    h, w = frames.shape[-2:]
    top = int(rng.integers(0, h - size + 1))
    left = int(rng.integers(0, w - size + 1))
    out = frames[..., top:top + size, left:left + size]
    if rng.random() < 0.5:
        out = out[..., ::-1]
    return out


def load_frame_dir(path: str | Path) -> np.ndarray:
    """Read ``frame_%010d.*`` images (sorted) into a (T, 3, H, W) array in [0, 1]."""
    from PIL import Image

    files = sorted(p for p in Path(path).iterdir() if p.name.startswith("frame_"))
    if not files:
        raise ValueError(f"{path}: no frame_* images")
    arrays = [np.asarray(Image.open(f).convert("RGB"), dtype=np.float32) / 255.0 for f in files]
    return np.stack(arrays).transpose(0, 3, 1, 2)


def load_frames(path: str | Path) -> np.ndarray:
    path = Path(path)
    return load_frame_dir(path) if path.is_dir() else read_frames(path)
