"""Desk-scale synthetic audio-visual dataset.

Each segment's verb is audible only (a three-tone chord per verb plus noise)
and its noun is visible only (a coloured shape per noun drifting over a
noisy background). Motion, timing and participants are drawn independently
of both labels.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from egofusion.audio import AudioClip, write_wav
from egofusion.dataops import AnnotationRecord, write_annotations
from egofusion.formats import write_frames
from egofusion.video import frame_diff_flow

COLORS = np.array([
    [0.95, 0.15, 0.15], [0.15, 0.85, 0.2], [0.2, 0.3, 0.95], [0.95, 0.9, 0.1],
    [0.9, 0.2, 0.9], [0.1, 0.9, 0.9], [1.0, 0.55, 0.1], [0.6, 0.6, 0.6],
])
SHAPES = ("square", "disk", "triangle", "cross")


@dataclass(frozen=True)
class SynthConfig:
    num_verbs: int = 4
    num_nouns: int = 4
    samples_per_action: int = 25
    frame_size: int = 64
    frames_per_segment: int = 8
    sample_rate: int = 16000
    min_duration_s: float = 1.5
    max_duration_s: float = 6.0
    audio_noise: float = 0.05
    image_noise: float = 0.08
    channels: int = 2

    def __post_init__(self):
        if self.num_nouns > len(COLORS):
            raise ValueError(f"at most {len(COLORS)} nouns supported")


@dataclass
class SynthDataset:
    config: SynthConfig
    records: list[AnnotationRecord]
    audio: list[AudioClip]
    frames: list[np.ndarray]  # (T, 3, H, W)
    flow: list[np.ndarray]  # (T-1, 2, H, W)

    def save(self, root: str | Path) -> None:
        """annotations.csv, audio/<id>.wav, frames/<id>.img, flow/<id>.img."""
        root = Path(root)
        for sub in ("audio", "frames", "flow"):
            (root / sub).mkdir(parents=True, exist_ok=True)
        write_annotations(root / "annotations.csv", self.records)
        for rec, clip, fr, fl in zip(self.records, self.audio, self.frames, self.flow):
            write_wav(root / "audio" / f"{rec.segment_id}.wav", clip)
            write_frames(root / "frames" / f"{rec.segment_id}.img", fr)
            write_frames(root / "flow" / f"{rec.segment_id}.img", fl)


def verb_chords(num_verbs: int) -> np.ndarray:
    """(num_verbs, 3) tone frequencies in Hz, disjoint between verbs."""
    grid = np.linspace(300.0, 7200.0, 3 * num_verbs)
    order = np.random.default_rng(1234).permutation(3 * num_verbs)
    return np.sort(grid[order].reshape(num_verbs, 3), axis=1)


def _audio(cfg: SynthConfig, verb: int, duration: float, rng: np.random.Generator) -> AudioClip:
    n = int(round(duration * cfg.sample_rate))
    t = np.arange(n) / cfg.sample_rate
    mono = np.zeros(n)
    for f in verb_chords(cfg.num_verbs)[verb]:
        mono += rng.uniform(0.05, 0.12) * np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
    chans = []
    for _ in range(cfg.channels):
        chans.append(rng.uniform(0.8, 1.0) * mono + cfg.audio_noise * rng.standard_normal(n))
    return AudioClip(np.clip(np.stack(chans), -1.0, 1.0), cfg.sample_rate)


def _shape_mask(kind: str, yy: np.ndarray, xx: np.ndarray, cy: float, cx: float, r: float) -> np.ndarray:
    dy, dx = yy - cy, xx - cx
    if kind == "square":
        return (np.abs(dy) <= r) & (np.abs(dx) <= r)
    if kind == "disk":
        return dy ** 2 + dx ** 2 <= r ** 2
    if kind == "triangle":
        return (dy <= r) & (dy >= -r) & (np.abs(dx) <= (dy + r) / 2)
    return ((np.abs(dy) <= r / 3) & (np.abs(dx) <= r)) | ((np.abs(dx) <= r / 3) & (np.abs(dy) <= r))


def _frames(cfg: SynthConfig, noun: int, rng: np.random.Generator) -> np.ndarray:
    size, steps = cfg.frame_size, cfg.frames_per_segment
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    r = size * rng.uniform(0.14, 0.2)
    cy, cx = rng.uniform(r, size - r, size=2)
    vy, vx = rng.uniform(-2.5, 2.5, size=2)
    color = np.clip(COLORS[noun] + rng.uniform(-0.08, 0.08, size=3), 0, 1)
    background = rng.uniform(0.0, 0.25, size=(3, 1, 1))
    out = np.empty((steps, 3, size, size), dtype=np.float32)
    kind = SHAPES[noun % len(SHAPES)]
    for t in range(steps):
        py = np.clip(cy + vy * t, r, size - r)
        px = np.clip(cx + vx * t, r, size - r)
        mask = _shape_mask(kind, yy, xx, py, px, r)
        img = background + cfg.image_noise * rng.standard_normal((3, size, size))
        img = np.where(mask[None], color[:, None, None], img)
        out[t] = np.clip(img, 0, 1)
    return out


def synth_multimodal_generate(config: SynthConfig | None = None, seed: int = 0) -> SynthDataset:
    cfg = config or SynthConfig()
    rng = np.random.default_rng(seed)
    pairs = [(v, n) for v in range(cfg.num_verbs) for n in range(cfg.num_nouns)
             for _ in range(cfg.samples_per_action)]
    order = rng.permutation(len(pairs))
    records, audio, frames, flow = [], [], [], []
    clock: dict[str, float] = {}
    for idx, pi in enumerate(order):
        verb, noun = pairs[pi]
        participant = f"P{int(rng.integers(1, 32)):02d}"
        video = f"{participant}_{int(rng.integers(1, 6)):02d}"
        duration = float(np.round(rng.uniform(cfg.min_duration_s, cfg.max_duration_s), 3))
        start = clock.get(video, 0.0) + float(np.round(rng.uniform(0.5, 3.0), 3))
        clock[video] = start + duration
        records.append(AnnotationRecord(f"seg{idx:05d}", participant, video, round(start, 3),
                                        round(start + duration, 3), verb, noun))
        audio.append(_audio(cfg, verb, duration, rng))
        fr = _frames(cfg, noun, rng)
        frames.append(fr)
        flow.append(frame_diff_flow(fr))
    return SynthDataset(cfg, records, audio, frames, flow)


def decode_chord(clip: AudioClip, num_verbs: int) -> int:
    """Verb whose chord carries the most spectral energy (oracle decoder)."""
    x = clip.samples.mean(axis=0)
    spec = np.abs(np.fft.rfft(x)) ** 2
    freqs = np.fft.rfftfreq(x.shape[0], 1.0 / clip.sample_rate)
    energy = []
    for chord in verb_chords(num_verbs):
        bins = [np.argmin(np.abs(freqs - f)) for f in chord]
        energy.append(sum(spec[max(b - 2, 0):b + 3].sum() for b in bins))
    return int(np.argmax(energy))


def mutual_information(a, b) -> float:
    """Plug-in mutual information (nats) between two discrete label arrays."""
    a, b = np.asarray(a), np.asarray(b)
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    joint = np.zeros((ai.max() + 1, bi.max() + 1))
    np.add.at(joint, (ai, bi), 1.0)
    joint /= joint.sum()
    pa, pb = joint.sum(axis=1, keepdims=True), joint.sum(axis=0, keepdims=True)
    nz = joint > 0
    return float((joint[nz] * np.log(joint[nz] / (pa @ pb)[nz])).sum())
