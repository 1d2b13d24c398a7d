"""Dilated audio network, small visual backbone, TSN wrapper and stream training."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from egofusion import tensor as T
from egofusion.nn import Conv2d, Dense, Module
from egofusion.optim import SgdState, step_parameters
from egofusion.tensor import Tensor
from egofusion.video import (
    center_crop,
    random_crop_flip,
    sample_test,
    sample_train,
    split_segments,
)

# (filters, kernel, dilation) for the four conv layers of the audio network
DILATED_CONVS: tuple[tuple[int, tuple[int, int], tuple[int, int]], ...] = (
    (64, (11, 7), (9, 4)),
    (64, (6, 4), (9, 4)),
    (32, (6, 4), (9, 4)),
    (16, (6, 4), (9, 4)),
)
DILATED_POOL_AFTER = (0, 3)
DILATED_DENSE = (256, 256)
DILATED_INPUT = (331, 248)


STREAM_ORDER = ("rgb", "flow", "audio")


class ConfigError(ValueError):
    pass


@dataclass
class StreamScores:
    """Per-class probabilities and penultimate features from one stream, (n, C) and (n, P)."""

    stream_id: str
    probs: np.ndarray
    penultimate: np.ndarray

    def __post_init__(self):
        if self.stream_id not in STREAM_ORDER:
            raise ValueError(f"unknown stream {self.stream_id!r}")
        self.probs = np.atleast_2d(np.asarray(self.probs, dtype=np.float64))
        self.penultimate = np.atleast_2d(np.asarray(self.penultimate, dtype=np.float64))
        if self.probs.shape[0] != self.penultimate.shape[0]:
            raise ValueError("probs and penultimate disagree on sample count")


@dataclass(frozen=True)
class DilatedNetConfig:
    num_classes: int
    input_shape: tuple[int, int] = DILATED_INPUT
    convs: tuple = DILATED_CONVS
    pool_after: tuple[int, ...] = DILATED_POOL_AFTER
    dense: tuple[int, ...] = DILATED_DENSE
    strict: bool = True

    def __post_init__(self):
        if self.num_classes < 1:
            raise ConfigError("num_classes must be positive")
        if self.strict:
            table = (
                tuple(self.input_shape) == DILATED_INPUT
                and tuple((f, tuple(k), tuple(d)) for f, k, d in self.convs) == DILATED_CONVS
                and tuple(self.pool_after) == DILATED_POOL_AFTER
                and tuple(self.dense) == DILATED_DENSE
            )
            if not table:
                raise ConfigError("strict mode requires the exact full-size 331x248 layer list")

    @classmethod
    def scaled(cls, num_classes: int, widths: Sequence[int], input_shape=DILATED_INPUT,
               dense: Sequence[int] = DILATED_DENSE) -> "DilatedNetConfig":
        """Full-size kernels and dilations with different filter counts."""
        convs = tuple((w, k, d) for w, (_, k, d) in zip(widths, DILATED_CONVS))
        return cls(num_classes, tuple(input_shape), convs, DILATED_POOL_AFTER, tuple(dense), strict=False)

    def to_dict(self) -> dict:
        return {
            "kind": "dilated",
            "num_classes": self.num_classes,
            "input_shape": list(self.input_shape),
            "convs": [[f, list(k), list(d)] for f, k, d in self.convs],
            "pool_after": list(self.pool_after),
            "dense": list(self.dense),
            "strict": self.strict,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DilatedNetConfig":
        convs = tuple((f, tuple(k), tuple(dl)) for f, k, dl in d["convs"])
        return cls(d["num_classes"], tuple(d["input_shape"]), convs, tuple(d["pool_after"]),
                   tuple(d["dense"]), d["strict"])


@dataclass(frozen=True)
class VisualBackboneConfig:
    num_classes: int
    in_channels: int = 3
    input_size: int = 64
    widths: tuple[int, ...] = (8, 16, 32, 32)
    penultimate_dim: int = 256

    def to_dict(self) -> dict:
        return {"kind": "visual", "num_classes": self.num_classes, "in_channels": self.in_channels,
                "input_size": self.input_size, "widths": list(self.widths),
                "penultimate_dim": self.penultimate_dim}

    @classmethod
    def from_dict(cls, d: dict) -> "VisualBackboneConfig":
        return cls(d["num_classes"], d["in_channels"], d["input_size"], tuple(d["widths"]), d["penultimate_dim"])


def _ceil_half(n: int) -> int:
    return -(-n // 2)


class DilatedNet(Module):
    """Dilated conv stack -> flatten -> dense(relu) x2 -> linear classifier."""

    def __init__(self, config: DilatedNetConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.config = config
        convs, in_ch = [], 1
        for filters, kernel, dilation in config.convs:
            convs.append(Conv2d(in_ch, filters, kernel, dilation, "same", rng))
            in_ch = filters
        self.convs = convs
        h, w = config.input_shape
        for _ in config.pool_after:
            h, w = _ceil_half(h), _ceil_half(w)
        self.flat_dim = in_ch * h * w
        dense, d_in = [], self.flat_dim
        for d_out in config.dense:
            dense.append(Dense(d_in, d_out, rng))
            d_in = d_out
        self.dense = dense
        self.classifier = Dense(d_in, config.num_classes, rng)

    @property
    def penultimate_dim(self) -> int:
        return self.config.dense[-1]

    def forward(self, x: Tensor, trace: list | None = None) -> tuple[Tensor, Tensor]:
        """Input (N, 1, F, T); returns (logits, penultimate activations)."""
        x = T.as_tensor(x)
        if x.values.ndim != 4 or x.shape[1:] != (1, *self.config.input_shape):
            raise T.ShapeError(f"expected input (N, 1, {self.config.input_shape[0]}, "
                               f"{self.config.input_shape[1]}), got {x.shape}")
        for i, conv in enumerate(self.convs):
            x = T.relu(conv(x))
            if trace is not None:
                trace.append((f"conv{i + 1}", x.shape[1:]))
            if i in self.config.pool_after:
                x = T.maxpool2x2_ceil(x)
                if trace is not None:
                    trace.append(("maxpool", x.shape[1:]))
        x = T.reshape(x, (x.shape[0], -1))
        if trace is not None:
            trace.append(("flatten", x.shape[1:]))
        for i, layer in enumerate(self.dense):
            x = T.relu(layer(x))
            if trace is not None:
                trace.append((f"dense{i + 1}", x.shape[1:]))
        logits = self.classifier(x)
        if trace is not None:
            trace.append(("classifier", logits.shape[1:]))
        return logits, x

    def shape_trace(self) -> list[tuple[str, tuple[int, ...]]]:
        trace: list = []
        zeros = np.zeros((1, 1, *self.config.input_shape), dtype=self.convs[0].weight.dtype)
        self.forward(Tensor(zeros), trace)
        return trace

    def loss(self, x, labels) -> Tensor:
        logits, _ = self.forward(x)
        return T.cross_entropy(logits, labels)

    def scores(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        logits, pen = self.forward(Tensor(x))
        return T.softmax(logits, axis=1).values, pen.values


class VisualBackbone(Module):
    """Four conv3x3+relu+pool stages, dense(relu) penultimate, linear classifier."""

    def __init__(self, config: VisualBackboneConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.config = config
        stages, in_ch, size = [], config.in_channels, config.input_size
        for width in config.widths:
            stages.append(Conv2d(in_ch, width, (3, 3), (1, 1), "same", rng))
            in_ch, size = width, _ceil_half(size)
        self.stages = stages
        self.penultimate = Dense(in_ch * size * size, config.penultimate_dim, rng)
        self.classifier = Dense(config.penultimate_dim, config.num_classes, rng)

    @property
    def penultimate_dim(self) -> int:
        return self.config.penultimate_dim

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        x = T.as_tensor(x)
        for conv in self.stages:
            x = T.maxpool2x2_ceil(T.relu(conv(x)))
        pen = T.relu(self.penultimate(x))
        return self.classifier(pen), pen

    def loss(self, x, labels) -> Tensor:
        logits, _ = self.forward(x)
        return T.cross_entropy(logits, labels)

    def scores(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        logits, pen = self.forward(Tensor(x))
        return T.softmax(logits, axis=1).values, pen.values


class TsnModel(Module):
    """Runs the backbone on every sampled frame and averages the softmax scores."""

    def __init__(self, backbone: VisualBackbone, k: int = 3):
        self.backbone = backbone
        self.k = k

    @property
    def config(self):
        return self.backbone.config

    @property
    def penultimate_dim(self) -> int:
        return self.backbone.penultimate_dim

    def forward(self, frames: Tensor) -> tuple[Tensor, Tensor]:
        """Frames (N, S, C, H, W) -> (consensus probabilities, mean penultimate)."""
        frames = T.as_tensor(frames)
        n, s = frames.shape[:2]
        flat = T.reshape(frames, (n * s, *frames.shape[2:]))
        logits, pen = self.backbone.forward(flat)
        probs = T.softmax(logits, axis=1)
        probs = T.mean(T.reshape(probs, (n, s, -1)), axis=1)
        pen = T.mean(T.reshape(pen, (n, s, -1)), axis=1)
        return probs, pen

    def loss(self, frames, labels) -> Tensor:
        probs, _ = self.forward(frames)
        return T.nll_of_probs(probs, labels)

    def scores(self, frames: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        probs, pen = self.forward(Tensor(frames))
        return probs.values, pen.values


def build_dilated_net(config: DilatedNetConfig, seed: int = 0) -> DilatedNet:
    return DilatedNet(config, seed)


def build_model(config: dict, seed: int = 0, k: int = 3) -> Module:
    if config["kind"] == "dilated":
        return DilatedNet(DilatedNetConfig.from_dict(config), seed)
    if config["kind"] == "visual":
        return TsnModel(VisualBackbone(VisualBackboneConfig.from_dict(config), seed), k)
    raise ConfigError(f"unknown model kind {config['kind']!r}")


def forward_audio(net: DilatedNet, spec) -> StreamScores:
    """Scores for one spectrogram (array or :class:`~egofusion.audio.Spectrogram`)."""
    data = np.asarray(getattr(spec, "data", spec), dtype=net.convs[0].weight.dtype)
    if data.shape != tuple(net.config.input_shape):
        raise T.ShapeError(f"spectrogram shape {data.shape} != network input {net.config.input_shape}")
    probs, pen = net.scores(data[None, None])
    return StreamScores("audio", probs, pen)


def forward_tsn(model: TsnModel, frames: np.ndarray, rng: np.random.Generator | None = None,
                stream_id: str = "rgb", crop_size: int | None = None, test_samples: int = 25) -> StreamScores:
    """Scores for one (T, C, H, W) clip: K sparse samples with ``rng``, else the test-time sampling."""
    inputs = FrameInputs([np.asarray(frames)], model.k, crop_size, test_samples)
    probs, pen = model.scores(inputs.batch([0], rng))
    return StreamScores(stream_id, probs, pen)


# --------------------------------------------------------------------------- inputs


class StreamInputs(Protocol):
    def batch(self, indices: Sequence[int], rng: np.random.Generator | None) -> np.ndarray:
        """Network input for ``indices``; training mode when ``rng`` is given."""


@dataclass
class SpectrogramInputs:
    spectrograms: np.ndarray  # (n, F, T)

    def batch(self, indices, rng=None) -> np.ndarray:
        return self.spectrograms[np.asarray(indices)][:, None]

    def __len__(self) -> int:
        return len(self.spectrograms)


@dataclass
class FrameInputs:
    """Per-segment frame stacks (T, C, H, W), sampled TSN-style.

    ``stack`` > 1 concatenates that many consecutive frames on the channel
    axis (optical-flow stacking).
    """

    frames: Sequence[np.ndarray]
    k: int = 3
    crop_size: int | None = None
    test_samples: int = 25
    stack: int = 1

    def _stacked(self, seq: np.ndarray, idx: np.ndarray) -> np.ndarray:
        if self.stack == 1:
            return seq[idx]
        last = seq.shape[0] - 1
        parts = [seq[np.minimum(idx + j, last)] for j in range(self.stack)]
        return np.concatenate(parts, axis=1)

    def batch(self, indices, rng=None) -> np.ndarray:
        out = []
        for i in indices:
            seq = self.frames[i]
            n = seq.shape[0]
            if rng is not None:
                picked = self._stacked(seq, sample_train(split_segments(n, self.k), rng))
                if self.crop_size is not None:
                    picked = random_crop_flip(picked, self.crop_size, rng)
            else:
                picked = self._stacked(seq, sample_test(n, self.test_samples))
                if self.crop_size is not None:
                    picked = center_crop(picked, self.crop_size)
            out.append(np.ascontiguousarray(picked))
        return np.stack(out).astype(np.float32)

    def __len__(self) -> int:
        return len(self.frames)


def predict(model, inputs: StreamInputs, indices: Sequence[int], batch_size: int = 16) -> tuple[np.ndarray, np.ndarray]:
    """Test-mode (probabilities, penultimate features) for ``indices``."""
    probs, pens = [], []
    indices = list(indices)
    for start in range(0, len(indices), batch_size):
        p, f = model.scores(inputs.batch(indices[start:start + batch_size], None))
        probs.append(p)
        pens.append(f)
    return np.concatenate(probs), np.concatenate(pens)


# --------------------------------------------------------------------------- training


@dataclass
class TrainHyper:
    learning_rate: float = 1e-4
    momentum: float = 0.9
    batch_size: int = 6
    epochs: int = 30
    patience: int = 10
    seed: int = 0
    monitor: str = "top1"  # early-stopping signal: validation "top1" (higher) or "loss" (lower)

    def __post_init__(self):
        if self.monitor not in ("top1", "loss"):
            raise ValueError(f"monitor must be 'top1' or 'loss', got {self.monitor!r}")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_top1: float


@dataclass
class TrainResult:
    history: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_val_top1: float = -1.0
    best_val_loss: float = float("inf")


def train_stream(model, inputs: StreamInputs, labels: np.ndarray, train_idx: Sequence[int],
                 val_idx: Sequence[int], hyper: TrainHyper) -> TrainResult:
    """Mini-batch SGD with momentum and early stopping on a validation signal.

    ``hyper.monitor`` picks the signal: top-1 accuracy or the mean negative
    log-likelihood of the predicted probabilities. The model is left holding
    the parameters of the best validation epoch (first one on ties).
    """
    train_idx, val_idx = np.asarray(train_idx), np.asarray(val_idx)
    if train_idx.size == 0 or val_idx.size == 0:
        raise ValueError("training and validation splits must be non-empty")
    if np.intersect1d(train_idx, val_idx).size:
        raise ValueError("training and validation splits overlap")
    labels = np.asarray(labels)
    rng = np.random.default_rng(hyper.seed)
    state = SgdState(hyper.learning_rate, hyper.momentum)
    params = [p for p in model.parameters() if p.requires_grad]
    result = TrainResult()
    best_state = model.state_dict()
    stale = 0
    for epoch in range(1, hyper.epochs + 1):
        order = rng.permutation(train_idx)
        losses = []
        for start in range(0, len(order), hyper.batch_size):
            idx = order[start:start + hyper.batch_size]
            x = inputs.batch(idx, rng)
            model.zero_grad()
            loss = model.loss(Tensor(x), labels[idx])
            loss.backward()
            step_parameters(params, state)
            losses.append(float(loss.values) * len(idx))
        probs, _ = predict(model, inputs, val_idx)
        val_top1 = float(np.mean(probs.argmax(axis=1) == labels[val_idx]))
        picked = probs[np.arange(len(val_idx)), labels[val_idx]]
        val_loss = float(np.mean(-np.log(np.maximum(picked, 1e-12))))
        result.history.append(EpochRecord(epoch, float(np.sum(losses) / len(order)), val_loss, val_top1))
        if hyper.monitor == "top1":
            improved = val_top1 > result.best_val_top1
        else:
            improved = val_loss < result.best_val_loss
        if improved:
            result.best_val_top1, result.best_val_loss, result.best_epoch = val_top1, val_loss, epoch
            best_state = model.state_dict()
            stale = 0
        else:
            stale += 1
            if stale >= hyper.patience:
                break
    model.load_state_dict(best_state)
    model.zero_grad()
    return result


def write_history(path: str | Path, history: Sequence[EpochRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss", "val_top1"])
        for r in history:
            w.writerow([r.epoch, f"{r.train_loss:.8g}", f"{r.val_loss:.8g}", f"{r.val_top1:.8g}"])
