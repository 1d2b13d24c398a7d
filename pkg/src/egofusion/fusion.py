"""Late fusion: weighted score sums and a two-layer FC head over penultimate features."""
from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from egofusion import tensor as T
from egofusion.nets import STREAM_ORDER, StreamScores, TrainHyper, TrainResult, predict, train_stream
from egofusion.nn import Dense, Module
from egofusion.tensor import Tensor, parameters_checksum

DEFAULT_GRID = tuple(round(1.0 + 0.1 * i, 1) for i in range(11))


class FusionError(ValueError):
    pass


class FrozenStreamError(RuntimeError):
    pass


def weighted_sum_fuse(probs: Sequence[np.ndarray], weights: Sequence[float] | None = None) -> np.ndarray:
    """``sum_i w_i * probs_i`` renormalized onto the simplex (last axis)."""
    if len(probs) == 0:
        raise FusionError("nothing to fuse")
    arrays = [np.asarray(p, dtype=np.float64) for p in probs]
    if len({a.shape for a in arrays}) != 1:
        raise FusionError(f"stream score shapes differ: {[a.shape for a in arrays]}")
    weights = [1.0] * len(arrays) if weights is None else list(weights)
    if len(weights) != len(arrays):
        raise FusionError("one weight per stream required")
    if any(w <= 0 for w in weights):
        raise FusionError("fusion weights must be positive")
    fused = sum(w * a for w, a in zip(weights, arrays))
    return fused / fused.sum(axis=-1, keepdims=True)


def _top1(probs: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(probs.argmax(axis=1) == labels))


def grid_search_weights(probs_val: Sequence[np.ndarray], labels_val, grid: Sequence[float] = DEFAULT_GRID,
                        pin_first: bool = True) -> tuple[float, ...]:
    """Weights maximizing validation top-1 over ``grid`` per stream.

    The first stream is pinned to 1.0 by default. Ties go to the
    lexicographically smallest weight tuple.
    """
    labels_val = np.asarray(labels_val)
    if labels_val.size == 0:
        raise FusionError("empty validation set")
    free = len(probs_val) - 1 if pin_first else len(probs_val)
    best, best_acc = None, -1.0
    for combo in itertools.product(sorted(grid), repeat=free):
        weights = ((1.0,) + combo) if pin_first else combo
        acc = _top1(weighted_sum_fuse(probs_val, weights), labels_val)
        if acc > best_acc:
            best, best_acc = weights, acc
    return tuple(float(w) for w in best)


def concat_penultimate(scores: Sequence[StreamScores]) -> np.ndarray:
    """Concatenate penultimate features in the fixed rgb, flow, audio order."""
    ids = [s.stream_id for s in scores]
    positions = [STREAM_ORDER.index(i) for i in ids]
    if positions != sorted(positions) or len(set(ids)) != len(ids):
        raise FusionError(f"streams must follow the order {STREAM_ORDER}, got {ids}")
    if len({s.penultimate.shape[0] for s in scores}) != 1:
        raise FusionError("streams disagree on sample count")
    return np.concatenate([s.penultimate for s in scores], axis=-1)


class FcFusionHead(Module):
    def __init__(self, input_dim: int, num_classes: int, hidden_dim: int = 512, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        self.num_classes = num_classes
        self.hidden = Dense(input_dim, hidden_dim, rng)
        self.out = Dense(hidden_dim, num_classes, rng)

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        x = T.as_tensor(x)
        if x.shape[1] != self.input_dim:
            raise T.ShapeError(f"fusion head expects {self.input_dim} features, got {x.shape[1]}")
        h = T.relu(self.hidden(x))
        return self.out(h), h

    def loss(self, x, labels) -> Tensor:
        logits, _ = self.forward(x)
        return T.cross_entropy(logits, labels)

    def scores(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        logits, h = self.forward(Tensor(x))
        return T.softmax(logits, axis=1).values, h.values


@dataclass
class FeatureInputs:
    features: np.ndarray

    def batch(self, indices, rng=None) -> np.ndarray:
        return self.features[np.asarray(indices)].astype(np.float32)


def stream_features(streams: Sequence[tuple[str, Module, object]], indices: Sequence[int]) -> np.ndarray:
    """Concatenated penultimate features of ``(stream_id, model, inputs)`` triples."""
    scores = []
    for stream_id, model, inputs in streams:
        probs, pen = predict(model, inputs, indices)
        scores.append(StreamScores(stream_id, probs, pen))
    return concat_penultimate(scores)


def train_fc_fusion(head: FcFusionHead, features: np.ndarray, labels, train_idx, val_idx,
                    hyper: TrainHyper, streams: Sequence[Module] = ()) -> TrainResult:
    """Train only the head on concatenated stream features.

    ``streams`` are the models the features came from; they must already be
    frozen and their parameters are verified unchanged afterwards.
    """
    for s in streams:
        if not s.frozen:
            raise FrozenStreamError("fusion requires frozen stream networks; call freeze() first")
    before = [parameters_checksum(s.parameters()) for s in streams]
    result = train_stream(head, FeatureInputs(np.asarray(features)), np.asarray(labels), train_idx, val_idx, hyper)
    after = [parameters_checksum(s.parameters()) for s in streams]
    if before != after:
        raise FrozenStreamError("stream parameters changed during fusion training")
    return result


# --------------------------------------------------------------------------- score files


def _fmt(v: float) -> str:
    return format(float(v), ".9g")


def write_scores(path: str | Path, segment_ids: Sequence[str], probs: np.ndarray, penultimate: np.ndarray) -> None:
    probs = np.atleast_2d(probs)
    penultimate = np.atleast_2d(penultimate) if penultimate is not None else np.zeros((len(segment_ids), 0))
    c, p = probs.shape[1], penultimate.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["segment_id"] + [f"p{i}" for i in range(c)] + [f"f{i}" for i in range(p)])
        for sid, pr, pe in zip(segment_ids, probs, penultimate):
            w.writerow([sid] + [_fmt(v) for v in pr] + [_fmt(v) for v in pe])


def read_scores(path: str | Path) -> tuple[list[str], np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][0] != "segment_id":
        raise FusionError(f"{path}: missing score header")
    header = rows[0]
    pcols = [i for i, h in enumerate(header) if h.startswith("p")]
    fcols = [i for i, h in enumerate(header) if h.startswith("f")]
    ids = [r[0] for r in rows[1:]]
    data = np.array([[float(v) for v in r[1:]] for r in rows[1:]], dtype=np.float64).reshape(len(ids), -1)
    probs = data[:, [i - 1 for i in pcols]]
    pen = data[:, [i - 1 for i in fcols]]
    return ids, probs, pen
