"""Minimal reverse-mode differentiation over numpy arrays.

Only the layer set needed by the audio and visual networks is provided:
dilated 2-D convolution, 2x2 ceil-mode max pooling, dense, relu, softmax,
cross-entropy, plus the reshape/mean glue used by the TSN consensus.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when operand dimensions do not line up."""


class Tensor:
    __slots__ = ("values", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(values)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.values = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype

    def numpy(self) -> np.ndarray:
        return self.values

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=self.values.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.values.size != 1:
                raise ShapeError("backward() without a seed gradient needs a scalar tensor")
            grad = np.ones_like(self.values)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.values.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """A leaf tensor owned by a module; trainable unless frozen."""

    __slots__ = ()

    def __init__(self, values, name: str | None = None):
        super().__init__(values, requires_grad=True, name=name)


def _result(values: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(values)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# --------------------------------------------------------------------------- conv


def same_padding(kernel: int, dilation: int) -> tuple[int, int]:
    """(before, after) padding keeping a stride-1 output the size of the input.

    When the total is odd the extra row/column goes after (bottom/right).
    """
    total = (kernel - 1) * dilation
    return total // 2, total - total // 2


def conv2d_dilated(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    dilation: tuple[int, int] = (1, 1),
    padding: str = "same",
) -> Tensor:
    """Stride-1 dilated convolution on NCHW input.

    ``weight`` is (out, in, kh, kw). ``padding`` is ``"same"`` (asymmetric,
    shape preserving) or ``"valid"``.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.values.ndim != 4:
        raise ShapeError(f"conv2d expects NCHW input, got shape {x.shape}")
    if weight.values.ndim != 4:
        raise ShapeError(f"conv2d weight must be (out, in, kh, kw), got {weight.shape}")
    n, c, h, w = x.shape
    o, ci, kh, kw = weight.shape
    if ci != c:
        raise ShapeError(f"conv2d input has {c} channels but weight expects {ci}")
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"conv2d bias must have shape ({o},), got {bias.shape}")
    dh, dw = dilation
    if padding == "same":
        pt, pb = same_padding(kh, dh)
        pl, pr = same_padding(kw, dw)
    elif padding == "valid":
        pt = pb = pl = pr = 0
    else:
        raise ValueError(f"unknown padding mode {padding!r}")
    hp, wp = h + pt + pb, w + pl + pr
    ho, wo = hp - (kh - 1) * dh, wp - (kw - 1) * dw
    if ho < 1 or wo < 1:
        raise ShapeError(
            f"valid conv with extent {(kh - 1) * dh + 1}x{(kw - 1) * dw + 1} "
            f"does not fit input {h}x{w}"
        )
    xv = x.values
    if pt or pb or pl or pr:
        xp = np.zeros((n, c, hp, wp), dtype=xv.dtype)
        xp[:, :, pt:pt + h, pl:pl + w] = xv
    else:
        xp = xv
    # cols: (C, kh, kw, N, Ho, Wo) so the contraction is one GEMM
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=xv.dtype)
    xpt = xp.transpose(1, 0, 2, 3)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xpt[:, :, i * dh:i * dh + ho, j * dw:j * dw + wo]
    k = c * kh * kw
    cols2 = cols.reshape(k, n * ho * wo)
    w2 = weight.values.reshape(o, k)
    out = w2 @ cols2
    if bias is not None:
        out += bias.values[:, None]
    out = np.ascontiguousarray(out.reshape(o, n, ho, wo).transpose(1, 0, 2, 3))

    parents = [x, weight] + ([bias] if bias is not None else [])

    def backward(g: np.ndarray):
        g2 = g.transpose(1, 0, 2, 3).reshape(o, n * ho * wo)
        gw = (g2 @ cols2.T).reshape(weight.shape) if weight.requires_grad else None
        gb = g2.sum(axis=1) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (w2.T @ g2).reshape(c, kh, kw, n, ho, wo)
            gxp = np.zeros((c, n, hp, wp), dtype=xv.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i * dh:i * dh + ho, j * dw:j * dw + wo] += dcols[:, i, j]
            gx = np.ascontiguousarray(gxp[:, :, pt:pt + h, pl:pl + w].transpose(1, 0, 2, 3))
        grads = [gx, gw]
        if bias is not None:
            grads.append(gb)
        return grads

    return _result(out, parents, backward)


def maxpool2x2_ceil(x: Tensor) -> Tensor:
    """2x2/stride-2 max pooling, ceil mode (odd edges padded with -inf)."""
    x = as_tensor(x)
    if x.values.ndim != 4:
        raise ShapeError(f"maxpool expects NCHW input, got shape {x.shape}")
    n, c, h, w = x.shape
    if h < 1 or w < 1:
        raise ShapeError("maxpool needs H, W >= 1")
    h2, w2 = -(-h // 2), -(-w // 2)
    xv = x.values
    if h % 2 or w % 2:
        xp = np.full((n, c, 2 * h2, 2 * w2), -np.inf, dtype=xv.dtype)
        xp[:, :, :h, :w] = xv
    else:
        xp = xv
    blocks = xp.reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def backward(g: np.ndarray):
        gb = np.zeros((n, c, h2, w2, 4), dtype=xv.dtype)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gx = gb.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * h2, 2 * w2)
        return [np.ascontiguousarray(gx[:, :, :h, :w])]

    return _result(out, [x], backward)


# --------------------------------------------------------------------------- dense & pointwise


def dense(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map on the flattened trailing dims: ``x @ weight.T + bias``."""
    x, weight = as_tensor(x), as_tensor(weight)
    n = x.shape[0]
    xf = x.values.reshape(n, -1)
    out_dim, in_dim = weight.shape
    if xf.shape[1] != in_dim:
        raise ShapeError(f"dense expects {in_dim} input features, got {xf.shape[1]}")
    out = xf @ weight.values.T
    if bias is not None:
        out = out + bias.values
    parents = [x, weight] + ([bias] if bias is not None else [])

    def backward(g: np.ndarray):
        gx = (g @ weight.values).reshape(x.shape) if x.requires_grad else None
        gw = g.T @ xf if weight.requires_grad else None
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    return _result(out, parents, backward)


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.values > 0
    return _result(x.values * mask, [x], lambda g: [g * mask])


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if not -x.values.ndim <= axis < x.values.ndim:
        raise ValueError(f"softmax axis {axis} out of range for shape {x.shape}")
    z = x.values - x.values.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def backward(g: np.ndarray):
        return [p * (g - (g * p).sum(axis=axis, keepdims=True))]

    return _result(p, [x], backward)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    orig = x.shape
    return _result(x.values.reshape(shape), [x], lambda g: [g.reshape(orig)])


def mean(x: Tensor, axis: int) -> Tensor:
    x = as_tensor(x)
    size = x.shape[axis]
    out = x.values.mean(axis=axis)

    def backward(g: np.ndarray):
        return [np.repeat(np.expand_dims(g, axis), size, axis=axis) / size]

    return _result(out, [x], backward)


def _check_labels(labels, n: int, classes: int) -> np.ndarray:
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if y.shape[0] != n:
        raise ShapeError(f"got {y.shape[0]} labels for a batch of {n}")
    if y.size and (y.min() < 0 or y.max() >= classes):
        raise ValueError(f"label out of range [0, {classes})")
    return y


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy over the batch, fused from logits."""
    logits = as_tensor(logits)
    n, c = logits.shape
    y = _check_labels(labels, n, c)
    z = logits.values - logits.values.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    loss = -logp[np.arange(n), y].mean()

    def backward(g: np.ndarray):
        p = np.exp(logp)
        p[np.arange(n), y] -= 1.0
        return [p * (g / n)]

    return _result(np.asarray(loss, dtype=logits.dtype), [logits], backward)


def nll_of_probs(probs: Tensor, labels, floor: float = 1e-12) -> Tensor:
    """Mean negative log-likelihood of already-normalized class probabilities."""
    probs = as_tensor(probs)
    n, c = probs.shape
    y = _check_labels(labels, n, c)
    picked = np.maximum(probs.values[np.arange(n), y], floor)
    loss = -np.log(picked).mean()

    def backward(g: np.ndarray):
        gp = np.zeros_like(probs.values)
        gp[np.arange(n), y] = -(g / n) / picked
        return [gp]

    return _result(np.asarray(loss, dtype=probs.dtype), [probs], backward)


def parameters_checksum(params: Iterable[Tensor]) -> str:
    import hashlib

    h = hashlib.sha256()
    for p in params:
        h.update(np.ascontiguousarray(p.values).tobytes())
    return h.hexdigest()
