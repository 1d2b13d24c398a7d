"""Parameter containers for the layer set in :mod:`egofusion.tensor`."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from egofusion import tensor as T
from egofusion.tensor import Parameter, Tensor


def he_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, dtype=T.DEFAULT_DTYPE) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Module:
    """Walks attributes in assignment order to find parameters and submodules."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.values.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def freeze(self) -> None:
        for p in self.parameters():
            p.requires_grad = False
            p.grad = None

    def unfreeze(self) -> None:
        for p in self.parameters():
            p.requires_grad = True

    @property
    def frozen(self) -> bool:
        return not any(p.requires_grad for p in self.parameters())

    def astype(self, dtype) -> "Module":
        """Cast all parameters in place (float64 for gradient checks)."""
        for p in self.parameters():
            p.values = p.values.astype(dtype)
            p.grad = None
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.values.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        unexpected = set(state) - set(own)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise T.ShapeError(f"{name}: checkpoint shape {arr.shape} != parameter shape {p.shape}")
            p.values = arr.astype(p.values.dtype).copy()


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel: tuple[int, int],
                 dilation: tuple[int, int] = (1, 1), padding: str = "same",
                 rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        kh, kw = kernel
        self.kernel = (kh, kw)
        self.dilation = tuple(dilation)
        self.padding = padding
        fan_in = in_channels * kh * kw
        self.weight = Parameter(he_uniform(rng, (out_channels, in_channels, kh, kw), fan_in))
        self.bias = Parameter(np.zeros(out_channels, dtype=T.DEFAULT_DTYPE))

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d_dilated(x, self.weight, self.bias, self.dilation, self.padding)


class Dense(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = Parameter(he_uniform(rng, (out_features, in_features), in_features))
        self.bias = Parameter(np.zeros(out_features, dtype=T.DEFAULT_DTYPE))

    def __call__(self, x: Tensor) -> Tensor:
        return T.dense(x, self.weight, self.bias)
