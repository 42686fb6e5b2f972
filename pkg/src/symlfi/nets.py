"""Layers built on diffcore: dense, 1-D conv, residual blocks.

Each layer owns parameter names inside a shared ParamStore, and reports its
exact parameter and multiply-accumulate counts.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc


@dataclass(frozen=True)
class Cost:
    params: int = 0
    macs: int = 0

    def __add__(self, other: "Cost") -> "Cost":
        return Cost(self.params + other.params, self.macs + other.macs)


class Dense:
    """y = x @ (W * mask) + b. Masked-out weights are not counted as parameters."""

    def __init__(self, name: str, n_in: int, n_out: int, mask: np.ndarray | None = None,
                 bias: bool = True):
        self.name, self.n_in, self.n_out = name, n_in, n_out
        self.mask = None if mask is None else np.asarray(mask, dtype=np.float64)
        if self.mask is not None and self.mask.shape != (n_in, n_out):
            raise dc.ShapeError(f"{name}: mask shape {self.mask.shape} != {(n_in, n_out)}")
        self.bias = bias

    @property
    def param_names(self) -> list[str]:
        return [f"{self.name}.W"] + ([f"{self.name}.b"] if self.bias else [])

    def init(self, store: dc.ParamStore, rng: np.random.Generator, gain: float = 2.0,
             zero: bool = False) -> None:
        if zero:
            W = np.zeros((self.n_in, self.n_out))
        else:
            fan_in = self.n_in if self.mask is None else max(1.0, self.mask.sum(axis=0).mean())
            W = rng.normal(0.0, np.sqrt(gain / fan_in), (self.n_in, self.n_out))
        if self.mask is not None:
            W = W * self.mask
        store.add(f"{self.name}.W", W)
        if self.bias:
            store.add(f"{self.name}.b", np.zeros(self.n_out))

    def __call__(self, p: dict, x: dc.Tensor) -> dc.Tensor:
        W = p[f"{self.name}.W"]
        if self.mask is not None:
            W = dc.mul(W, self.mask)
        return dc.dense(x, W, p[f"{self.name}.b"] if self.bias else None)

    def connections(self) -> int:
        return int(self.n_in * self.n_out if self.mask is None else self.mask.sum())

    def cost(self, rows: int) -> Cost:
        return Cost(self.connections() + (self.n_out if self.bias else 0), rows * self.connections())


class Conv1d:
    def __init__(self, name: str, c_in: int, c_out: int, kernel: int, stride: int = 1,
                 padding: int | None = None):
        self.name, self.c_in, self.c_out = name, c_in, c_out
        self.kernel, self.stride = kernel, stride
        self.padding = kernel // 2 if padding is None else padding

    @property
    def param_names(self) -> list[str]:
        return [f"{self.name}.W", f"{self.name}.b"]

    def init(self, store: dc.ParamStore, rng: np.random.Generator, gain: float = 2.0) -> None:
        fan_in = self.kernel * self.c_in
        store.add(f"{self.name}.W", rng.normal(0.0, np.sqrt(gain / fan_in),
                                               (self.kernel, self.c_in, self.c_out)))
        store.add(f"{self.name}.b", np.zeros(self.c_out))

    def out_length(self, length: int) -> int:
        return dc.conv_out_length(length, self.kernel, self.stride, self.padding)

    def __call__(self, p: dict, x: dc.Tensor) -> dc.Tensor:
        return dc.conv1d(x, p[f"{self.name}.W"], p[f"{self.name}.b"], self.stride, self.padding)

    def cost(self, batch: int, length: int) -> Cost:
        n_w = self.kernel * self.c_in * self.c_out
        return Cost(n_w + self.c_out, batch * self.out_length(length) * n_w)


class ResBlock:
    """relu(conv_b(relu(conv_a(x))) + skip(x)); skip is a strided 1x1 conv when shapes change."""

    def __init__(self, name: str, c_in: int, c_out: int, kernel: int, stride: int):
        self.conv_a = Conv1d(f"{name}.a", c_in, c_out, kernel, stride)
        self.conv_b = Conv1d(f"{name}.b", c_out, c_out, kernel, 1)
        self.skip = None
        if stride != 1 or c_in != c_out:
            self.skip = Conv1d(f"{name}.skip", c_in, c_out, 1, stride, padding=0)

    @property
    def layers(self) -> list[Conv1d]:
        return [self.conv_a, self.conv_b] + ([self.skip] if self.skip else [])

    def init(self, store: dc.ParamStore, rng: np.random.Generator) -> None:
        self.conv_a.init(store, rng)
        self.conv_b.init(store, rng, gain=1.0)
        if self.skip:
            self.skip.init(store, rng, gain=1.0)

    def out_length(self, length: int) -> int:
        return self.conv_a.out_length(length)

    def __call__(self, p: dict, x: dc.Tensor) -> dc.Tensor:
        h = self.conv_b(p, dc.relu(self.conv_a(p, x)))
        return dc.relu(dc.add(h, self.skip(p, x) if self.skip else x))

    def cost(self, batch: int, length: int) -> Cost:
        mid = self.conv_a.out_length(length)
        total = self.conv_a.cost(batch, length) + self.conv_b.cost(batch, mid)
        if self.skip:
            total = total + self.skip.cost(batch, length)
        return total


class MLP:
    """Dense layers with relu between them (none after the last)."""

    def __init__(self, name: str, widths: list[int]):
        self.layers = [Dense(f"{name}.{i}", a, b) for i, (a, b) in enumerate(zip(widths, widths[1:]))]

    def init(self, store: dc.ParamStore, rng: np.random.Generator, last_gain: float = 1.0) -> None:
        for i, layer in enumerate(self.layers):
            layer.init(store, rng, gain=last_gain if i == len(self.layers) - 1 else 2.0)

    def __call__(self, p: dict, x: dc.Tensor) -> dc.Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(p, x)
            if i < len(self.layers) - 1:
                x = dc.relu(x)
        return x

    def cost(self, rows: int) -> Cost:
        total = Cost()
        for layer in self.layers:
            total = total + layer.cost(rows)
        return total

    @property
    def param_names(self) -> list[str]:
        return [n for layer in self.layers for n in layer.param_names]
