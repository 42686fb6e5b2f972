"""Minimal reverse-mode autodiff over float64 numpy arrays.

Operations build `Tensor` nodes. While a `Tape` is active, every node that
depends on a trainable leaf is recorded together with a closure computing the
vector-Jacobian product; `Tape.backward` replays them in reverse creation
order, which is a valid topological order. Outside a tape the same functions
are plain numpy forward passes.

Layout conventions: dense inputs are (..., features); 1-D convolutions use
channels-last arrays of shape (batch, length, channels).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

FORMAT_VERSION = 1


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)


class Tape:
    """Records differentiable nodes created inside a ``with`` block."""

    _stack: list["Tape"] = []

    def __init__(self):
        self._nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._done = False

    def __enter__(self) -> "Tape":
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        Tape._stack.remove(self)

    @classmethod
    def active(cls) -> "Tape | None":
        return cls._stack[-1] if cls._stack else None

    def __len__(self) -> int:
        return len(self._nodes)

    def backward(self, loss: Tensor, params: dict[str, Tensor] | None = None) -> dict:
        """Gradient of a scalar ``loss``.

        With ``params`` the result maps each trainable name to its gradient
        (zeros when the loss does not depend on it); frozen leaves are absent.
        Without it the result is keyed by ``id`` of every reached tensor.
        """
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if self._done:
            raise RuntimeError("tape already consumed by a backward pass")
        self._done = True
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for out, parents, vjp in reversed(self._nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for parent, pg in zip(parents, vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        if params is None:
            return grads
        return {
            name: grads.get(id(t), np.zeros_like(t.data))
            for name, t in params.items()
            if t.requires_grad
        }


def _node(data: np.ndarray, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError("non-finite value produced in forward pass")
    tape = Tape.active()
    track = tape is not None and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=track)
    if track:
        tape._nodes.append((out, tuple(parents), vjp))
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a = as_tensor(a)
    if np.isscalar(b):
        return _node(a.data + b, (a,), lambda g: (g,))
    b = as_tensor(b)
    _same_shape(a, b, "add")
    return _node(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    if np.isscalar(b):
        return _node(a.data - b, (a,), lambda g: (g,))
    b = as_tensor(b)
    _same_shape(a, b, "sub")
    return _node(a.data - b.data, (a, b), lambda g: (g, -g))


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    """Elementwise product with a tensor, a constant array of equal shape, or a scalar."""
    a = as_tensor(a)
    if np.isscalar(b):
        return _node(a.data * b, (a,), lambda g: (g * b,))
    if isinstance(b, np.ndarray):
        if b.shape != a.shape:
            raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
        return _node(a.data * b, (a,), lambda g: (g * b,))
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _node(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    if b.data.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"add_bias: bias {b.shape} does not match {x.shape}")
    axes = tuple(range(x.data.ndim - 1))
    return _node(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=axes)))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _node(y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _node(np.log(xd), (x,), lambda g: (g / xd,))


def sqrt(x: Tensor) -> Tensor:
    y = np.sqrt(x.data)
    return _node(y, (x,), lambda g: (g / (2.0 * y),))


def square(x: Tensor) -> Tensor:
    xd = x.data
    return _node(xd * xd, (x,), lambda g: (2.0 * g * xd,))


def relu(x: Tensor) -> Tensor:
    keep = x.data > 0
    return _node(np.where(keep, x.data, 0.0), (x,), lambda g: (g * keep,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _node(y, (x,), lambda g: (g * (1.0 - y * y),))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    inside = (x.data >= lo) & (x.data <= hi)
    return _node(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


def hinge(x: Tensor, level: float) -> Tensor:
    """max(0, level - x)."""
    active = x.data < level
    return _node(np.where(active, level - x.data, 0.0), (x,), lambda g: (-g * active,))


# reductions and reshaping --------------------------------------------------

def reduce_sum(x: Tensor, axis: int | None = None) -> Tensor:
    shape = x.shape
    if axis is None:
        return _node(np.sum(x.data), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))
    return _node(
        np.sum(x.data, axis=axis),
        (x,),
        lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),),
    )


def reduce_mean(x: Tensor, axis: int | None = None) -> Tensor:
    n = x.data.size if axis is None else x.shape[axis]
    return mul(reduce_sum(x, axis), 1.0 / n)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = x.shape
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError("transpose expects a matrix")
    return _node(x.data.T.copy(), (x,), lambda g: (g.T.copy(),))


def take(x: Tensor, index, axis: int = -1) -> Tensor:
    """Select entries along one axis with an integer array or slice."""
    axis = axis % x.data.ndim
    sl = [slice(None)] * x.data.ndim
    sl[axis] = index
    sl = tuple(sl)
    shape = x.shape

    def vjp(g):
        out = np.zeros(shape)
        if isinstance(index, slice):
            out[sl] = g
        else:
            np.add.at(out, sl, g)
        return (out,)

    return _node(x.data[sl].copy(), (x,), vjp)


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    data = np.concatenate([p.data for p in parts], axis=axis)
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]
    return _node(data, tuple(parts), lambda g: tuple(np.split(g, bounds, axis=axis)))


# linear algebra ------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _node(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def dense(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ W + b over the last axis of x."""
    if W.data.ndim != 2 or x.shape[-1] != W.shape[0]:
        raise ShapeError(f"dense: input {x.shape} does not match weights {W.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, W.shape[0])
    Wd = W.data
    y = x2 @ Wd
    if b is not None:
        if b.shape != (W.shape[1],):
            raise ShapeError(f"dense: bias {b.shape} does not match weights {W.shape}")
        y = y + b.data

    def vjp(g):
        g2 = g.reshape(-1, Wd.shape[1])
        gx = (g2 @ Wd.T).reshape(lead + (Wd.shape[0],))
        gW = x2.T @ g2
        return (gx, gW) if b is None else (gx, gW, g2.sum(axis=0))

    parents = (x, W) if b is None else (x, W, b)
    return _node(y.reshape(lead + (Wd.shape[1],)), parents, vjp)


def conv_out_length(length: int, kernel: int, stride: int, padding: int) -> int:
    return (length + 2 * padding - kernel) // stride + 1


def conv1d(x: Tensor, W: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of x (B, L, Cin) with kernels W (K, Cin, Cout)."""
    if x.data.ndim != 3 or W.data.ndim != 3 or x.shape[2] != W.shape[1]:
        raise ShapeError(f"conv1d: input {x.shape} does not match kernels {W.shape}")
    B, L, cin = x.shape
    K, _, cout = W.shape
    lout = conv_out_length(L, K, stride, padding)
    if lout < 1:
        raise ShapeError("conv1d: kernel larger than padded input")
    xp = np.pad(x.data, ((0, 0), (padding, padding), (0, 0))) if padding else x.data
    s0, s1, s2 = xp.strides
    win = np.lib.stride_tricks.as_strided(
        xp, shape=(B, lout, K, cin), strides=(s0, s1 * stride, s1, s2), writeable=False
    )
    cols = win.reshape(B * lout, K * cin)
    Wd = W.data.reshape(K * cin, cout)
    y = cols @ Wd
    if b is not None:
        y = y + b.data

    def vjp(g):
        g2 = g.reshape(B * lout, cout)
        gW = (cols.T @ g2).reshape(K, cin, cout)
        gcols = (g2 @ Wd.T).reshape(B, lout, K, cin)
        gxp = np.zeros(xp.shape)
        span = stride * (lout - 1) + 1
        for k in range(K):
            gxp[:, k:k + span:stride, :] += gcols[:, :, k, :]
        gx = gxp[:, padding:padding + L, :] if padding else gxp
        out = (gx, gW)
        return out if b is None else out + (g2.sum(axis=0),)

    parents = (x, W) if b is None else (x, W, b)
    return _node(y.reshape(B, lout, cout), parents, vjp)


# statistics ----------------------------------------------------------------

def batch_mean_var(x: Tensor) -> tuple[Tensor, Tensor]:
    """Per-column mean and unbiased variance over the batch axis of (n, d)."""
    n = x.shape[0]
    if n < 2:
        raise ShapeError("batch_mean_var needs at least two rows")
    mean = reduce_mean(x, axis=0)
    xd = x.data
    centered = xd - xd.mean(axis=0)
    var = (centered * centered).sum(axis=0) / (n - 1)
    return mean, _node(var, (x,), lambda g: (2.0 * centered * g / (n - 1),))


def mse(x: Tensor, y: Tensor) -> Tensor:
    _same_shape(x, y, "mse")
    return reduce_mean(square(sub(x, y)))


# parameters ----------------------------------------------------------------

class ParamStore:
    """Named float64 arrays with per-name frozen flags."""

    def __init__(self):
        self._values: dict[str, np.ndarray] = {}
        self._frozen: set[str] = set()

    def add(self, name: str, value, frozen: bool = False) -> None:
        if name in self._values:
            raise ValueError(f"duplicate parameter name {name!r}")
        arr = np.array(value, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"parameter {name!r} is not finite")
        self._values[name] = arr
        if frozen:
            self._frozen.add(name)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._values[name]

    def __setitem__(self, name: str, value) -> None:
        if name not in self._values:
            raise KeyError(name)
        value = np.asarray(value, dtype=np.float64)
        if value.shape != self._values[name].shape:
            raise ShapeError(f"{name}: shape {value.shape} != {self._values[name].shape}")
        self._values[name] = value

    def __contains__(self, name: str) -> bool:
        return name in self._values

    def __len__(self) -> int:
        return len(self._values)

    def names(self) -> list[str]:
        return list(self._values)

    def is_frozen(self, name: str) -> bool:
        return name in self._frozen

    def freeze(self, names: Iterable[str]) -> None:
        for n in names:
            if n not in self._values:
                raise KeyError(n)
            self._frozen.add(n)

    def unfreeze(self, names: Iterable[str]) -> None:
        for n in names:
            self._frozen.discard(n)

    def trainable_names(self) -> list[str]:
        return [n for n in self._values if n not in self._frozen]

    def size(self, trainable_only: bool = False) -> int:
        return sum(
            v.size for n, v in self._values.items() if not (trainable_only and n in self._frozen)
        )

    def tensors(self, names: Iterable[str] | None = None) -> dict[str, Tensor]:
        """Leaf tensors for a forward pass; frozen leaves do not track gradients."""
        names = self._values if names is None else names
        return {
            n: Tensor(self._values[n], requires_grad=n not in self._frozen, name=n) for n in names
        }

    def copy(self) -> "ParamStore":
        other = ParamStore()
        other._values = {n: v.copy() for n, v in self._values.items()}
        other._frozen = set(self._frozen)
        return other

    def update(self, other: "ParamStore") -> None:
        """Add every parameter of ``other`` (names must not clash)."""
        for n in other.names():
            self.add(n, other[n], frozen=other.is_frozen(n))

    def state(self) -> dict[str, np.ndarray]:
        return {n: v.copy() for n, v in self._values.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for n, v in state.items():
            self[n] = v


# optimizers ----------------------------------------------------------------

@dataclass
class OptimizerConfig:
    kind: str = "adam"
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.kind!r}")
        self.betas = tuple(self.betas)


@dataclass
class Optimizer:
    store: ParamStore
    config: OptimizerConfig = field(default_factory=OptimizerConfig)
    step_count: int = 0
    _m: dict = field(default_factory=dict, repr=False)
    _v: dict = field(default_factory=dict, repr=False)

    def step(self, grads: dict[str, np.ndarray]) -> None:
        for name in grads:
            if name not in self.store:
                raise KeyError(f"gradient for unknown parameter {name!r}")
            if self.store.is_frozen(name):
                raise ValueError(f"gradient supplied for frozen parameter {name!r}")
        self.step_count += 1
        cfg = self.config
        for name in sorted(grads):
            g = grads[name]
            p = self.store[name]
            if cfg.kind == "sgd":
                self.store[name] = p - cfg.lr * g
                continue
            b1, b2 = cfg.betas
            m = self._m.get(name)
            v = self._v.get(name)
            m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
            v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
            self._m[name], self._v[name] = m, v
            mhat = m / (1 - b1 ** self.step_count)
            vhat = v / (1 - b2 ** self.step_count)
            self.store[name] = p - cfg.lr * mhat / (np.sqrt(vhat) + cfg.eps)


def optimizer_step(store: ParamStore, grads: dict[str, np.ndarray], config: OptimizerConfig,
                   state: Optimizer | None = None) -> Optimizer:
    """Apply one update in place; pass the returned optimizer back in to keep Adam moments."""
    opt = state if state is not None else Optimizer(store, config)
    opt.step(grads)
    return opt


# checking ------------------------------------------------------------------

def gradcheck(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], h: float = 1e-5,
              seed: int = 0) -> float:
    """Worst relative error between reverse-mode and central-difference gradients.

    Non-scalar outputs are contracted with a fixed random array so every
    output component contributes.
    """
    inputs = [np.array(x, dtype=np.float64) for x in inputs]
    rng = np.random.default_rng(seed)
    probe = None

    def scalar(arrays):
        nonlocal probe
        leaves = [Tensor(a, requires_grad=True) for a in arrays]
        out = fn(*leaves)
        if probe is None:
            probe = rng.standard_normal(out.shape)
        return leaves, reduce_sum(mul(out, probe)) if out.data.size > 1 else reshape(out, ())

    with Tape() as tape:
        leaves, loss = scalar(inputs)
        grads = tape.backward(loss)
    worst = 0.0
    for i, x in enumerate(inputs):
        analytic = grads.get(id(leaves[i]), np.zeros_like(x))
        numeric = np.zeros_like(x)
        flat = x.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            _, up = scalar(inputs)
            flat[j] = orig - h
            _, down = scalar(inputs)
            flat[j] = orig
            numeric.reshape(-1)[j] = (up.data - down.data) / (2 * h)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
        worst = max(worst, float(np.max(np.abs(analytic - numeric) / denom)))
    return worst


# checkpoints ---------------------------------------------------------------

def save_checkpoint(path, store: ParamStore, meta: dict | None = None) -> None:
    """JSON manifest line followed by little-endian float64 blobs in manifest order."""
    manifest = {
        "format_version": FORMAT_VERSION,
        "meta": meta or {},
        "tensors": [
            {"name": n, "shape": list(store[n].shape), "frozen": store.is_frozen(n)}
            for n in store.names()
        ],
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(manifest, sort_keys=True).encode() + b"\n")
        for n in store.names():
            fh.write(np.ascontiguousarray(store[n], dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[ParamStore, dict]:
    raw = Path(path).read_bytes()
    head, _, blob = raw.partition(b"\n")
    manifest = json.loads(head)
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {manifest.get('format_version')}")
    store = ParamStore()
    offset = 0
    for entry in manifest["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).reshape(entry["shape"])
        offset += 8 * count
        store.add(entry["name"], arr.astype(np.float64), frozen=entry["frozen"])
    if offset != len(blob):
        raise ValueError("checkpoint blob length does not match manifest")
    return store, manifest["meta"]
