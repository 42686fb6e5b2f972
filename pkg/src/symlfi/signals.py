"""Damped-oscillator (SHO) and sine-gaussian (SG) time series with time shifts."""

from __future__ import annotations

import enum
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

DATASET_FORMAT_VERSION = 1


class ConfigError(ValueError):
    """Inconsistent generation settings."""


class SignalKind(str, enum.Enum):
    SHO = "sho"
    SG = "sg"

    @property
    def param_names(self) -> tuple[str, str]:
        return ("omega0", "beta") if self is SignalKind.SHO else ("f0", "tau")


def _check_params(kind: SignalKind, a, b) -> None:
    a = np.asarray(a)
    b = np.asarray(b)
    if kind is SignalKind.SHO:
        if np.any(a <= 0):
            raise ValueError("omega0 must be positive")
        if np.any((b < 0) | (b >= 1)):
            raise ValueError("beta must lie in [0, 1)")
    else:
        if np.any(a <= 0):
            raise ValueError("f0 must be positive")
        if np.any(b <= 0):
            raise ValueError("tau must be positive")


@dataclass(frozen=True)
class SignalParams:
    kind: SignalKind
    values: tuple[float, float]

    def __post_init__(self):
        object.__setattr__(self, "kind", SignalKind(self.kind))
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        _check_params(self.kind, *self.values)

    @classmethod
    def sho(cls, omega0: float, beta: float) -> "SignalParams":
        return cls(SignalKind.SHO, (omega0, beta))

    @classmethod
    def sg(cls, f0: float, tau: float) -> "SignalParams":
        return cls(SignalKind.SG, (f0, tau))

    def __getattr__(self, name):
        kind = object.__getattribute__(self, "kind")
        if name in kind.param_names:
            return self.values[kind.param_names.index(name)]
        raise AttributeError(name)

    def as_array(self) -> np.ndarray:
        return np.array(self.values)


@dataclass(frozen=True)
class TimeGrid:
    n_samples: int
    dt: float
    t_start: float = 0.0

    def __post_init__(self):
        if self.n_samples < 2:
            raise ValueError("a time grid needs at least two samples")
        if not self.dt > 0:
            raise ValueError("dt must be positive")

    @property
    def duration(self) -> float:
        return self.n_samples * self.dt

    @property
    def times(self) -> np.ndarray:
        return self.t_start + np.arange(self.n_samples) * self.dt

    def shifted(self, offset: float) -> "TimeGrid":
        """Same sampling with every time reduced by ``offset``."""
        return TimeGrid(self.n_samples, self.dt, self.t_start - offset)

    def local_times(self, offsets) -> np.ndarray:
        """Times measured from per-row reference ``offsets``; shape (len(offsets), n)."""
        offsets = np.atleast_1d(np.asarray(offsets, dtype=np.float64))
        steps = offsets / self.dt
        idx = np.arange(self.n_samples)
        if np.allclose(steps, np.round(steps), rtol=0, atol=1e-9):
            # on-grid shifts: integer index arithmetic keeps shifted samples bit-identical
            return self.t_start + (idx[None, :] - np.round(steps)[:, None]) * self.dt
        return (self.t_start - offsets)[:, None] + idx * self.dt


@dataclass(frozen=True)
class TimeSeries:
    grid: TimeGrid
    values: np.ndarray
    sigma: float = 0.0

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.shape != (self.grid.n_samples,):
            raise ValueError(f"expected {self.grid.n_samples} values, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("time series values must be finite")
        object.__setattr__(self, "values", values)


@dataclass(frozen=True)
class ParamPrior:
    kind: SignalKind
    lower: tuple[float, float]
    upper: tuple[float, float]

    def __post_init__(self):
        object.__setattr__(self, "kind", SignalKind(self.kind))
        object.__setattr__(self, "lower", tuple(float(v) for v in self.lower))
        object.__setattr__(self, "upper", tuple(float(v) for v in self.upper))
        if any(lo > hi for lo, hi in zip(self.lower, self.upper)):
            raise ValueError("prior lower bound above upper bound")
        _check_params(self.kind, *zip(self.lower, self.upper))

    @property
    def bounds(self) -> np.ndarray:
        return np.array([self.lower, self.upper]).T

    def contains(self, theta) -> np.ndarray:
        theta = np.asarray(theta)
        return np.all((theta >= self.lower) & (theta <= self.upper), axis=-1)


@dataclass(frozen=True)
class ShiftPrior:
    shift_max: float = 0.0

    def __post_init__(self):
        if self.shift_max < 0:
            raise ValueError("shift_max must be non-negative")

    def n_steps(self, grid: TimeGrid) -> int:
        """Largest admissible shift in whole samples."""
        if self.shift_max >= grid.duration:
            raise ConfigError(
                f"shift_max {self.shift_max} must be shorter than the grid duration {grid.duration}"
            )
        return int(math.floor(self.shift_max / grid.dt + 1e-9))


def default_grid(kind: SignalKind | str) -> TimeGrid:
    if SignalKind(kind) is SignalKind.SHO:
        return TimeGrid(512, 0.05, 0.0)
    return TimeGrid(512, 0.005, -1.28)


def default_prior(kind: SignalKind | str) -> ParamPrior:
    if SignalKind(kind) is SignalKind.SHO:
        return ParamPrior(SignalKind.SHO, (0.5, 0.05), (3.0, 0.9))
    return ParamPrior(SignalKind.SG, (0.2, 0.1), (1.5, 1.0))


def default_shift_prior(grid: TimeGrid) -> ShiftPrior:
    return ShiftPrior(0.25 * grid.duration)


# waveforms -----------------------------------------------------------------

def sho_values(omega0, beta, t) -> np.ndarray:
    """exp(-beta*omega0*t) * cos(omega0*t*sqrt(1-beta^2)), zero for t < 0."""
    omega0 = np.asarray(omega0, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    tp = np.maximum(t, 0.0)
    y = np.exp(-beta * omega0 * tp) * np.cos(omega0 * tp * np.sqrt(1.0 - beta * beta))
    return np.where(t < 0, 0.0, y)


def sg_values(f0, tau, t) -> np.ndarray:
    """exp(-t^2/tau^2) * sin(2*pi*f0*t)."""
    t = np.asarray(t, dtype=np.float64)
    tau = np.asarray(tau, dtype=np.float64)
    return np.exp(-(t * t) / (tau * tau)) * np.sin(2.0 * np.pi * np.asarray(f0) * t)


def signal_values(kind: SignalKind, a, b, t) -> np.ndarray:
    if SignalKind(kind) is SignalKind.SHO:
        return sho_values(a, b, t)
    return sg_values(a, b, t)


def sho_waveform(params: SignalParams, grid: TimeGrid, t_shift: float = 0.0) -> TimeSeries:
    if params.kind is not SignalKind.SHO:
        raise ValueError("sho_waveform needs SHO parameters")
    t = grid.local_times([t_shift])[0]
    return TimeSeries(grid, sho_values(params.omega0, params.beta, t))


def sg_waveform(params: SignalParams, grid: TimeGrid, t_center: float = 0.0) -> TimeSeries:
    if params.kind is not SignalKind.SG:
        raise ValueError("sg_waveform needs SG parameters")
    t = grid.local_times([t_center])[0]
    return TimeSeries(grid, sg_values(params.f0, params.tau, t))


def waveform(params: SignalParams, grid: TimeGrid, shift: float = 0.0) -> TimeSeries:
    if params.kind is SignalKind.SHO:
        return sho_waveform(params, grid, shift)
    return sg_waveform(params, grid, shift)


def add_white_noise(ts: TimeSeries, sigma: float, rng: np.random.Generator) -> TimeSeries:
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0:
        return TimeSeries(ts.grid, ts.values.copy(), 0.0)
    return TimeSeries(ts.grid, ts.values + rng.normal(0.0, sigma, ts.grid.n_samples), sigma)


# randomness ----------------------------------------------------------------

def record_rng(seed: int, index: int, view: int) -> np.random.Generator:
    """Counter-based stream keyed by (seed, record index, view index)."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(index, view))))


def sample_prior(prior: ParamPrior, rng: np.random.Generator) -> SignalParams:
    draw = rng.uniform(prior.lower, prior.upper)
    return SignalParams(prior.kind, tuple(draw))


# datasets ------------------------------------------------------------------

@dataclass(frozen=True)
class Record:
    params: SignalParams
    shift: float
    data: TimeSeries
    data_aug: TimeSeries | None


@dataclass
class Dataset:
    """Simulated records stored column-wise.

    ``shifts`` is the time shift of ``data`` for ordinary datasets and of
    ``data_aug`` for SSL pair datasets, whose ``data`` sits at shift 0.
    """

    kind: SignalKind
    grid: TimeGrid
    params: np.ndarray
    shifts: np.ndarray
    data: np.ndarray
    data_aug: np.ndarray | None = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.kind = SignalKind(self.kind)
        n = len(self.params)
        if self.params.shape != (n, 2) or self.shifts.shape != (n,):
            raise ValueError("params must be (n, 2) and shifts (n,)")
        if self.data.shape != (n, self.grid.n_samples):
            raise ValueError("data must be (n, n_samples)")
        if self.data_aug is not None and self.data_aug.shape != self.data.shape:
            raise ValueError("data_aug must match data")

    def __len__(self) -> int:
        return len(self.params)

    @property
    def ssl_pairs(self) -> bool:
        return self.data_aug is not None

    @property
    def sigma(self) -> float:
        return float(self.provenance.get("sigma", 0.0))

    def record(self, i: int) -> Record:
        aug = None if self.data_aug is None else TimeSeries(self.grid, self.data_aug[i], self.sigma)
        return Record(
            SignalParams(self.kind, tuple(self.params[i])),
            float(self.shifts[i]),
            TimeSeries(self.grid, self.data[i], self.sigma),
            aug,
        )

    def __iter__(self) -> Iterator[Record]:
        return (self.record(i) for i in range(len(self)))


def generate_dataset(
    kind: SignalKind | str,
    prior: ParamPrior,
    shift_prior: ShiftPrior,
    grid: TimeGrid,
    sigma: float,
    n: int,
    seed: int,
    ssl_pairs: bool = False,
    start: int = 0,
) -> Dataset:
    """Simulate ``n`` records; record ``i`` uses streams keyed by ``start + i``.

    Stream view 0 draws parameters then the integer shift, view 1 the noise
    of ``data`` and view 2 the noise of ``data_aug``.
    """
    kind = SignalKind(kind)
    if n < 1:
        raise ConfigError("n must be at least 1")
    if prior.kind is not kind:
        raise ConfigError(f"prior is for {prior.kind.value}, dataset is {kind.value}")
    if sigma < 0:
        raise ConfigError("sigma must be non-negative")
    max_steps = shift_prior.n_steps(grid)

    params = np.empty((n, 2))
    steps = np.empty(n, dtype=np.int64)
    for i in range(n):
        rng = record_rng(seed, start + i, 0)
        params[i] = rng.uniform(prior.lower, prior.upper)
        steps[i] = rng.integers(0, max_steps + 1)
    shifts = steps * grid.dt

    def noisy(offsets, view):
        clean = signal_values(kind, params[:, :1], params[:, 1:], grid.local_times(offsets))
        if sigma > 0:
            for i in range(n):
                clean[i] += record_rng(seed, start + i, view).normal(0.0, sigma, grid.n_samples)
        return clean

    if ssl_pairs:
        data = noisy(np.zeros(n), 1)
        data_aug = noisy(shifts, 2)
    else:
        data = noisy(shifts, 1)
        data_aug = None
    provenance = {
        "seed": int(seed),
        "start": int(start),
        "sigma": float(sigma),
        "prior": {"lower": list(prior.lower), "upper": list(prior.upper)},
        "shift_prior": {"shift_max": shift_prior.shift_max},
        "grid": asdict(grid),
    }
    return Dataset(kind, grid, params, shifts, data, data_aug, provenance)


def save_dataset(path, ds: Dataset) -> None:
    """One JSON header line, then per record little-endian float64
    [param_1, param_2, shift, values(n_samples), aug values(n_samples) if ssl_pairs]."""
    header = {
        "format_version": DATASET_FORMAT_VERSION,
        "kind": ds.kind.value,
        "n": len(ds),
        "ssl_pairs": ds.ssl_pairs,
        "grid": asdict(ds.grid),
        "provenance": ds.provenance,
        "record_layout": ["param_1", "param_2", "shift", "values"] + (["aug_values"] if ds.ssl_pairs else []),
    }
    blocks = [ds.params, ds.shifts[:, None], ds.data]
    if ds.ssl_pairs:
        blocks.append(ds.data_aug)
    body = np.ascontiguousarray(np.hstack(blocks), dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(body.tobytes())


def read_header(path) -> dict:
    with open(path, "rb") as fh:
        return json.loads(fh.readline())


def load_dataset(path) -> Dataset:
    raw = Path(path).read_bytes()
    head, _, blob = raw.partition(b"\n")
    header = json.loads(head)
    if header.get("format_version") != DATASET_FORMAT_VERSION:
        raise ValueError(f"unsupported dataset version {header.get('format_version')}")
    grid = TimeGrid(**header["grid"])
    n, m = header["n"], grid.n_samples
    width = 3 + m * (2 if header["ssl_pairs"] else 1)
    body = np.frombuffer(blob, dtype="<f8")
    if body.size != n * width:
        raise ValueError("dataset body length does not match header")
    body = body.reshape(n, width).astype(np.float64)
    aug = body[:, 3 + m:].copy() if header["ssl_pairs"] else None
    return Dataset(
        header["kind"], grid, body[:, :2].copy(), body[:, 2].copy(), body[:, 3:3 + m].copy(),
        aug, header["provenance"],
    )
