"""Reference posteriors and calibration statistics.

The grid oracle evaluates the white-noise Gaussian likelihood exhaustively on a
2-D parameter grid, optionally marginalizing an integer sample shift.  The CRB
widths are the closed-form diagonal Fisher bounds for both signal models.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats
from scipy.special import logsumexp

from .signals import (ParamPrior, ShiftPrior, SignalKind, SignalParams, TimeGrid,
                      TimeSeries, signal_values)

SHIFT_MODES = ("known", "marginalize")


# grid oracle ---------------------------------------------------------------

@dataclass
class GridPosterior:
    """Normalized posterior mass on cell centers.  mass[i, j] pairs axes[0][i] with axes[1][j]."""

    kind: SignalKind
    axes: tuple[np.ndarray, np.ndarray]
    mass: np.ndarray
    log_like_max: float = 0.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.kind = SignalKind(self.kind)
        if self.mass.shape != (len(self.axes[0]), len(self.axes[1])):
            raise ValueError("mass shape does not match the axes")

    @classmethod
    def from_log_likelihood(cls, kind, axes, log_like: np.ndarray, meta: dict | None = None) -> "GridPosterior":
        """Max-subtract, exponentiate and normalize a log-likelihood grid (flat prior)."""
        top = float(np.max(log_like))
        w = np.exp(log_like - top)
        return cls(kind, axes, w / w.sum(), top, meta or {})

    @property
    def resolution(self) -> tuple[int, int]:
        return self.mass.shape

    def marginal(self, axis: int) -> np.ndarray:
        m = self.mass.sum(axis=1 - axis)
        return m / m.sum()

    def mean(self) -> np.ndarray:
        return np.array([self.marginal(i) @ self.axes[i] for i in range(2)])

    def std(self) -> np.ndarray:
        mu = self.mean()
        return np.array([math.sqrt(self.marginal(i) @ (self.axes[i] - mu[i]) ** 2) for i in range(2)])

    def argmax(self) -> np.ndarray:
        i, j = np.unravel_index(np.argmax(self.mass), self.mass.shape)
        return np.array([self.axes[0][i], self.axes[1][j]])

    def cell_of(self, theta) -> tuple[int, int]:
        """Index of the cell whose center is nearest to theta."""
        return tuple(int(np.argmin(np.abs(self.axes[k] - theta[k]))) for k in range(2))

    def cell_widths(self) -> np.ndarray:
        return np.array([ax[1] - ax[0] if len(ax) > 1 else 0.0 for ax in self.axes])


def _centers(lo: float, hi: float, n: int) -> np.ndarray:
    step = (hi - lo) / n
    return lo + step * (np.arange(n) + 0.5)


def _log_likelihood_grid(values, kind, grid: TimeGrid, sigma: float, a_axis, b_axis,
                         shift_mode: str, n_shift: int, known_shift: float) -> np.ndarray:
    """log L up to the data-only constant, shape (len(a_axis), len(b_axis))."""
    n = grid.n_samples
    out = np.empty((len(a_axis), len(b_axis)))
    inv2s2 = 0.5 / (sigma * sigma)
    dd = float(values @ values)
    if shift_mode == "known":
        t = grid.local_times([known_shift])[0]
        for i, a in enumerate(a_axis):
            g = signal_values(kind, a, b_axis[:, None], t[None, :])
            r = values[None, :] - g
            out[i] = -inv2s2 * np.einsum("ij,ij->i", r, r)
        return out

    # template on extended indices j in [-K, N); shift k uses g_ext[j] for sample j + k
    K = n_shift
    t_ext = grid.t_start + np.arange(-K, n) * grid.dt
    padded = np.concatenate([values, np.zeros(K)])
    # D[j + K, k] = d[j + k] for 0 <= j + k < N, else 0
    D = np.stack([np.concatenate([np.zeros(K - k), padded[: n + k]]) for k in range(K + 1)], axis=1)
    log_k = math.log(K + 1)
    for i, a in enumerate(a_axis):
        g = signal_values(kind, a, b_axis[:, None], t_ext[None, :])
        cross = g @ D
        c2 = np.concatenate([np.zeros((len(b_axis), 1)), np.cumsum(g * g, axis=1)], axis=1)
        # energy of the template samples that land inside the window: j in [-k, N-k)
        k = np.arange(K + 1)
        energy = c2[:, K - k + n] - c2[:, K - k]
        ll = -inv2s2 * (dd - 2.0 * cross + energy)
        out[i] = logsumexp(ll, axis=1) - log_k
    return out


def grid_posterior(data, kind, prior: ParamPrior, sigma: float, grid: TimeGrid | None = None,
                   resolution: int = 256, shift_handling: str = "marginalize",
                   shift_prior: ShiftPrior | None = None, known_shift: float = 0.0,
                   refine: int = 1, tail: float = 40.0, coarse: int = 64) -> GridPosterior:
    """Flat-prior posterior over the prior box on a resolution x resolution grid.

    With refine > 0, a coarse pass locates the region whose log mass is within
    `tail` of the maximum and the final grid is laid over that region only.
    This keeps narrow posteriors well resolved.
    """
    kind = SignalKind(kind)
    if isinstance(data, TimeSeries):
        grid = data.grid if grid is None else grid
        values = data.values
    else:
        values = np.asarray(data, dtype=np.float64)
    if grid is None:
        raise ValueError("a TimeGrid is required with raw arrays")
    if values.shape != (grid.n_samples,):
        raise ValueError(f"data length {values.shape} does not match the grid ({grid.n_samples})")
    if not sigma > 0:
        raise ValueError("sigma must be positive for the likelihood")
    if resolution < 64:
        raise ValueError("resolution must be at least 64 per axis")
    if shift_handling not in SHIFT_MODES:
        raise ValueError(f"shift_handling must be one of {SHIFT_MODES}")
    n_shift = 0
    if shift_handling == "marginalize":
        n_shift = (shift_prior or ShiftPrior(0.0)).n_steps(grid)

    lo = np.array(prior.lower, dtype=np.float64)
    hi = np.array(prior.upper, dtype=np.float64)
    for level in range(refine + 1):
        n = resolution if level == refine else min(coarse, resolution)
        a_axis, b_axis = _centers(lo[0], hi[0], n), _centers(lo[1], hi[1], n)
        ll = _log_likelihood_grid(values, kind, grid, sigma, a_axis, b_axis,
                                  shift_handling, n_shift, known_shift)
        if level == refine:
            break
        keep = ll >= ll.max() - tail
        rows, cols = np.nonzero(keep.any(axis=1))[0], np.nonzero(keep.any(axis=0))[0]
        step = (hi - lo) / n
        new_lo = np.array([a_axis[rows[0]], b_axis[cols[0]]]) - 1.5 * step
        new_hi = np.array([a_axis[rows[-1]], b_axis[cols[-1]]]) + 1.5 * step
        lo = np.maximum(new_lo, prior.lower)
        hi = np.minimum(new_hi, prior.upper)

    meta = {"shift_handling": shift_handling, "n_shift": n_shift, "sigma": sigma,
            "box": [lo.tolist(), hi.tolist()], "refine": refine}
    return GridPosterior.from_log_likelihood(kind, (a_axis, b_axis), ll, meta)


def save_grid_posterior(path, post: GridPosterior) -> None:
    header = {"format_version": 1, "kind": post.kind.value, "shape": list(post.mass.shape),
              "meta": post.meta, "layout": ["axis0", "axis1", "mass"]}
    with open(path, "wb") as fh:
        fh.write((json.dumps(header, sort_keys=True) + "\n").encode())
        for arr in (post.axes[0], post.axes[1], post.mass):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_grid_posterior(path) -> GridPosterior:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline())
        blob = np.frombuffer(fh.read(), dtype="<f8")
    na, nb = header["shape"]
    if blob.size != na + nb + na * nb:
        raise ValueError("truncated grid posterior file")
    return GridPosterior(header["kind"], (blob[:na].copy(), blob[na:na + nb].copy()),
                         blob[na + nb:].reshape(na, nb).copy(), meta=header["meta"])


# Cramer-Rao widths ---------------------------------------------------------

@dataclass(frozen=True)
class CRBWidths:
    kind: SignalKind
    names: tuple[str, str]
    widths: tuple[float, float]

    def __post_init__(self):
        if not all(np.isfinite(w) and w > 0 for w in self.widths):
            raise ValueError(f"non-positive or non-finite width: {self.widths}")

    def as_array(self) -> np.ndarray:
        return np.array(self.widths)

    def as_dict(self) -> dict:
        return dict(zip(self.names, self.widths))


def crb_widths(params: SignalParams, grid: TimeGrid, sigma: float) -> CRBWidths:
    """One-sigma widths sigma / sqrt(sum_i (dy/dtheta)^2) at the reference arrival time."""
    t = grid.times
    if params.kind is SignalKind.SHO:
        w0, beta = params.omega0, params.beta
        if not 0 <= beta < 1:
            raise ValueError(f"beta must lie in [0, 1) for the SHO widths, got {beta}")
        tp = t[t >= 0]
        root = math.sqrt(1.0 - beta * beta)
        env = np.exp(-2.0 * beta * w0 * tp)
        phase = w0 * tp * root
        s, c = np.sin(phase), np.cos(phase)
        d_w0 = np.sum(tp ** 2 * env * (root * s + beta * c) ** 2)
        d_beta = np.sum(w0 ** 2 * tp ** 2 * env * (beta * s / root - c) ** 2)
        widths = (sigma / math.sqrt(d_w0), sigma / math.sqrt(d_beta))
    else:
        f0, tau = params.f0, params.tau
        env = np.exp(-2.0 * t ** 2 / tau ** 2)
        d_f = np.sum(4.0 * math.pi ** 2 * t ** 2 * env * np.cos(2 * math.pi * f0 * t) ** 2)
        d_tau = np.sum(4.0 * t ** 4 * env * np.sin(2 * math.pi * f0 * t) ** 2)
        widths = (sigma / math.sqrt(d_f), sigma * tau ** 3 / math.sqrt(d_tau))
    return CRBWidths(params.kind, params.kind.param_names, widths)


def fisher_information(params: SignalParams, grid: TimeGrid, sigma: float, h: float = 1e-5) -> np.ndarray:
    """Fisher matrix of the Gaussian likelihood with central-difference signal derivatives."""
    theta = params.as_array()
    t = grid.times
    jac = np.empty((2, t.size))
    for k in range(2):
        step = np.zeros(2)
        step[k] = h * max(1.0, abs(theta[k]))
        up = signal_values(params.kind, *(theta + step), t)
        dn = signal_values(params.kind, *(theta - step), t)
        jac[k] = (up - dn) / (2 * step[k])
    return jac @ jac.T / sigma ** 2


def fisher_widths(params: SignalParams, grid: TimeGrid, sigma: float, h: float = 1e-5,
                  marginal: bool = False) -> np.ndarray:
    """1/sqrt(F_kk), or sqrt((F^-1)_kk) when marginal=True."""
    F = fisher_information(params, grid, sigma, h)
    if marginal:
        return np.sqrt(np.diag(np.linalg.inv(F)))
    return 1.0 / np.sqrt(np.diag(F))


# calibration ---------------------------------------------------------------

MIN_SAMPLES = 100
MIN_LEVELS = 50


def credible_level(sample_log_prob, truth_log_prob: float) -> float:
    """HPD mass at which the truth is first enclosed.

    Estimated as the fraction of posterior samples that are denser than the truth.
    """
    lp = np.asarray(sample_log_prob, dtype=np.float64)
    if lp.ndim != 1 or lp.size < MIN_SAMPLES:
        raise ValueError(f"need at least {MIN_SAMPLES} samples, got {lp.size}")
    return float(np.mean(lp > truth_log_prob))


def marginal_levels(samples, truth) -> np.ndarray:
    """Per-parameter quantile of the truth within the 1-D marginal samples."""
    s = np.asarray(samples, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] < MIN_SAMPLES:
        raise ValueError(f"need at least {MIN_SAMPLES} samples")
    return np.mean(s < np.asarray(truth)[None, :], axis=0)


@dataclass
class PPCurve:
    levels: np.ndarray
    coverage: np.ndarray
    bands: dict  # sigma multiple -> (lo, hi) arrays
    ks_stat: float
    ks_pvalue: float
    n: int

    def within_band(self, k: int = 3) -> bool:
        lo, hi = self.bands[k]
        return bool(np.all((self.coverage >= lo - 1e-12) & (self.coverage <= hi + 1e-12)))

    def rows(self) -> list[list[float]]:
        out = []
        for i, p in enumerate(self.levels):
            row = [p, self.coverage[i]]
            for k in sorted(self.bands):
                row += [self.bands[k][0][i], self.bands[k][1][i]]
            out.append(row)
        return out

    def header(self) -> list[str]:
        cols = ["level", "coverage"]
        for k in sorted(self.bands):
            cols += [f"band{k}_lo", f"band{k}_hi"]
        return cols


def pp_curve(levels, n_grid: int = 101) -> PPCurve:
    """Empirical coverage of credible levels with binomial bands and a KS test against U[0, 1]."""
    x = np.sort(np.asarray(levels, dtype=np.float64))
    n = x.size
    if n < MIN_LEVELS:
        raise ValueError(f"need at least {MIN_LEVELS} credible levels, got {n}")
    if np.any((x < 0) | (x > 1)):
        raise ValueError("credible levels must lie in [0, 1]")
    grid = np.linspace(0.0, 1.0, n_grid)
    cover = np.searchsorted(x, grid, side="right") / n
    # a zero-mass region encloses nothing and the full support encloses everything
    cover[0], cover[-1] = 0.0, 1.0
    bands = {}
    for k in (1, 2, 3):
        q = stats.norm.cdf(-k)
        lo = stats.binom.ppf(q, n, grid) / n
        hi = stats.binom.ppf(1 - q, n, grid) / n
        bands[k] = (np.nan_to_num(lo), np.nan_to_num(hi, nan=1.0))
    ks = stats.kstest(x, "uniform", method="asymp")
    return PPCurve(grid, cover, bands, float(ks.statistic), float(ks.pvalue), n)


# width comparison ----------------------------------------------------------

def width_report(flow_samples, oracle: GridPosterior, crb: CRBWidths | None = None) -> list[dict]:
    """Per-parameter widths from flow samples, the grid oracle and the CRB."""
    s = np.asarray(getattr(flow_samples, "samples", flow_samples), dtype=np.float64)
    flow_sd = s.std(axis=0, ddof=1)
    flow_mu = s.mean(axis=0)
    or_sd, or_mu = oracle.std(), oracle.mean()
    rows = []
    for k, name in enumerate(oracle.kind.param_names):
        row = {"param": name, "flow_mean": flow_mu[k], "oracle_mean": or_mu[k],
               "flow_std": flow_sd[k], "oracle_std": or_sd[k],
               "flow_over_oracle": flow_sd[k] / or_sd[k]}
        if crb is not None:
            row["crb"] = crb.widths[k]
            row["oracle_over_crb"] = or_sd[k] / crb.widths[k]
        rows.append(row)
    return rows


def format_width_table(rows: list[dict]) -> str:
    cols = list(rows[0].keys())
    lines = ["  ".join(f"{c:>16s}" for c in cols)]
    for r in rows:
        lines.append("  ".join(f"{r[c]:>16s}" if isinstance(r[c], str) else f"{r[c]:>16.6g}" for c in cols))
    return "\n".join(lines)
