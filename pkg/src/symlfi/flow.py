"""Conditional masked autoregressive flow over the two signal parameters."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import diffcore as dc
from .embedding import Encoder, EncoderConfig, encoder_features
from .nets import MLP, Cost, Dense
from .signals import Dataset, ParamPrior, SignalKind, TimeSeries

log = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class FlowConfig:
    n_transforms: int = 5
    hidden: tuple[int, ...] = (64, 64)
    context_dim: int = 3
    dim: int = 2
    logscale_clamp: float = 7.0

    def __post_init__(self):
        self.hidden = tuple(self.hidden)
        if self.n_transforms < 1:
            raise ValueError("need at least one transform")
        if self.dim != 2:
            raise ValueError("the parameter space is two-dimensional")


class ParamScaler:
    """Affine map from the prior box to [-1, 1]^2."""

    def __init__(self, lower, upper, bounded: bool = True):
        self.lower = np.asarray(lower, dtype=np.float64)
        self.upper = np.asarray(upper, dtype=np.float64)
        if np.any(self.upper <= self.lower):
            raise ValueError("scaler needs upper > lower")
        self.bounded = bounded
        self.half_width = 0.5 * (self.upper - self.lower)
        self.center = 0.5 * (self.upper + self.lower)

    @classmethod
    def from_prior(cls, prior: ParamPrior) -> "ParamScaler":
        return cls(prior.lower, prior.upper)

    @classmethod
    def identity(cls, dim: int = 2) -> "ParamScaler":
        return cls(-np.ones(dim), np.ones(dim), bounded=False)

    @property
    def log_det(self) -> float:
        """log |d scaled / d physical|."""
        return float(-np.log(self.half_width).sum())

    def to_scaled(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=np.float64)
        if self.bounded and np.any((theta < self.lower) | (theta > self.upper)):
            raise ValueError("parameters outside the scaler domain")
        return (theta - self.center) / self.half_width

    def to_physical(self, u) -> np.ndarray:
        return np.asarray(u) * self.half_width + self.center

    def to_dict(self) -> dict:
        return {"lower": self.lower.tolist(), "upper": self.upper.tolist(), "bounded": self.bounded}


class MADE:
    """Masked conditioner returning per-dimension shift and log-scale.

    Hidden units carry degrees 0..dim-1; degree-0 units see only the context,
    so output k depends on inputs with index < k plus the context.
    """

    def __init__(self, name: str, dim: int, context_dim: int, hidden: tuple[int, ...]):
        self.dim = dim
        in_deg = np.arange(1, dim + 1)
        degs = [np.arange(h) % dim for h in hidden]
        out_deg = np.tile(np.arange(1, dim + 1), 2)
        self.input = Dense(f"{name}.in", dim, hidden[0], mask=in_deg[:, None] <= degs[0][None, :])
        self.context = Dense(f"{name}.ctx", context_dim, hidden[0], bias=False)
        self.hidden = [
            Dense(f"{name}.h{i}", a.size, b.size, mask=a[:, None] <= b[None, :])
            for i, (a, b) in enumerate(zip(degs, degs[1:]))
        ]
        self.output = Dense(f"{name}.out", hidden[-1], 2 * dim, mask=degs[-1][:, None] < out_deg[None, :])

    @property
    def layers(self) -> list[Dense]:
        return [self.input, self.context, *self.hidden, self.output]

    def init(self, store: dc.ParamStore, rng: np.random.Generator) -> None:
        self.input.init(store, rng)
        self.context.init(store, rng)
        for layer in self.hidden:
            layer.init(store, rng)
        self.output.init(store, rng, zero=True)

    def __call__(self, p: dict, x: dc.Tensor, ctx: dc.Tensor, clamp: float):
        h = dc.relu(dc.add(self.input(p, x), self.context(p, ctx)))
        for layer in self.hidden:
            h = dc.relu(layer(p, h))
        out = self.output(p, h)
        shift = dc.take(out, slice(0, self.dim), axis=1)
        logscale = dc.clip(dc.take(out, slice(self.dim, 2 * self.dim), axis=1), -clamp, clamp)
        return shift, logscale

    def cost(self, rows: int) -> Cost:
        total = Cost()
        for layer in self.layers:
            total = total + layer.cost(rows)
        return total


class MAF:
    """z = x * exp(alpha(x_<k, c)) + mu(x_<k, c) per transform, dimensions reversed in between."""

    def __init__(self, config: FlowConfig | None = None, prefix: str = "flow"):
        self.config = cfg = config or FlowConfig()
        self.prefix = prefix
        self.transforms = [
            MADE(f"{prefix}.t{i}", cfg.dim, cfg.context_dim, cfg.hidden) for i in range(cfg.n_transforms)
        ]
        self.perm = np.arange(cfg.dim)[::-1].copy()

    def init(self, store: dc.ParamStore, rng: np.random.Generator) -> None:
        for t in self.transforms:
            t.init(store, rng)

    @property
    def param_names(self) -> list[str]:
        return [n for t in self.transforms for layer in t.layers for n in layer.param_names]

    def forward(self, p: dict, u, ctx):
        """(z, logdet) for scaled parameters u (B, 2) and context (B, context_dim)."""
        x, ctx = dc.as_tensor(u), dc.as_tensor(ctx)
        if ctx.data.ndim != 2 or ctx.shape[1] != self.config.context_dim or ctx.shape[0] != x.shape[0]:
            raise dc.ShapeError(f"context shape {ctx.shape} does not match flow")
        logdet = None
        for i, made in enumerate(self.transforms):
            if i:
                x = dc.take(x, self.perm, axis=1)
            shift, logscale = made(p, x, ctx, self.config.logscale_clamp)
            x = dc.add(dc.mul(x, dc.exp(logscale)), shift)
            term = dc.reduce_sum(logscale, axis=1)
            logdet = term if logdet is None else dc.add(logdet, term)
        return x, logdet

    def inverse(self, p: dict, z: np.ndarray, ctx: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        ctx = dc.Tensor(ctx)
        dim, clamp = self.config.dim, self.config.logscale_clamp
        y = z
        for i in reversed(range(len(self.transforms))):
            made = self.transforms[i]
            x = np.zeros_like(y)
            for k in range(dim):
                shift, logscale = made(p, dc.Tensor(x), ctx, clamp)
                x[:, k] = (y[:, k] - shift.data[:, k]) * np.exp(-logscale.data[:, k])
            y = x[:, np.argsort(self.perm)] if i else x
        return y

    def log_prob(self, p: dict, u, ctx) -> dc.Tensor:
        """Log density of scaled parameters under the flow, shape (B,)."""
        z, logdet = self.forward(p, u, ctx)
        base = dc.mul(dc.reduce_sum(dc.square(z), axis=1), -0.5)
        return dc.add(dc.add(base, -0.5 * self.config.dim * LOG_2PI), logdet)

    def cost(self, rows: int) -> Cost:
        total = Cost()
        for t in self.transforms:
            total = total + t.cost(rows)
        return total


# conditional models --------------------------------------------------------

@dataclass
class PosteriorSamples:
    kind: SignalKind
    samples: np.ndarray
    in_prior: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.samples)

    def mean(self) -> np.ndarray:
        return self.samples.mean(axis=0)

    def std(self) -> np.ndarray:
        return self.samples.std(axis=0, ddof=1)

    def credible_interval(self, level: float = 0.68) -> np.ndarray:
        """Central interval per parameter, shape (2, 2) as [[lo, hi], ...]."""
        q = 0.5 * (1.0 - level)
        return np.quantile(self.samples, [q, 1.0 - q], axis=0).T


class ConditionalFlow:
    """A MAF whose context is computed from a time series.

    Subclasses define ``inputs`` (the per-record array fed to the context
    network, computed once per dataset) and ``context``.
    """

    kind: SignalKind
    flow: MAF
    scaler: ParamScaler
    store: dc.ParamStore

    def inputs(self, data: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def context(self, p: dict, inputs) -> dc.Tensor:
        raise NotImplementedError

    def context_cost(self, batch: int) -> Cost:
        raise NotImplementedError

    def topology(self) -> dict:
        raise NotImplementedError

    def nll(self, p: dict, u: np.ndarray, inputs: np.ndarray) -> dc.Tensor:
        """Mean negative log density in physical-parameter units."""
        lp = self.flow.log_prob(p, u, self.context(p, inputs))
        return dc.mul(dc.add(dc.reduce_mean(lp), self.scaler.log_det), -1.0)

    def context_values(self, data) -> np.ndarray:
        """Context rows for one series, a batch of series, or a TimeSeries."""
        if isinstance(data, TimeSeries):
            data = data.values
        p = self.store.tensors()
        return self.context(p, self.inputs(np.atleast_2d(data))).data

    def log_prob(self, theta, data) -> np.ndarray:
        """log p(theta | data) for theta (n, 2) and one series or n series."""
        theta = np.atleast_2d(theta)
        ctx = self.context_values(data)
        if len(ctx) == 1:
            ctx = np.repeat(ctx, len(theta), axis=0)
        u = self.scaler.to_scaled(theta)
        return self.flow.log_prob(self.store.tensors(self.flow.param_names), u, ctx).data + self.scaler.log_det

    def sample(self, n: int, data, rng: np.random.Generator, context: np.ndarray | None = None) -> PosteriorSamples:
        if n < 1:
            raise ValueError("n must be positive")
        ctx = self.context_values(data) if context is None else np.atleast_2d(context)
        z = rng.standard_normal((n, self.flow.config.dim))
        u = self.flow.inverse(self.store.tensors(self.flow.param_names), z, np.repeat(ctx, n, axis=0))
        theta = self.scaler.to_physical(u)
        lo, hi = self.scaler.lower, self.scaler.upper
        inside = np.all((theta >= lo) & (theta <= hi), axis=1) if self.scaler.bounded else np.ones(n, bool)
        return PosteriorSamples(self.kind, theta, inside, {"context": ctx[0].tolist()})

    def sample_log_prob(self, samples: np.ndarray, context: np.ndarray) -> np.ndarray:
        """Log density of samples under a fixed context, ignoring the scaler domain."""
        u = (np.asarray(samples) - self.scaler.center) / self.scaler.half_width
        ctx = np.repeat(np.atleast_2d(context), len(u), axis=0)
        return self.flow.log_prob(self.store.tensors(self.flow.param_names), u, ctx).data + self.scaler.log_det

    def complexity(self, batch: int) -> dict:
        ctx = self.context_cost(batch)
        flow = self.flow.cost(batch)
        trainable = sum(
            c.params for c, names in self._cost_groups(batch) if not all(self.store.is_frozen(n) for n in names)
        )
        return {
            "param_count": ctx.params + flow.params,
            "trainable_param_count": trainable,
            "macs_per_forward": ctx.macs + flow.macs,
            "batch_size": batch,
        }

    def _cost_groups(self, batch: int):
        raise NotImplementedError


class EmbeddedFlow(ConditionalFlow):
    """Flow conditioned on the 3-D embedding; conv features come from a frozen encoder."""

    def __init__(self, kind, encoder: Encoder, flow: MAF, scaler: ParamScaler, store: dc.ParamStore):
        self.kind = SignalKind(kind)
        self.encoder, self.flow, self.scaler, self.store = encoder, flow, scaler, store

    def inputs(self, data):
        return encoder_features(self.encoder, self.store, np.atleast_2d(data))

    def context(self, p, inputs):
        return self.encoder.head(p, dc.as_tensor(inputs))

    def context_cost(self, batch):
        conv, head = self.encoder.cost(batch)
        return conv + head

    def _cost_groups(self, batch):
        conv, head = self.encoder.cost(batch)
        return [
            (conv, self.encoder.conv_names),
            (head, self.encoder.fc_names),
            (self.flow.cost(batch), self.flow.param_names),
        ]

    def topology(self):
        return {
            "type": "embedded",
            "kind": self.kind.value,
            "encoder": asdict(self.encoder.config),
            "flow": asdict(self.flow.config),
            "scaler": self.scaler.to_dict(),
        }


@dataclass
class BaselineConfig:
    n_samples: int = 512
    summary: tuple[int, ...] = (1280, 256)
    context_dim: int = 32
    flow: FlowConfig = field(default_factory=lambda: FlowConfig(hidden=(128, 128), context_dim=32))

    def __post_init__(self):
        self.summary = tuple(self.summary)
        if isinstance(self.flow, dict):
            self.flow = FlowConfig(**self.flow)
        if self.flow.context_dim != self.context_dim:
            raise ValueError("flow context_dim must equal the summary output")


class BaselineFlow(ConditionalFlow):
    """Flow conditioned on the raw series through a jointly trained dense summary."""

    def __init__(self, kind, config: BaselineConfig, flow: MAF, summary: MLP, scaler: ParamScaler,
                 store: dc.ParamStore):
        self.kind = SignalKind(kind)
        self.config, self.flow, self.summary, self.scaler, self.store = config, flow, summary, scaler, store

    def inputs(self, data):
        data = np.atleast_2d(np.asarray(data, dtype=np.float64))
        if data.shape[1] != self.config.n_samples:
            raise dc.ShapeError(f"expected series of length {self.config.n_samples}")
        return data

    def context(self, p, inputs):
        return self.summary(p, dc.as_tensor(inputs))

    def context_cost(self, batch):
        return self.summary.cost(batch)

    def _cost_groups(self, batch):
        return [(self.summary.cost(batch), self.summary.param_names),
                (self.flow.cost(batch), self.flow.param_names)]

    def topology(self):
        return {
            "type": "baseline",
            "kind": self.kind.value,
            "baseline": asdict(self.config),
            "scaler": self.scaler.to_dict(),
        }


def build_embedded_flow(kind, encoder: Encoder, encoder_store: dc.ParamStore, prior: ParamPrior,
                        config: FlowConfig | None = None, seed: int = 0, freeze: bool = True) -> EmbeddedFlow:
    """Embedded flow reusing (a copy of) pretrained encoder weights, conv layers frozen."""
    store = dc.ParamStore()
    for name in encoder.conv_names + encoder.fc_names:
        store.add(name, encoder_store[name])
    if freeze:
        store.freeze(encoder.conv_names)
    flow = MAF(config or FlowConfig())
    flow.init(store, np.random.default_rng(seed))
    return EmbeddedFlow(kind, encoder, flow, ParamScaler.from_prior(prior), store)


def build_baseline_flow(kind, prior: ParamPrior, config: BaselineConfig | None = None,
                        seed: int = 0) -> BaselineFlow:
    config = config or BaselineConfig()
    rng = np.random.default_rng(seed)
    store = dc.ParamStore()
    summary = MLP("baseline.summary", [config.n_samples, *config.summary, config.context_dim])
    summary.init(store, rng)
    flow = MAF(config.flow)
    flow.init(store, rng)
    return BaselineFlow(kind, config, flow, summary, ParamScaler.from_prior(prior), store)


def save_model(path, model: ConditionalFlow) -> None:
    dc.save_checkpoint(path, model.store, {"topology": model.topology()})


def load_model(path) -> ConditionalFlow:
    store, meta = dc.load_checkpoint(path)
    topo = meta["topology"]
    sc = topo["scaler"]
    scaler = ParamScaler(sc["lower"], sc["upper"], sc["bounded"])
    if topo["type"] == "embedded":
        encoder = Encoder(EncoderConfig(**topo["encoder"]))
        flow = MAF(FlowConfig(**topo["flow"]))
        return EmbeddedFlow(topo["kind"], encoder, flow, scaler, store)
    config = BaselineConfig(**topo["baseline"])
    summary = MLP("baseline.summary", [config.n_samples, *config.summary, config.context_dim])
    return BaselineFlow(topo["kind"], config, MAF(config.flow), summary, scaler, store)


# training ------------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 256
    lr: float = 5e-4
    optimizer: str = "adam"
    val_fraction: float = 0.1
    patience: int = 20


def train_flow(model: ConditionalFlow, dataset: Dataset, config: TrainConfig | None = None,
               seed: int = 0) -> list[dict]:
    """Maximum-likelihood training on (params, data) pairs with a held-out split.

    The parameters with the best validation loss are restored at the end.
    Returns one row per epoch: epoch, train and val mean negative log density.
    """
    config = config or TrainConfig()
    if dataset.ssl_pairs:
        raise ValueError("flow training needs a dataset without ssl pairs")
    rng = np.random.default_rng(seed)
    n = len(dataset)
    order = rng.permutation(n)
    n_val = max(1, int(round(config.val_fraction * n)))
    val_idx, train_idx = order[:n_val], order[n_val:]
    u = model.scaler.to_scaled(dataset.params)
    inputs = model.inputs(dataset.data)
    opt = dc.Optimizer(model.store, dc.OptimizerConfig(config.optimizer, config.lr))

    def val_loss() -> float:
        p = model.store.tensors()
        total = 0.0
        for s in range(0, n_val, 2048):
            idx = val_idx[s:s + 2048]
            total += float(model.nll(p, u[idx], inputs[idx]).data) * len(idx)
        return total / n_val

    history = []
    best, best_state, stale = val_loss(), model.store.state(), 0
    for epoch in range(config.epochs):
        perm = train_idx[rng.permutation(len(train_idx))]
        total, count = 0.0, 0
        for s in range(0, len(perm), config.batch_size):
            idx = perm[s:s + config.batch_size]
            try:
                with dc.Tape() as tape:
                    p = model.store.tensors()
                    loss = model.nll(p, u[idx], inputs[idx])
                    grads = tape.backward(loss, p)
            except dc.NonFiniteError as err:
                raise dc.NonFiniteError(f"flow training diverged at epoch {epoch}: {err}") from err
            opt.step(grads)
            total += float(loss.data) * len(idx)
            count += len(idx)
        val = val_loss()
        history.append({"epoch": epoch, "train": total / count, "val": val})
        log.info("flow epoch %d train %.4f val %.4f", epoch, total / count, val)
        if val < best:
            best, best_state, stale = val, model.store.state(), 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    model.store.load_state(best_state)
    return history


def model_complexity(model: ConditionalFlow, batch_size: int) -> dict:
    return model.complexity(batch_size)
