"""Shift-invariant summary network trained with VICReg on time-shifted pairs."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import diffcore as dc
from .nets import MLP, Conv1d, Cost, ResBlock
from .signals import Dataset

log = logging.getLogger(__name__)

CONV_PREFIX = "encoder.conv"


@dataclass
class EncoderConfig:
    n_samples: int = 512
    stem_channels: int = 8
    stem_kernel: int = 7
    stem_stride: int = 4
    channels: tuple[int, ...] = (8, 16, 32)
    kernel: int = 3
    stride: int = 2
    fc: tuple[int, ...] = (16,)
    out_dim: int = 3

    def __post_init__(self):
        self.channels = tuple(self.channels)
        self.fc = tuple(self.fc)
        if self.out_dim != 3:
            raise ValueError("the embedding is three-dimensional")


@dataclass
class ExpanderConfig:
    widths: tuple[int, ...] = (3, 32, 12)

    def __post_init__(self):
        self.widths = tuple(self.widths)
        if self.widths[0] != 3 or self.widths[-1] != 12:
            raise ValueError("the expander maps 3 -> 12")


class Encoder:
    """Strided conv stem, residual blocks, global average pool, then a dense head to 3-D."""

    def __init__(self, config: EncoderConfig | None = None, prefix: str = "encoder"):
        self.config = cfg = config or EncoderConfig()
        self.prefix = prefix
        self.stem = Conv1d(f"{prefix}.conv.stem", 1, cfg.stem_channels, cfg.stem_kernel, cfg.stem_stride)
        self.blocks = []
        c_in = cfg.stem_channels
        for i, c in enumerate(cfg.channels):
            self.blocks.append(ResBlock(f"{prefix}.conv.block{i}", c_in, c, cfg.kernel, cfg.stride))
            c_in = c
        self.n_features = c_in
        self.head = MLP(f"{prefix}.fc", [c_in, *cfg.fc, cfg.out_dim])

    def init(self, store: dc.ParamStore, rng: np.random.Generator) -> None:
        self.stem.init(store, rng)
        for block in self.blocks:
            block.init(store, rng)
        self.head.init(store, rng)

    @property
    def conv_names(self) -> list[str]:
        names = list(self.stem.param_names)
        for block in self.blocks:
            for layer in block.layers:
                names += layer.param_names
        return names

    @property
    def fc_names(self) -> list[str]:
        return self.head.param_names

    def features(self, p: dict, x) -> dc.Tensor:
        """Pooled conv features (B, C) of series x (B, n_samples)."""
        x = dc.as_tensor(x)
        if x.data.ndim != 2 or x.shape[1] != self.config.n_samples:
            raise dc.ShapeError(f"encoder expects (batch, {self.config.n_samples}), got {x.shape}")
        h = dc.relu(self.stem(p, dc.reshape(x, x.shape + (1,))))
        for block in self.blocks:
            h = block(p, h)
        return dc.reduce_mean(h, axis=1)

    def __call__(self, p: dict, x) -> dc.Tensor:
        return self.head(p, self.features(p, x))

    def cost(self, batch: int) -> tuple[Cost, Cost]:
        """(conv part, dense head) costs for one forward pass."""
        length = self.config.n_samples
        conv = self.stem.cost(batch, length)
        length = self.stem.out_length(length)
        for block in self.blocks:
            conv = conv + block.cost(batch, length)
            length = block.out_length(length)
        return conv, self.head.cost(batch)


class Expander:
    def __init__(self, config: ExpanderConfig | None = None, prefix: str = "expander"):
        self.config = config or ExpanderConfig()
        self.mlp = MLP(prefix, list(self.config.widths))

    def init(self, store: dc.ParamStore, rng: np.random.Generator) -> None:
        self.mlp.init(store, rng)

    def __call__(self, p: dict, gamma) -> dc.Tensor:
        return self.mlp(p, dc.as_tensor(gamma))

    def cost(self, batch: int) -> Cost:
        return self.mlp.cost(batch)


def build_embedding(seed: int, encoder_config: EncoderConfig | None = None,
                    expander_config: ExpanderConfig | None = None):
    """Fresh encoder, expander and their shared ParamStore."""
    rng = np.random.default_rng(seed)
    store = dc.ParamStore()
    encoder = Encoder(encoder_config)
    expander = Expander(expander_config)
    encoder.init(store, rng)
    expander.init(store, rng)
    return encoder, expander, store


def _batched(fn, data: np.ndarray, batch: int = 1024) -> np.ndarray:
    return np.concatenate([fn(data[i:i + batch]) for i in range(0, len(data), batch)])


def encode(encoder: Encoder, store: dc.ParamStore, data: np.ndarray) -> np.ndarray:
    """Embeddings (n, 3) of series (n, n_samples) or a single series (n_samples,)."""
    data = np.asarray(data, dtype=np.float64)
    single = data.ndim == 1
    p = store.tensors()
    out = _batched(lambda x: encoder(p, x).data, np.atleast_2d(data))
    return out[0] if single else out


def encoder_features(encoder: Encoder, store: dc.ParamStore, data: np.ndarray) -> np.ndarray:
    p = store.tensors(encoder.conv_names)
    return _batched(lambda x: encoder.features(p, x).data, np.atleast_2d(data))


def expand(expander: Expander, store: dc.ParamStore, gamma: np.ndarray) -> np.ndarray:
    gamma = np.asarray(gamma, dtype=np.float64)
    out = expander(store.tensors(expander.mlp.param_names), np.atleast_2d(gamma)).data
    return out[0] if gamma.ndim == 1 else out


# loss ----------------------------------------------------------------------

@dataclass
class VICRegWeights:
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 1.0
    epsilon: float = 1e-4
    target_std: float = 1.0

    def __post_init__(self):
        lams = (self.lambda1, self.lambda2, self.lambda3)
        if min(lams) < 0 or max(lams) <= 0:
            raise ValueError("weights must be non-negative with at least one positive")
        if self.epsilon <= 0 or self.target_std <= 0:
            raise ValueError("epsilon and target_std must be positive")


@dataclass
class WeightSchedule:
    """Piecewise-constant weights: entry (start_epoch, weights) applies from start_epoch on."""

    steps: list[tuple[int, VICRegWeights]] = field(default_factory=lambda: [
        (0, VICRegWeights(25.0, 25.0, 1.0)),
        (30, VICRegWeights(1.0, 1.0, 1.0)),
    ])

    def __post_init__(self):
        starts = [s for s, _ in self.steps]
        if not starts or starts[0] != 0 or any(b <= a for a, b in zip(starts, starts[1:])):
            raise ValueError("schedule thresholds must start at 0 and increase strictly")

    def at(self, epoch: int) -> VICRegWeights:
        current = self.steps[0][1]
        for start, w in self.steps:
            if epoch >= start:
                current = w
        return current

    def to_list(self) -> list:
        return [[s, asdict(w)] for s, w in self.steps]

    @classmethod
    def from_list(cls, items) -> "WeightSchedule":
        return cls([(int(s), VICRegWeights(**w)) for s, w in items])


def _covariance_penalty(x: dc.Tensor) -> dc.Tensor:
    n, d = x.shape
    centered = dc.add_bias(x, dc.neg(dc.reduce_mean(x, axis=0)))
    cov = dc.mul(dc.matmul(dc.transpose(centered), centered), 1.0 / (n - 1))
    off = dc.mul(cov, 1.0 - np.eye(d))
    return dc.mul(dc.reduce_sum(dc.square(off)), 1.0 / d)


def _spread(x: dc.Tensor, w: VICRegWeights, form: str) -> dc.Tensor:
    _, var = dc.batch_mean_var(x)
    std = dc.sqrt(dc.add(var, w.epsilon))
    if form == "hinge":
        return dc.reduce_mean(dc.hinge(std, w.target_std))
    return dc.reduce_mean(std)


def vicreg_loss(X, Xp, w: VICRegWeights, variance_form: str = "hinge"):
    """(total, invariance, variance, covariance) for two batches of expanded vectors.

    The hinge form averages the per-batch std hinge over both batches; the
    literal form adds the mean sqrt(var + eps) of each batch, which rewards
    collapse and is kept only for comparison.
    """
    X, Xp = dc.as_tensor(X), dc.as_tensor(Xp)
    if X.shape != Xp.shape:
        raise dc.ShapeError(f"batches differ in shape: {X.shape} vs {Xp.shape}")
    if X.data.ndim != 2 or X.shape[0] < 2:
        raise dc.ShapeError("vicreg_loss needs batches of at least two rows")
    if variance_form not in ("hinge", "literal"):
        raise ValueError(f"unknown variance form {variance_form!r}")
    invariance = dc.mse(X, Xp)
    variance = dc.add(_spread(X, w, variance_form), _spread(Xp, w, variance_form))
    if variance_form == "hinge":
        variance = dc.mul(variance, 0.5)
    covariance = dc.add(_covariance_penalty(X), _covariance_penalty(Xp))
    total = dc.add(
        dc.add(dc.mul(invariance, w.lambda1), dc.mul(variance, w.lambda2)),
        dc.mul(covariance, w.lambda3),
    )
    return total, invariance, variance, covariance


# training ------------------------------------------------------------------

HISTORY_FIELDS = ("epoch", "total", "invariance", "variance", "covariance", "lambda1", "lambda2", "lambda3")


STANDARDIZE_ROWS = 512


def standardize_output(encoder: Encoder, store: dc.ParamStore, data: np.ndarray) -> None:
    """Data-dependent init: affinely rescale the last dense layer so the embedding of ``data``
    has zero mean and unit standard deviation per dimension."""
    gamma = encoder(store.tensors(encoder.conv_names + encoder.fc_names), np.asarray(data)).data
    if len(gamma) < 2:
        raise ValueError("need at least two series to standardize the embedding")
    mean, std = gamma.mean(axis=0), gamma.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    last = encoder.head.layers[-1].name
    store[last + ".W"] = store[last + ".W"] / std
    store[last + ".b"] = (store[last + ".b"] - mean) / std


def pretrain(
    encoder: Encoder,
    expander: Expander,
    store: dc.ParamStore,
    dataset: Dataset,
    schedule: WeightSchedule | None = None,
    optimizer: dc.OptimizerConfig | None = None,
    epochs: int = 100,
    seed: int = 0,
    batch_size: int = 256,
    variance_form: str = "hinge",
    standardize_init: bool = True,
) -> list[dict]:
    """Minimize VICReg between embeddings of reference and shifted views.

    Updates ``store`` in place and returns one history row per epoch with the
    batch-averaged unweighted terms. With ``standardize_init`` the encoder
    output layer is first rescaled so the embedding of the leading reference
    views has zero mean and unit spread (skipped when ``epochs`` is 0).
    """
    if not dataset.ssl_pairs:
        raise ValueError("pretraining needs a dataset built with ssl_pairs")
    if standardize_init and epochs > 0:
        standardize_output(encoder, store, dataset.data[:STANDARDIZE_ROWS])
    schedule = schedule or WeightSchedule()
    opt = dc.Optimizer(store, optimizer or dc.OptimizerConfig("adam", 1e-3))
    rng = np.random.default_rng(seed)
    n = len(dataset)
    batch_size = min(batch_size, n)
    n_batches = n // batch_size
    if batch_size < 2:
        raise ValueError("need at least two pairs per batch")
    history = []
    for epoch in range(epochs):
        w = schedule.at(epoch)
        order = rng.permutation(n)
        sums = np.zeros(4)
        for b in range(n_batches):
            idx = order[b * batch_size:(b + 1) * batch_size]
            x = np.concatenate([dataset.data[idx], dataset.data_aug[idx]])
            try:
                with dc.Tape() as tape:
                    p = store.tensors()
                    out = expander(p, encoder(p, x))
                    X = dc.take(out, slice(0, len(idx)), axis=0)
                    Xp = dc.take(out, slice(len(idx), 2 * len(idx)), axis=0)
                    terms = vicreg_loss(X, Xp, w, variance_form)
                    grads = tape.backward(terms[0], p)
            except dc.NonFiniteError as err:
                raise dc.NonFiniteError(f"pretraining diverged at epoch {epoch}, batch {b}: {err}") from err
            opt.step(grads)
            sums += [t.data for t in terms]
        mean = sums / n_batches
        row = dict(zip(HISTORY_FIELDS, [epoch, *mean, w.lambda1, w.lambda2, w.lambda3]))
        history.append(row)
        log.info("pretrain epoch %d total %.4f inv %.4f var %.4f cov %.4f",
                 epoch, *mean)
    return history


def freeze_conv(store: dc.ParamStore, encoder: Encoder) -> list[str]:
    """Freeze every convolutional parameter of ``encoder``; the dense head stays trainable."""
    names = encoder.conv_names
    store.freeze(names)
    return names


def cluster_separation(gammas: np.ndarray, labels) -> float:
    """Mean within-label pairwise distance over mean between-label pairwise distance."""
    gammas = np.asarray(gammas, dtype=np.float64)
    labels = np.asarray(labels)
    values, counts = np.unique(labels, return_counts=True)
    if len(values) < 2 or counts.min() < 2:
        raise ValueError("need at least two labels with two points each")
    dist = np.sqrt(((gammas[:, None, :] - gammas[None, :, :]) ** 2).sum(-1))
    same = labels[:, None] == labels[None, :]
    upper = np.triu(np.ones_like(same), k=1)
    intra = dist[same & upper].mean()
    inter = dist[~same & upper].mean()
    return float(intra / inter)
