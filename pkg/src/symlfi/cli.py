"""Command-line pipeline: simulate, pretrain, train, infer, calibrate and report.

Every command reads an optional JSON RunConfig, applies flag overrides, writes
its artifacts into --out and records them in a manifest with sha256 checksums.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import platform
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import scipy

from . import diffcore as dc
from .embedding import (EncoderConfig, ExpanderConfig, HISTORY_FIELDS, WeightSchedule, build_embedding,
                        pretrain)
from .flow import (BaselineConfig, FlowConfig, TrainConfig, build_baseline_flow, build_embedded_flow,
                   load_model, save_model, train_flow)
from .signals import (ConfigError, ParamPrior, ShiftPrior, SignalKind, SignalParams, TimeGrid,
                      add_white_noise, default_grid, default_prior, generate_dataset,
                      load_dataset, save_dataset, waveform)
from .validation import (credible_level, crb_widths, fisher_widths, format_width_table, grid_posterior,
                         marginal_levels, pp_curve, width_report)

log = logging.getLogger("symlfi")

SCHEMA_VERSION = 1
STAGES = ("ssl_data", "train_data", "test_data", "init", "pretrain", "flow_init", "train",
          "baseline", "infer", "calibrate")
EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 2, 3, 4
MIN_INSTANCES = 50


# configuration -------------------------------------------------------------

@dataclass
class PretrainSettings:
    n_pairs: int = 49152
    epochs: int = 100
    batch_size: int = 256
    lr: float = 1e-3
    variance_form: str = "hinge"
    standardize_init: bool = True
    schedule: list = field(default_factory=lambda: WeightSchedule().to_list())


@dataclass
class InferSettings:
    n_samples: int = 3000
    oracle_resolution: int = 256


@dataclass
class CalibrateSettings:
    n_instances: int = 200
    n_samples: int = 1000


@dataclass
class RunConfig:
    kind: str = "sho"
    seed: int = 0
    sigma: float = 0.4
    grid: dict | None = None
    prior: dict | None = None
    shift_max: float | None = None
    n_train: int = 50000
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    expander: ExpanderConfig = field(default_factory=ExpanderConfig)
    flow: FlowConfig = field(default_factory=FlowConfig)
    baseline: BaselineConfig = field(default_factory=BaselineConfig)
    pretrain: PretrainSettings = field(default_factory=PretrainSettings)
    train: TrainConfig = field(default_factory=TrainConfig)
    infer: InferSettings = field(default_factory=InferSettings)
    calibrate: CalibrateSettings = field(default_factory=CalibrateSettings)
    schema_version: int = SCHEMA_VERSION

    _nested = {"encoder": EncoderConfig, "expander": ExpanderConfig, "flow": FlowConfig,
               "baseline": BaselineConfig, "pretrain": PretrainSettings, "train": TrainConfig,
               "infer": InferSettings, "calibrate": CalibrateSettings}

    def __post_init__(self):
        try:
            self.kind = SignalKind(self.kind).value
        except ValueError:
            raise ConfigError(f"unknown model kind {self.kind!r}") from None
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {self.schema_version}")
        if self.grid is None:
            g = default_grid(self.kind)
            self.grid = {"n_samples": g.n_samples, "dt": g.dt, "t_start": g.t_start}
        if self.prior is None:
            p = default_prior(self.kind)
            self.prior = {"lower": list(p.lower), "upper": list(p.upper)}
        if self.shift_max is None:
            self.shift_max = 0.25 * self.time_grid.duration
        self.validate()

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs = dict(data)
        for key, typ in cls._nested.items():
            if key in kwargs and isinstance(kwargs[key], dict):
                sub = kwargs[key]
                allowed = {f.name for f in fields(typ)}
                if set(sub) - allowed:
                    raise ConfigError(f"unknown keys in {key}: {sorted(set(sub) - allowed)}")
                try:
                    kwargs[key] = typ(**sub)
                except (TypeError, ValueError) as err:
                    raise ConfigError(f"invalid {key} settings: {err}") from err
        try:
            return cls(**kwargs)
        except (TypeError, ValueError) as err:
            if isinstance(err, ConfigError):
                raise
            raise ConfigError(str(err)) from err

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            out[f.name] = asdict(value) if f.name in self._nested else value
        return json.loads(json.dumps(out))

    def digest(self) -> str:
        return hashlib.sha256(canonical_json(self.to_dict()).encode()).hexdigest()

    @property
    def time_grid(self) -> TimeGrid:
        return TimeGrid(int(self.grid["n_samples"]), float(self.grid["dt"]), float(self.grid["t_start"]))

    @property
    def param_prior(self) -> ParamPrior:
        return ParamPrior(SignalKind(self.kind), tuple(self.prior["lower"]), tuple(self.prior["upper"]))

    @property
    def shift_prior(self) -> ShiftPrior:
        return ShiftPrior(self.shift_max)

    @property
    def schedule(self) -> WeightSchedule:
        return WeightSchedule.from_list(self.pretrain.schedule)

    def validate(self) -> None:
        try:
            grid, _ = self.time_grid, self.param_prior
            self.shift_prior.n_steps(grid)
            self.schedule
        except (KeyError, TypeError, ValueError) as err:
            raise ConfigError(f"invalid config: {err}") from err
        if self.sigma < 0:
            raise ConfigError("sigma must be non-negative")
        n = grid.n_samples
        if self.encoder.n_samples != n or self.baseline.n_samples != n:
            raise ConfigError(f"network input lengths must equal the grid length {n}")
        if self.flow.context_dim != self.encoder.out_dim:
            raise ConfigError("flow context_dim must equal the embedding dimension")
        if self.expander.widths[0] != self.encoder.out_dim:
            raise ConfigError("expander input must equal the embedding dimension")
        if self.pretrain.variance_form not in ("hinge", "literal"):
            raise ConfigError("variance_form must be 'hinge' or 'literal'")
        for name in ("n_train", "seed"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def stage_seed(seed: int, stage: str) -> int:
    """Independent integer seed for a named pipeline stage."""
    ss = np.random.SeedSequence(seed, spawn_key=(STAGES.index(stage),))
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def load_config(path: str | None, overrides: dict | None = None) -> RunConfig:
    data = {}
    if path:
        try:
            with open(path) as fh:
                data = json.load(fh)
        except json.JSONDecodeError as err:
            raise ConfigError(f"{path}: not valid JSON ({err})") from err
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: expected a JSON object")
    for key, value in (overrides or {}).items():
        if value is not None:
            data[key] = value
    return RunConfig.from_dict(data)


# output helpers ------------------------------------------------------------

def fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return f"{float(value):.17g}"
    return str(value)


def write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    config_hash: str
    config: dict
    artifacts: dict = field(default_factory=dict)
    inputs: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)
    versions: dict = field(default_factory=dict)
    args: dict = field(default_factory=dict)
    wall_clock_s: float = 0.0
    tag: str = ""

    def add(self, out: Path, path: Path) -> None:
        self.artifacts[str(Path(path).relative_to(out))] = sha256_file(path)

    def write(self, out: Path) -> Path:
        self.versions = {"python": platform.python_version(), "numpy": np.__version__,
                         "scipy": scipy.__version__, "schema_version": SCHEMA_VERSION}
        path = out / manifest_name(self.command, self.tag)
        with open(path, "w") as fh:
            json.dump(asdict(self), fh, indent=1, sort_keys=True, default=_json_default)
            fh.write("\n")
        return path


def manifest_name(command: str, tag: str = "") -> str:
    return f"manifest_{command}_{tag}.json" if tag else f"manifest_{command}.json"


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def verify_manifests(out: Path) -> list[str]:
    """Problems found when re-checking every manifest in ``out``; empty when all match."""
    problems = []
    paths = sorted(Path(out).glob("manifest_*.json"))
    if not paths:
        problems.append(f"no manifests in {out}")
    for mpath in paths:
        with open(mpath) as fh:
            man = json.load(fh)
        for rel, digest in sorted(man["artifacts"].items()):
            target = Path(out) / rel
            if not target.exists():
                problems.append(f"{mpath.name}: missing {rel}")
            elif sha256_file(target) != digest:
                problems.append(f"{mpath.name}: checksum mismatch for {rel}")
    return problems


# pipeline stages -----------------------------------------------------------

def simulate(cfg: RunConfig, split: str, n: int, sigma: float | None = None,
             ssl_pairs: bool | None = None):
    """Dataset for a split: 'ssl' (shifted pairs), 'train' or 'test'."""
    if split not in ("ssl", "train", "test"):
        raise ConfigError(f"unknown split {split!r}")
    pairs = split == "ssl" if ssl_pairs is None else ssl_pairs
    seed = stage_seed(cfg.seed, f"{split}_data")
    return generate_dataset(cfg.kind, cfg.param_prior, cfg.shift_prior, cfg.time_grid,
                            cfg.sigma if sigma is None else sigma, n, seed, ssl_pairs=pairs)


def run_pretrain(cfg: RunConfig, dataset, epochs: int | None = None):
    encoder, expander, store = build_embedding(stage_seed(cfg.seed, "init"), cfg.encoder, cfg.expander)
    st = cfg.pretrain
    history = pretrain(encoder, expander, store, dataset, cfg.schedule, dc.OptimizerConfig("adam", st.lr),
                       epochs=st.epochs if epochs is None else epochs,
                       seed=stage_seed(cfg.seed, "pretrain"), batch_size=st.batch_size,
                       variance_form=st.variance_form, standardize_init=st.standardize_init)
    return encoder, expander, store, history


def save_embedding(path, cfg: RunConfig, store: dc.ParamStore) -> None:
    dc.save_checkpoint(path, store, {"encoder": asdict(cfg.encoder), "expander": asdict(cfg.expander)})


def load_embedding(path):
    from .embedding import Encoder, Expander

    store, meta = dc.load_checkpoint(path)
    if "encoder" not in meta:
        raise ConfigError(f"{path} is not an embedding checkpoint")
    return Encoder(EncoderConfig(**meta["encoder"])), Expander(ExpanderConfig(**meta["expander"])), store


def run_train(cfg: RunConfig, dataset, encoder, encoder_store, epochs: int | None = None):
    model = build_embedded_flow(cfg.kind, encoder, encoder_store, cfg.param_prior, cfg.flow,
                                seed=stage_seed(cfg.seed, "flow_init"))
    tc = cfg.train if epochs is None else TrainConfig(**{**asdict(cfg.train), "epochs": epochs})
    before = {n: model.store[n].copy() for n in encoder.conv_names}
    history = train_flow(model, dataset, tc, seed=stage_seed(cfg.seed, "train"))
    delta = max(float(np.max(np.abs(model.store[n] - v))) for n, v in before.items())
    return model, history, delta


def run_train_baseline(cfg: RunConfig, dataset, epochs: int | None = None):
    model = build_baseline_flow(cfg.kind, cfg.param_prior, cfg.baseline, seed=stage_seed(cfg.seed, "flow_init"))
    tc = cfg.train if epochs is None else TrainConfig(**{**asdict(cfg.train), "epochs": epochs})
    history = train_flow(model, dataset, tc, seed=stage_seed(cfg.seed, "baseline"))
    return model, history


def posterior_levels(model, data: np.ndarray, truths: np.ndarray, n_samples: int, seed: int):
    """Joint (density-rank) and per-parameter credible levels of each truth, plus samples' moments."""
    ctx = model.context_values(data)
    joint = np.empty(len(truths))
    marg = np.empty((len(truths), truths.shape[1]))
    moments = np.empty((len(truths), 4))
    for i, truth in enumerate(truths):
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(i,))))
        s = model.sample(n_samples, None, rng, context=ctx[i]).samples
        lp = model.sample_log_prob(s, ctx[i])
        lp_truth = model.sample_log_prob(truth[None, :], ctx[i])[0]
        joint[i] = credible_level(lp, lp_truth)
        marg[i] = marginal_levels(s, truth)
        moments[i] = np.concatenate([s.mean(axis=0), s.std(axis=0, ddof=1)])
    return joint, marg, moments


def run_calibrate(cfg: RunConfig, model, n_instances: int | None = None, n_samples: int | None = None):
    n_inst = cfg.calibrate.n_instances if n_instances is None else n_instances
    n_samp = cfg.calibrate.n_samples if n_samples is None else n_samples
    if n_inst < MIN_INSTANCES:
        raise ConfigError(f"calibration needs at least {MIN_INSTANCES} instances")
    seed = stage_seed(cfg.seed, "calibrate")
    test = generate_dataset(cfg.kind, cfg.param_prior, cfg.shift_prior, cfg.time_grid, cfg.sigma, n_inst, seed)
    joint, marg, _ = posterior_levels(model, test.data, test.params, n_samp, seed)
    curves = {"joint": pp_curve(joint)}
    for k, name in enumerate(SignalKind(cfg.kind).param_names):
        curves[name] = pp_curve(marg[:, k])
    return test, joint, marg, curves


# commands ------------------------------------------------------------------

def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _manifest(name: str, cfg: RunConfig) -> RunManifest:
    return RunManifest(name, cfg.digest(), cfg.to_dict())


def _default_n(split: str, cfg: RunConfig) -> int:
    return {"ssl": cfg.pretrain.n_pairs, "train": cfg.n_train, "test": MIN_INSTANCES}[split]


def cmd_simulate(args, cfg: RunConfig) -> RunManifest:
    out = _out(args)
    n = args.n if args.n is not None else _default_n(args.split, cfg)
    ds = simulate(cfg, args.split, n, sigma=args.sigma)
    path = out / f"{args.name or args.split}.bin"
    save_dataset(path, ds)
    man = _manifest("simulate", cfg)
    man.tag = args.name or args.split
    man.add(out, path)
    man.metrics = {"n": n, "split": args.split, "n_samples": ds.grid.n_samples}
    print(f"wrote {path} ({n} records of {ds.grid.n_samples} samples)")
    return man


def cmd_pretrain(args, cfg: RunConfig) -> RunManifest:
    out = _out(args)
    ds = load_dataset(args.dataset or out / "ssl.bin")
    encoder, expander, store, history = run_pretrain(cfg, ds, args.epochs)
    ckpt, loss = out / "embedding.ckpt", out / "pretrain_loss.csv"
    save_embedding(ckpt, cfg, store)
    write_csv(loss, HISTORY_FIELDS, [[h[k] for k in HISTORY_FIELDS] for h in history])
    man = _manifest("pretrain", cfg)
    man.add(out, ckpt)
    man.add(out, loss)
    if history:
        man.metrics = {"first": history[0], "last": history[-1]}
        print("epoch 0:  " + "  ".join(f"{k} {history[0][k]:.4g}" for k in HISTORY_FIELDS[1:5]))
        print(f"epoch {len(history) - 1}: " + "  ".join(f"{k} {history[-1][k]:.4g}" for k in HISTORY_FIELDS[1:5]))
    return man


def _complexity_line(model, batch: int) -> str:
    c = model.complexity(batch)
    return (f"params {c['param_count']}  trainable {c['trainable_param_count']}  "
            f"MACs@{batch} {c['macs_per_forward']:.4g}")


def cmd_train(args, cfg: RunConfig) -> RunManifest:
    out = _out(args)
    ds = load_dataset(args.dataset or out / "train.bin")
    encoder, _, store = load_embedding(args.encoder or out / "embedding.ckpt")
    model, history, delta = run_train(cfg, ds, encoder, store, args.epochs)
    ckpt, loss = out / "flow.ckpt", out / "train_loss.csv"
    save_model(ckpt, model)
    write_csv(loss, ["epoch", "train", "val"], [[h["epoch"], h["train"], h["val"]] for h in history])
    print(_complexity_line(model, 1000))
    print(f"frozen conv max delta {delta:.3g}")
    man = _manifest("train", cfg)
    man.add(out, ckpt)
    man.add(out, loss)
    man.metrics = {"conv_max_delta": delta, "complexity": model.complexity(1000),
                   "best_val": min(h["val"] for h in history) if history else None}
    return man


def cmd_train_baseline(args, cfg: RunConfig) -> RunManifest:
    out = _out(args)
    ds = load_dataset(args.dataset or out / "train.bin")
    model, history = run_train_baseline(cfg, ds, args.epochs)
    ckpt, loss = out / "baseline.ckpt", out / "baseline_loss.csv"
    save_model(ckpt, model)
    write_csv(loss, ["epoch", "train", "val"], [[h["epoch"], h["train"], h["val"]] for h in history])
    print(_complexity_line(model, 1000))
    man = _manifest("train-baseline", cfg)
    man.add(out, ckpt)
    man.add(out, loss)
    man.metrics = {"complexity": model.complexity(1000),
                   "best_val": min(h["val"] for h in history) if history else None}
    return man


def _parse_pair(text: str) -> tuple[float, float]:
    try:
        a, b = (float(v) for v in text.split(","))
    except ValueError:
        raise ConfigError(f"expected two comma-separated numbers, got {text!r}") from None
    return a, b


def cmd_infer(args, cfg: RunConfig) -> RunManifest:
    out = _out(args)
    model = load_model(args.flow or out / "flow.ckpt")
    grid = cfg.time_grid
    seed = stage_seed(cfg.seed, "infer")
    if args.data:
        ds = load_dataset(args.data)
        rec = ds.record(args.index)
        series, truth = rec.data, rec.params
    elif args.truth:
        truth = SignalParams(SignalKind(cfg.kind), _parse_pair(args.truth))
        clean = waveform(truth, grid, args.shift)
        series = add_white_noise(clean, cfg.sigma, np.random.default_rng(seed))
    else:
        raise ConfigError("infer needs --data or --truth")
    n = args.n_samples or cfg.infer.n_samples
    samples = model.sample(n, series, np.random.default_rng(seed + 1))
    names = SignalKind(cfg.kind).param_names
    spath = out / "samples.csv"
    write_csv(spath, list(names) + ["in_prior"],
              [[*row, inside] for row, inside in zip(samples.samples, samples.in_prior)])
    man = _manifest("infer", cfg)
    man.add(out, spath)
    man.metrics = {"truth": list(truth.values), "mean": samples.mean().tolist(), "std": samples.std().tolist()}
    print("truth " + "  ".join(f"{k} {v:.5g}" for k, v in zip(names, truth.values)))
    print("flow  " + "  ".join(f"{k} {m:.5g} +- {s:.3g}" for k, m, s in zip(names, samples.mean(), samples.std())))
    if args.oracle:
        oracle = grid_posterior(series, cfg.kind, cfg.param_prior, cfg.sigma, grid,
                                resolution=cfg.infer.oracle_resolution, shift_prior=cfg.shift_prior)
        crb = crb_widths(truth, grid, cfg.sigma) if cfg.sigma > 0 else None
        rows = width_report(samples, oracle, crb)
        wpath = out / "widths.csv"
        write_csv(wpath, list(rows[0]), [list(r.values()) for r in rows])
        man.add(out, wpath)
        man.metrics["widths"] = rows
        print(format_width_table(rows))
    return man


def cmd_calibrate(args, cfg: RunConfig) -> RunManifest:
    out = _out(args)
    model = load_model(args.flow or out / "flow.ckpt")
    test, joint, marg, curves = run_calibrate(cfg, model, args.n_instances, args.n_samples)
    names = SignalKind(cfg.kind).param_names
    man = _manifest("calibrate", cfg)
    lpath = out / "levels.csv"
    write_csv(lpath, [*names, "joint", *(f"level_{n}" for n in names)],
              [[*test.params[i], joint[i], *marg[i]] for i in range(len(joint))])
    man.add(out, lpath)
    ks_rows = []
    for label, curve in curves.items():
        path = out / f"pp_{label}.csv"
        write_csv(path, curve.header(), curve.rows())
        man.add(out, path)
        ks_rows.append([label, curve.n, curve.ks_stat, curve.ks_pvalue, curve.within_band(3)])
        print(f"{label:>8s}  KS {curve.ks_stat:.4f}  p {curve.ks_pvalue:.4f}  within 3-sigma band {curve.within_band(3)}")
    kpath = out / "ks.csv"
    write_csv(kpath, ["curve", "n", "ks_stat", "ks_pvalue", "within_3sigma"], ks_rows)
    man.add(out, kpath)
    man.metrics = {r[0]: {"ks_stat": r[2], "ks_pvalue": r[3], "within_3sigma": bool(r[4])} for r in ks_rows}
    return man


def cmd_crb(args, cfg: RunConfig) -> RunManifest:
    out = _out(args)
    kind = SignalKind(cfg.kind)
    params = SignalParams(kind, _parse_pair(args.params) if args.params else
                          ((1.5, 0.2) if kind is SignalKind.SHO else (0.5, 0.3)))
    if cfg.sigma <= 0:
        raise ConfigError("CRB widths need sigma > 0")
    crb = crb_widths(params, cfg.time_grid, cfg.sigma)
    diag = fisher_widths(params, cfg.time_grid, cfg.sigma)
    full = fisher_widths(params, cfg.time_grid, cfg.sigma, marginal=True)
    rows = [[name, params.values[k], crb.widths[k], diag[k], full[k]] for k, name in enumerate(kind.param_names)]
    path = out / "crb.csv"
    write_csv(path, ["param", "value", "crb", "fisher_diag", "fisher_marginal"], rows)
    for r in rows:
        print(f"{r[0]:>8s} = {r[1]:.4g}:  CRB {r[2]:.4g}  (numeric Fisher {r[3]:.4g}, with correlations {r[4]:.4g})")
    man = _manifest("crb", cfg)
    man.add(out, path)
    man.metrics = crb.as_dict()
    return man


def cmd_complexity(args, cfg: RunConfig) -> RunManifest:
    out = _out(args)
    paths = args.checkpoints or [p for p in (out / "flow.ckpt", out / "baseline.ckpt") if p.exists()]
    if not paths:
        raise ConfigError("no checkpoints given and none found in --out")
    rows = []
    for p in paths:
        model = load_model(p)
        c = model.complexity(args.batch)
        rows.append([Path(p).name, model.topology()["type"], c["param_count"], c["trainable_param_count"],
                     c["batch_size"], c["macs_per_forward"]])
        print(f"{Path(p).name}: " + _complexity_line(model, args.batch))
    path = out / "complexity.csv"
    write_csv(path, ["checkpoint", "type", "params", "trainable_params", "batch", "macs"], rows)
    man = _manifest("complexity", cfg)
    man.add(out, path)
    return man


def cmd_verify(args, cfg: RunConfig) -> RunManifest | None:
    problems = verify_manifests(Path(args.out))
    for p in problems:
        print(p)
    if problems:
        raise IOError(f"{len(problems)} manifest problem(s)")
    print("all manifest checksums match")
    return None


COMMANDS = {
    "simulate": cmd_simulate, "pretrain": cmd_pretrain, "train": cmd_train,
    "train-baseline": cmd_train_baseline, "infer": cmd_infer, "calibrate": cmd_calibrate,
    "crb": cmd_crb, "complexity": cmd_complexity, "verify": cmd_verify,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config")
    common.add_argument("--seed", type=int, help="top-level seed (overrides the config)")
    common.add_argument("--out", default="run", help="output directory")
    common.add_argument("--model", choices=[k.value for k in SignalKind], help="signal model")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="symlfi", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="generate a dataset file")
    p.add_argument("--split", choices=["ssl", "train", "test"], default="train")
    p.add_argument("--n", type=int)
    p.add_argument("--sigma", type=float, help="noise level (overrides the config)")
    p.add_argument("--name", help="file stem, defaults to the split name")

    p = sub.add_parser("pretrain", parents=[common], help="VICReg pretraining of the embedding")
    p.add_argument("--dataset")
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("train", parents=[common], help="train the embedded flow")
    p.add_argument("--dataset")
    p.add_argument("--encoder")
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("train-baseline", parents=[common], help="train the raw-data baseline flow")
    p.add_argument("--dataset")
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("infer", parents=[common], help="posterior samples for one series")
    p.add_argument("--flow")
    p.add_argument("--data", help="dataset file holding the series")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--truth", "--simulate-truth", dest="truth", help="simulate a series from 'a,b' instead")
    p.add_argument("--shift", type=float, default=0.0)
    p.add_argument("--n-samples", type=int)
    p.add_argument("--oracle", action="store_true", help="compare against the grid posterior")

    p = sub.add_parser("calibrate", parents=[common], help="P-P calibration over simulated instances")
    p.add_argument("--flow")
    p.add_argument("--n-instances", type=int)
    p.add_argument("--n-samples", type=int)

    p = sub.add_parser("crb", parents=[common], help="Cramer-Rao widths")
    p.add_argument("--params", help="'a,b'")

    p = sub.add_parser("complexity", parents=[common], help="parameter and MAC counts")
    p.add_argument("--checkpoints", nargs="*")
    p.add_argument("--batch", type=int, default=1000)

    sub.add_parser("verify", parents=[common], help="re-check manifest checksums")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    start = time.perf_counter()
    try:
        cfg = load_config(args.config, {"seed": args.seed, "kind": args.model})
        man = COMMANDS[args.command](args, cfg)
        if man is not None:
            man.args = {k: str(v) if isinstance(v, Path) else v for k, v in sorted(vars(args).items())
                        if k not in ("verbose", "command")}
            man.wall_clock_s = round(time.perf_counter() - start, 3)
            man.write(Path(args.out))
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (dc.NonFiniteError, FloatingPointError) as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as err:
        print(f"I/O error: {err}", file=sys.stderr)
        return EXIT_IO
    except ValueError as err:
        print(f"invalid input: {err}", file=sys.stderr)
        return EXIT_CONFIG
    return 0


if __name__ == "__main__":
    sys.exit(main())
