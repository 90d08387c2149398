"""Configured runs, reports and multi-seed sweeps.

A run is fully determined by its :class:`TrainConfig`: the dataset comes
from the dataset spec (with its own seed, so every training seed sees the
same task) and the training seed drives initialization, shuffling and
stochastic rounding.
"""

import csv
import io
import json
import math
import os
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.stats import spearmanr

from . import nn
from .accounting import EnergyLedger, param_memory, replay_energy
from .controller import BitwidthHistory, PolicyConfig, fit, fit_float
from .data import generate_synthetic, load_idx_dataset
from .exceptions import ConfigError, DomainError
from .quant import RoundingMode
from .validation import check_bitwidth

REPORT_FILE = "report.json"
HISTORY_FILE = "bitwidth_history.csv"
TIMING_FILE = "timing.json"
SWEEP_FILE = "sweep.csv"
SWEEP_RUNS_FILE = "sweep_runs.csv"
SWEEP_SUMMARY_FILE = "sweep.json"

DEFAULT_SEEDS = 5

_CONFIG_KEYS = ("dataset", "model", "lr", "batch_size", "epochs", "initial_bitwidth", "policy",
                "rounding", "seed", "act_bits", "grad_bits", "reduction", "overflow")
_SYNTHETIC_KEYS = {"kind", "n_classes", "n_features", "n_samples", "noise", "seed",
                   "clusters_per_class", "labels"}
_IDX_KEYS = {"kind", "images", "labels", "seed", "flatten", "limit"}


def _is_int(x):
    return isinstance(x, (int, np.integer)) and not isinstance(x, bool)


@dataclass(frozen=True)
class TrainConfig:
    """Everything needed to reproduce one training run.

    ``dataset`` is ``{"kind": "synthetic", ...generate_synthetic kwargs}`` or
    ``{"kind": "idx", "images": path, "labels": path}``.  ``model`` is a list
    of layer specs as accepted by :func:`rct.nn.build_layers`.
    """

    dataset: dict
    model: list
    lr: float
    batch_size: int
    epochs: int
    initial_bitwidth: int = 8
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    rounding: str = "stochastic"
    seed: int = 0
    act_bits: int = nn.DEFAULT_ACT_BITS
    grad_bits: int = 32
    reduction: str = "mean"
    overflow: str = "expand"

    def __post_init__(self):
        try:
            self._validate()
        except ConfigError:
            raise
        except (DomainError, TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def _validate(self):
        kind = self.dataset.get("kind") if isinstance(self.dataset, dict) else None
        if kind == "synthetic":
            extra = set(self.dataset) - _SYNTHETIC_KEYS
            n = self.dataset.get("n_samples", 2000)
        elif kind == "idx":
            extra = set(self.dataset) - _IDX_KEYS
            if "images" not in self.dataset or "labels" not in self.dataset:
                raise ConfigError("idx dataset needs 'images' and 'labels' paths")
            n = self.dataset.get("limit")
        else:
            raise ConfigError("dataset.kind must be 'synthetic' or 'idx'")
        if extra:
            raise ConfigError(f"unknown dataset keys: {sorted(extra)}")
        if not isinstance(self.model, (list, tuple)) or not self.model:
            raise ConfigError("model must be a non-empty list of layer specs")
        if not all(isinstance(s, dict) for s in self.model):
            raise ConfigError("every model entry must be an object")
        if not (isinstance(self.lr, (int, float)) and math.isfinite(self.lr) and self.lr > 0):
            raise ConfigError(f"lr must be a positive number, got {self.lr!r}")
        if not _is_int(self.batch_size) or self.batch_size < 1:
            raise ConfigError(f"batch_size must be a positive integer, got {self.batch_size!r}")
        if n is not None and self.batch_size > n:
            raise ConfigError(f"batch_size {self.batch_size} exceeds n_samples {n}")
        if not _is_int(self.epochs) or self.epochs < 0:
            raise ConfigError(f"epochs must be a non-negative integer, got {self.epochs!r}")
        check_bitwidth(self.initial_bitwidth, "initial_bitwidth")
        if not isinstance(self.policy, PolicyConfig):
            raise ConfigError("policy must be a PolicyConfig")
        RoundingMode(self.rounding)
        if not _is_int(self.seed) or not 0 <= self.seed < 2 ** 64:
            raise ConfigError(f"seed must be an integer in [0, 2**64), got {self.seed!r}")
        if self.act_bits is not None:
            check_bitwidth(self.act_bits, "act_bits")
        check_bitwidth(self.grad_bits, "grad_bits")
        if self.reduction not in ("mean", "sum"):
            raise ConfigError(f"reduction must be 'mean' or 'sum', got {self.reduction!r}")
        if self.overflow not in ("saturate", "expand"):
            raise ConfigError(f"overflow must be 'saturate' or 'expand', got {self.overflow!r}")

    @classmethod
    def from_dict(cls, d):
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(d) - set(_CONFIG_KEYS)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        missing = {"dataset", "model", "lr", "batch_size", "epochs"} - set(d)
        if missing:
            raise ConfigError(f"missing config keys: {sorted(missing)}")
        d = dict(d)
        try:
            d["policy"] = PolicyConfig.from_dict(d.get("policy", {}))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"policy: {exc}") from exc
        return cls(**d)

    def to_dict(self):
        d = {key: getattr(self, key) for key in _CONFIG_KEYS}
        d["dataset"] = dict(self.dataset)
        d["model"] = [dict(s) for s in self.model]
        d["policy"] = self.policy.to_dict()
        return d

    def with_policy(self, **changes):
        return replace(self, policy=replace(self.policy, **changes))

    def policy_off(self):
        """Same run with the bitwidth policy disabled."""
        p = self.policy
        return replace(self, policy=PolicyConfig.disabled(k_min=p.k_min, k_max=p.k_max,
                                                          interval=p.interval,
                                                          update_eps=p.update_eps))


def load_config(path):
    """Read a JSON config; relative idx paths resolve against the config's directory."""
    try:
        with open(path, encoding="utf-8") as f:
            raw = json.load(f)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    ds = raw.get("dataset") if isinstance(raw, dict) else None
    if isinstance(ds, dict) and ds.get("kind") == "idx":
        base = os.path.dirname(os.path.abspath(path))
        raw["dataset"] = dict(ds, **{k: os.path.join(base, ds[k])
                                     for k in ("images", "labels") if k in ds})
    return TrainConfig.from_dict(raw)


def load_dataset(spec):
    spec = dict(spec)
    kind = spec.pop("kind")
    if kind == "synthetic":
        return generate_synthetic(**spec)
    return load_idx_dataset(spec["images"], spec["labels"], seed=spec.get("seed", 0),
                            flatten=spec.get("flatten", False), limit=spec.get("limit"))


def _rngs(seed):
    init, train = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(init), np.random.default_rng(train)


def _accuracy(model, X, y, **kw):
    if len(X) == 0:
        return 0.0
    return float((nn.predict(model, X, **kw) == y).mean())


@dataclass
class RunReport:
    """Outcome of one run.  ``model`` and the wall-clock time are not serialized."""

    config: TrainConfig
    final_accuracy: float
    train_accuracy: float
    per_layer_bitwidth: dict
    weighted_avg_bitwidth: float
    energy: EnergyLedger
    memory: object
    history: BitwidthHistory
    losses: list
    n_train: int
    input_shape: tuple
    initial_bitwidths: dict
    wall_clock_seconds: float = 0.0
    model: object = None

    def to_dict(self):
        return {
            "config": self.config.to_dict(),
            "seed": self.config.seed,
            "final_accuracy": self.final_accuracy,
            "train_accuracy": self.train_accuracy,
            "per_layer_bitwidth": dict(self.per_layer_bitwidth),
            "weighted_avg_bitwidth": self.weighted_avg_bitwidth,
            "energy": self.energy.to_dict(),
            "memory": self.memory.to_dict(),
            "loss_per_epoch": list(self.losses),
            "n_train": self.n_train,
            "input_shape": list(self.input_shape),
            "initial_bitwidths": dict(self.initial_bitwidths),
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def write(self, out_dir):
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, REPORT_FILE), "w", encoding="utf-8", newline="\n") as f:
            f.write(self.to_json())
        self.history.write_csv(os.path.join(out_dir, HISTORY_FILE))
        with open(os.path.join(out_dir, TIMING_FILE), "w", encoding="utf-8") as f:
            json.dump({"wall_clock_seconds": self.wall_clock_seconds}, f)
            f.write("\n")


def run(config, out_dir=None, dataset=None):
    """Train with the bitwidth policy as configured; optionally write artifacts.

    If training raises, the bitwidth history gathered so far is still
    written to ``out_dir`` before the exception propagates.
    """
    start = time.perf_counter()
    data = dataset if dataset is not None else load_dataset(config.dataset)
    init_rng, train_rng = _rngs(config.seed)
    layers = nn.build_layers(config.model, data.input_shape)
    model = nn.quantize_model(layers, data.input_shape, nn.init_weights(layers, init_rng),
                              config.initial_bitwidth, config.act_bits)
    initial = model.bitwidths()
    history = BitwidthHistory()
    ledger = EnergyLedger(act_bits=config.act_bits, grad_bits=config.grad_bits)
    try:
        model, history, losses = fit(
            model, data.X_train, data.y_train, lr=config.lr, batch_size=config.batch_size,
            epochs=config.epochs, cfg=config.policy,
            rounding=RoundingMode(config.rounding, config.seed), rng=train_rng,
            history=history, ledger=ledger, reduction=config.reduction,
            overflow=config.overflow)
    except BaseException:
        if out_dir is not None:
            os.makedirs(out_dir, exist_ok=True)
            history.write_csv(os.path.join(out_dir, HISTORY_FILE))
        raise
    memory = param_memory(model)
    report = RunReport(
        config=config,
        final_accuracy=_accuracy(model, data.X_test, data.y_test),
        train_accuracy=_accuracy(model, data.X_train, data.y_train),
        per_layer_bitwidth=model.bitwidths(),
        weighted_avg_bitwidth=memory.weighted_avg_bitwidth,
        energy=ledger,
        memory=memory,
        history=history,
        losses=losses,
        n_train=len(data.X_train),
        input_shape=tuple(data.input_shape),
        initial_bitwidths=initial,
        model=model,
    )
    report.wall_clock_seconds = time.perf_counter() - start
    if out_dir is not None:
        report.write(out_dir)
    return report


@dataclass
class FloatReport:
    final_accuracy: float
    train_accuracy: float
    energy: EnergyLedger
    losses: list
    params: dict


def run_float(config, dataset=None):
    """Float64 SGD on the same data, initialization and batch order as :func:`run`."""
    data = dataset if dataset is not None else load_dataset(config.dataset)
    init_rng, train_rng = _rngs(config.seed)
    layers = nn.build_layers(config.model, data.input_shape)
    params = nn.init_weights(layers, init_rng)
    ledger = EnergyLedger(act_bits=None, grad_bits=32)
    model, params, losses = fit_float(
        layers, data.input_shape, params, data.X_train, data.y_train, lr=config.lr,
        batch_size=config.batch_size, epochs=config.epochs, rng=train_rng, ledger=ledger,
        reduction=config.reduction)
    kw = {"weights": params, "act_bits": None}
    return FloatReport(_accuracy(model, data.X_test, data.y_test, **kw),
                       _accuracy(model, data.X_train, data.y_train, **kw),
                       ledger, losses, params)


def step_batches(n_train, batch_size, epochs):
    full, rest = divmod(n_train, batch_size)
    per_epoch = [batch_size] * full + ([rest] if rest else [])
    return per_epoch * epochs


def training_energy_report(run_or_dir):
    """Recompute a run's energy ledger from its config and bitwidth history alone.

    Accepts a :class:`RunReport` or a directory written by :func:`run`.
    """
    if isinstance(run_or_dir, RunReport):
        report = run_or_dir.to_dict()
        history = run_or_dir.history
    else:
        with open(os.path.join(run_or_dir, REPORT_FILE), encoding="utf-8") as f:
            report = json.load(f)
        history = BitwidthHistory.read_csv(os.path.join(run_or_dir, HISTORY_FILE))
    config = TrainConfig.from_dict(report["config"])
    shape = tuple(report["input_shape"])
    skeleton = nn.Model(nn.build_layers(config.model, shape), shape)
    sizes = {f"{layer.name}.{p}": int(np.prod(s))
             for layer in skeleton.param_layers for p, s in layer.param_shapes().items()}
    return replay_energy(history, report["initial_bitwidths"],
                         step_batches(report["n_train"], config.batch_size, config.epochs),
                         skeleton.layer_macs(1), sizes, config.act_bits, config.grad_bits)


def rank_trend(x, y):
    """Spearman correlation of ``y`` against ``x``; 0.0 when either side is constant."""
    if len(x) < 2:
        return 0.0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        rho = spearmanr(x, y)[0]
    return 0.0 if np.isnan(rho) else float(rho)


@dataclass
class SweepResult:
    """Per-value medians over seeds, plus the individual runs behind them."""

    kind: str
    key: str
    columns: tuple
    rows: list
    runs: list
    summary: dict

    def column(self, name):
        return [row[name] for row in self.rows]

    @staticmethod
    def _csv(columns, rows):
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        for row in rows:
            w.writerow({c: repr(v) if isinstance(v, float) else v for c, v in row.items()})
        return buf.getvalue()

    def to_csv(self):
        return self._csv(self.columns, self.rows)

    def write(self, out_dir):
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, SWEEP_FILE), "w", encoding="utf-8", newline="") as f:
            f.write(self.to_csv())
        run_cols = (self.key, "seed") + _RUN_FIELDS
        with open(os.path.join(out_dir, SWEEP_RUNS_FILE), "w", encoding="utf-8", newline="") as f:
            f.write(self._csv(run_cols, self.runs))
        with open(os.path.join(out_dir, SWEEP_SUMMARY_FILE), "w", encoding="utf-8") as f:
            json.dump({"kind": self.kind, **self.summary}, f, indent=2)
            f.write("\n")


_RUN_FIELDS = ("accuracy", "weighted_avg_bitwidth", "gemm_fp32_mac_equiv",
               "movement_fp32_param_equiv")


def _summarize(job):
    config, out_dir = job
    r = run(config, out_dir)
    return {"accuracy": r.final_accuracy,
            "weighted_avg_bitwidth": r.weighted_avg_bitwidth,
            "gemm_fp32_mac_equiv": r.energy.gemm,
            "movement_fp32_param_equiv": r.energy.movement}


def _sweep(kind, key, base, values, make_config, seeds, jobs, out_dir):
    values = list(values)
    if not values:
        raise DomainError(f"{kind}: need at least one value")
    if seeds is None:
        seeds = [base.seed + i for i in range(DEFAULT_SEEDS)]
    grid = [(v, s) for v in values for s in seeds]
    jobs_in = [(make_config(replace(base, seed=s), v),
                None if out_dir is None else os.path.join(out_dir, "runs", f"{key}={v}_seed={s}"))
               for v, s in grid]
    if jobs and jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_summarize, jobs_in))
    else:
        results = [_summarize(j) for j in jobs_in]
    runs = [{key: v, "seed": s, **res} for (v, s), res in zip(grid, results)]
    medians = []
    for v in values:
        sel = [r for r in runs if r[key] == v]
        medians.append({f: float(np.median([r[f] for r in sel])) for f in _RUN_FIELDS})
    return values, runs, medians


def sweep_tmin(base, values, seeds=None, jobs=1, out_dir=None):
    """Accuracy, energy and memory as functions of ``t_min`` (medians over seeds)."""
    values = [float(v) for v in values]
    vals, runs, med = _sweep("sweep_tmin", "t_min", base, values,
                             lambda c, v: c.with_policy(t_min=v), seeds, jobs, out_dir)
    rows = [{"t_min": v, "accuracy": m["accuracy"],
             "gemm_fp32_mac_equiv": m["gemm_fp32_mac_equiv"],
             "movement_fp32_param_equiv": m["movement_fp32_param_equiv"],
             "weighted_avg_bitwidth": m["weighted_avg_bitwidth"],
             "normalized_memory": m["weighted_avg_bitwidth"] / 32}
            for v, m in zip(vals, med)]
    summary = {"accuracy_trend": rank_trend(vals, [r["accuracy"] for r in rows]),
               "memory_trend": rank_trend(vals, [r["weighted_avg_bitwidth"] for r in rows])}
    result = SweepResult("tmin", "t_min", tuple(rows[0]), rows, runs, summary)
    if out_dir is not None:
        result.write(out_dir)
    return result


def sweep_init_bitwidth(base, values, seeds=None, jobs=1, out_dir=None):
    """Final accuracy as a function of the initial bitwidth; reports the spread."""
    values = [check_bitwidth(v, "k_init") for v in values]
    vals, runs, med = _sweep("sweep_init", "k_init", base, values,
                             lambda c, v: replace(c, initial_bitwidth=v), seeds, jobs, out_dir)
    rows = [{"k_init": v, "final_accuracy": m["accuracy"],
             "weighted_avg_bitwidth": m["weighted_avg_bitwidth"]} for v, m in zip(vals, med)]
    acc = [r["final_accuracy"] for r in rows]
    result = SweepResult("init", "k_init", tuple(rows[0]), rows, runs,
                         {"spread": max(acc) - min(acc)})
    if out_dir is not None:
        result.write(out_dir)
    return result


def sweep_batch_size(base, values, seeds=None, jobs=1, out_dir=None):
    """Final weighted average bitwidth as a function of batch size."""
    for v in values:
        if not _is_int(v) or v < 1:
            raise DomainError(f"batch sizes must be positive integers, got {v!r}")
    vals, runs, med = _sweep("sweep_batch", "batch_size", base, [int(v) for v in values],
                             lambda c, v: replace(c, batch_size=v), seeds, jobs, out_dir)
    rows = [{"batch_size": v, "final_avg_bitwidth": m["weighted_avg_bitwidth"],
             "accuracy": m["accuracy"]} for v, m in zip(vals, med)]
    summary = {"bitwidth_trend": rank_trend(vals, [r["final_avg_bitwidth"] for r in rows])}
    result = SweepResult("batch", "batch_size", tuple(rows[0]), rows, runs, summary)
    if out_dir is not None:
        result.write(out_dir)
    return result
