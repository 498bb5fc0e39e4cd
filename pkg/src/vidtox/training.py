"""Adam with cosine annealing, dataset splits, single runs, multi-run
experiments and ablation sweeps."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Optional, Sequence

import numpy as np

from vidtox import autodiff as ad
from vidtox.metrics import accuracy, weighted_f1
from vidtox.model import VARIANTS, ConfigError, Model, ModelConfig, save_checkpoint
from vidtox.records import NUM_CLASSES, UtteranceRecord
from vidtox.seeding import derive_rng
from vidtox.text import build_vocab

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 2
    epochs: int = 30
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr_min: float = 0.0
    ratios: tuple = (0.8, 0.1, 0.1)
    n_runs: int = 10
    seed: int = 0
    clip_norm: Optional[float] = 5.0
    workers: int = 1

    def __post_init__(self):
        self.ratios = tuple(float(r) for r in self.ratios)
        self.validate()

    def validate(self):
        if len(self.ratios) != 3 or min(self.ratios) < 0 or abs(sum(self.ratios) - 1.0) > 1e-9:
            raise ConfigError(f"split ratios must be three nonnegative numbers summing to 1, got {self.ratios}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.n_runs < 1:
            raise ConfigError("n_runs must be >= 1")
        if self.lr < 0 or self.lr_min < 0:
            raise ConfigError("learning rates must be nonnegative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("Adam decay rates must lie in [0, 1)")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ratios"] = list(self.ratios)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


# -- optimisation ----------------------------------------------------------


def cosine_lr(step: int, total_steps: int, lr_max: float, lr_min: float = 0.0) -> float:
    if total_steps < 1:
        raise ValueError("total_steps must be >= 1")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * step / total_steps))


class Adam:
    """Adam with bias correction; zeroes gradients after every step."""

    def __init__(self, params: Sequence[ad.Parameter], beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr: float) -> None:
        missing = [getattr(p, "name", "?") for p in self.params if p.grad is None]
        if missing:
            raise ValueError(f"no gradient for parameters {missing}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            if lr != 0.0:
                p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype, copy=False)
            p.grad = np.zeros_like(p.data)


def adam_step(params, state: Adam, lr: float) -> None:
    state.step(lr)


def clip_grad_norm(params: Sequence[ad.Parameter], max_norm: float) -> float:
    total = math.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum()) for p in params))
    if total > max_norm:
        s = max_norm / total
        for p in params:
            p.grad *= s
    return total


# -- data splits -------------------------------------------------------------


def split_sizes(n: int, ratios) -> tuple[int, int, int]:
    n_val = math.floor(ratios[1] * n + 1e-9)
    n_test = math.floor(ratios[2] * n + 1e-9)
    return n - n_val - n_test, n_val, n_test


def split_dataset(records: Sequence, ratios=(0.8, 0.1, 0.1), seed: int = 0):
    """Seeded shuffle into (train, val, test); val/test take floor(ratio * N)."""
    if len(records) < 3:
        raise ValueError(f"need at least 3 records to split, got {len(records)}")
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ValueError(f"invalid split ratios {ratios}")
    n_train, n_val, n_test = split_sizes(len(records), ratios)
    order = derive_rng(seed, "split").permutation(len(records))
    shuffled = [records[i] for i in order]
    return shuffled[:n_train], shuffled[n_train : n_train + n_val], shuffled[n_train + n_val :]


def split_checksum(train, val, test) -> str:
    h = hashlib.sha256()
    for name, part in (("train", train), ("val", val), ("test", test)):
        h.update(name.encode())
        for rid in sorted(r.id for r in part):
            h.update(b"\0" + rid.encode())
    return h.hexdigest()[:16]


# -- single run ---------------------------------------------------------------


def evaluate(model: Model, samples) -> dict:
    """``{task: {"accuracy": .., "f1": ..}}`` over prepared samples."""
    preds = model.predict(samples)
    out = {}
    for task, yhat in preds.items():
        y = np.array([s.labels[task] for s in samples])
        out[task] = {"accuracy": accuracy(y, yhat), "f1": weighted_f1(y, yhat, NUM_CLASSES[task])}
    return out


def selection_task(config: ModelConfig) -> str:
    return "toxicity" if "toxicity" in config.tasks else config.tasks[0]


@dataclass
class RunResult:
    seed: int
    split_checksum: str
    test: dict
    val_at_selection: dict
    best_epoch: int
    loss_curve: list
    beta: Optional[list]
    variant: str = "full"

    def to_json(self) -> dict:
        return asdict(self)


def train(
    records: Sequence[UtteranceRecord],
    model_config: ModelConfig,
    train_config: TrainConfig,
    seed: Optional[int] = None,
) -> tuple[Model, RunResult]:
    """One training run; returns the best-on-validation model and its result."""
    seed = train_config.seed if seed is None else seed
    tr, va, te = split_dataset(records, train_config.ratios, seed)
    if not tr:
        raise ValueError("training split is empty")
    vocab = build_vocab([r.transcript for r in tr], model_config.max_vocab)
    model = Model(replace(model_config, seed=seed, vocab_size=0), vocab)
    train_s = [model.prepare(r) for r in tr]
    val_s = [model.prepare(r) for r in va] or train_s
    test_s = [model.prepare(r) for r in te] or val_s
    params = model.parameters()
    opt = Adam(params, train_config.beta1, train_config.beta2, train_config.eps)
    bs = train_config.batch_size
    steps_per_epoch = math.ceil(len(train_s) / bs)
    total_steps = max(1, train_config.epochs * steps_per_epoch)
    sel = selection_task(model.config)

    best_state = model.state()
    best_val = evaluate(model, val_s)
    best_f1, best_epoch = best_val[sel]["f1"], 0
    curve = []
    step = 0
    for epoch in range(1, train_config.epochs + 1):
        order = derive_rng(seed, "shuffle", epoch).permutation(len(train_s))
        running = 0.0
        for start in range(0, len(order), bs):
            batch = order[start : start + bs]
            for i in batch:
                loss = model.loss(train_s[i])
                value = loss.item()
                if not math.isfinite(value):
                    raise DivergenceError(
                        f"non-finite loss {value} at epoch {epoch}, step {step}, sample {train_s[i].id}"
                    )
                running += value
                ad.backward(ad.scale(loss, 1.0 / len(batch)))
            if train_config.clip_norm:
                clip_grad_norm(params, train_config.clip_norm)
            opt.step(cosine_lr(step, total_steps, train_config.lr, train_config.lr_min))
            step += 1
        curve.append(running / len(train_s))
        val = evaluate(model, val_s)
        log.debug("seed %d epoch %d loss %.4f val %s f1 %.4f", seed, epoch, curve[-1], sel, val[sel]["f1"])
        if val[sel]["f1"] > best_f1:
            best_f1, best_epoch, best_val = val[sel]["f1"], epoch, val
            best_state = model.state()
    for name, arr in best_state.items():
        model.params[name].data[...] = arr
    beta = model.beta()
    result = RunResult(
        seed=seed,
        split_checksum=split_checksum(tr, va, te),
        test=evaluate(model, test_s),
        val_at_selection=best_val,
        best_epoch=best_epoch,
        loss_curve=curve,
        beta=None if beta is None else [float(b) for b in beta],
    )
    return model, result


# -- experiments --------------------------------------------------------------


@dataclass
class Aggregate:
    runs: list = field(default_factory=list)
    variant: str = "full"

    def metric_runs(self, task: str, metric: str) -> list:
        return [r.test[task][metric] for r in self.runs]

    def summary(self) -> dict:
        tasks = self.runs[0].test.keys()
        out = {}
        for task in tasks:
            out[task] = {}
            for metric in ("accuracy", "f1"):
                vals = np.array(self.metric_runs(task, metric))
                out[task][metric] = {
                    "mean": float(vals.mean()),
                    "std": float(vals.std(ddof=1)) if vals.size > 1 else 0.0,
                    "median": float(np.median(vals)),
                    "runs": [float(v) for v in vals],
                }
        return out

    def to_json(self) -> dict:
        return {
            "variant": self.variant,
            "n_runs": len(self.runs),
            "seeds": [r.seed for r in self.runs],
            "split_checksums": [r.split_checksum for r in self.runs],
            "metrics": self.summary(),
        }


def _run_one(args):
    records, model_config, train_config, seed, out_dir = args
    model, result = train(records, model_config, train_config, seed=seed)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        save_checkpoint(model, os.path.join(out_dir, "checkpoint"))
        with open(os.path.join(out_dir, "result.json"), "w") as fh:
            json.dump(result.to_json(), fh, indent=2, sort_keys=True)
    return result


def run_experiment(
    records: Sequence[UtteranceRecord],
    model_config: ModelConfig,
    train_config: TrainConfig,
    out_dir: Optional[str] = None,
    variant: str = "full",
) -> Aggregate:
    """``n_runs`` runs; run ``i`` reseeds both split and init with ``seed + i``."""
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "config.json"), "w") as fh:
            json.dump({"model": model_config.to_dict(), "train": train_config.to_dict(), "variant": variant}, fh, indent=2, sort_keys=True)
    jobs = [
        (records, model_config, train_config, train_config.seed + i, None if out_dir is None else os.path.join(out_dir, f"run_{i:02d}"))
        for i in range(train_config.n_runs)
    ]
    if train_config.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=train_config.workers) as pool:
            results = list(pool.map(_run_one, jobs))
    else:
        results = [_run_one(j) for j in jobs]
    for r in results:
        r.variant = variant
    agg = Aggregate(results, variant)
    if out_dir is not None:
        with open(os.path.join(out_dir, "aggregate.json"), "w") as fh:
            json.dump(agg.to_json(), fh, indent=2, sort_keys=True)
    return agg


ABLATION_COLUMNS = ("variant", "task", "accuracy_mean", "accuracy_std", "f1_mean", "f1_std")


def ablation_sweep(
    records: Sequence[UtteranceRecord],
    model_config: ModelConfig,
    train_config: TrainConfig,
    variants: Sequence[str] = ("full", "no_gf", "no_mhca", "no_both"),
    out_dir: Optional[str] = None,
) -> dict:
    """One :func:`run_experiment` per variant with identical seeds."""
    for v in variants:
        if v not in VARIANTS:
            raise ConfigError(f"unknown variant {v!r}; choose from {', '.join(VARIANTS)}")
    table = {}
    for v in variants:
        sub = None if out_dir is None else os.path.join(out_dir, v)
        table[v] = run_experiment(records, model_config.variant(v), train_config, sub, variant=v)
    if out_dir is not None:
        write_ablation_table(table, os.path.join(out_dir, "ablation_table.csv"))
    return table


def ablation_rows(table: dict) -> list[dict]:
    rows = []
    for v, agg in table.items():
        for task, m in agg.summary().items():
            rows.append(
                {
                    "variant": v,
                    "task": task,
                    "accuracy_mean": m["accuracy"]["mean"],
                    "accuracy_std": m["accuracy"]["std"],
                    "f1_mean": m["f1"]["mean"],
                    "f1_std": m["f1"]["std"],
                }
            )
    return rows


def write_ablation_table(table: dict, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=ABLATION_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in ablation_rows(table):
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})
