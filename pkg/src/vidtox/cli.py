"""``vidtox`` command line: gen-data, train, eval, ablate, significance.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from typing import Optional, Sequence

from vidtox import __version__
from vidtox.data import (
    DEFAULT_AGREEMENT,
    PRESETS,
    GeneratorSpec,
    ManifestError,
    corpus_stats,
    format_stats,
    generate_dataset,
    read_manifest,
    simulate_annotations,
    task_kappa,
    write_manifest,
)
from vidtox.metrics import welch_t_test
from vidtox.model import VARIANTS, CheckpointError, ConfigError, ModelConfig, load_checkpoint
from vidtox.training import TrainConfig, ablation_sweep, evaluate, run_experiment

log = logging.getLogger("vidtox")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
ALPHA = 0.05


class UsageError(Exception):
    """Bad flags, config or inputs detected before any work starts."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _dump(obj, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _attach_run_log(out_dir: str) -> logging.Handler:
    handler = logging.FileHandler(os.path.join(out_dir, "run.log"), mode="w", encoding="utf-8")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    logging.getLogger("vidtox").addHandler(handler)
    return handler


# -- config ----------------------------------------------------------------


def load_run_config(path: str, seed: Optional[int] = None) -> dict:
    """Parse and fully validate a run config; returns the resolved form.

    Layout: ``{"manifest": path, "model": {...}, "train": {...}}``. A relative
    manifest path is taken relative to the config file.
    """
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise UsageError(f"{path}: top level must be a JSON object")
    unknown = set(raw) - {"manifest", "model", "train"}
    if unknown:
        raise UsageError(f"{path}: unknown keys {sorted(unknown)}")
    if "manifest" not in raw:
        raise UsageError(f"{path}: missing required key 'manifest'")
    manifest = raw["manifest"]
    if not os.path.isabs(manifest):
        manifest = os.path.join(os.path.dirname(os.path.abspath(path)), manifest)
    train_d = dict(raw.get("train", {}))
    if seed is not None:
        train_d["seed"] = seed
    try:
        model = ModelConfig.from_dict(dict(raw.get("model", {})))
        train = TrainConfig.from_dict(train_d)
    except (ConfigError, TypeError) as exc:
        raise UsageError(f"{path}: {exc}") from None
    if not os.path.exists(os.path.join(manifest, "manifest.jsonl")):
        raise UsageError(f"manifest not found: {os.path.join(manifest, 'manifest.jsonl')}")
    return {"manifest": os.path.abspath(manifest), "model": model, "train": train}


def _resolved_json(cfg: dict, **extra) -> dict:
    out = {"manifest": cfg["manifest"], "model": cfg["model"].to_dict(), "train": cfg["train"].to_dict()}
    out.update(extra)
    return out


# -- subcommands -------------------------------------------------------------


def cmd_gen_data(preset: str, out: str, seed: int = 0, total: Optional[int] = None, cue: Optional[dict] = None) -> dict:
    if preset not in PRESETS:
        raise UsageError(f"unknown preset {preset!r}; choose from {', '.join(PRESETS)}")
    spec = GeneratorSpec(preset=preset, seed=seed)
    if total is not None:
        spec.total = total
    if cue:
        spec.cue_strength = {**spec.cue_strength, **cue}
    try:
        spec.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    records = simulate_annotations(generate_dataset(spec), DEFAULT_AGREEMENT, seed=seed)
    os.makedirs(out, exist_ok=True)
    write_manifest(records, out)
    stats = corpus_stats(records)
    stats["kappa"] = {t: task_kappa(records, t) for t in DEFAULT_AGREEMENT}
    stats["generator"] = {"preset": preset, "seed": seed, "total": spec.total, "cue_strength": spec.cue_strength}
    _dump(stats, os.path.join(out, "stats.json"))
    text = format_stats(stats) + "\n" + "\n".join(f"kappa {t:<10} {k:.4f}" for t, k in stats["kappa"].items()) + "\n"
    with open(os.path.join(out, "stats.txt"), "w", encoding="utf-8") as fh:
        fh.write(text)
    return stats


def cmd_train(config: str, out: str, seed: Optional[int] = None) -> dict:
    cfg = load_run_config(config, seed)
    os.makedirs(out, exist_ok=True)
    _dump(_resolved_json(cfg), os.path.join(out, "resolved_config.json"))
    handler = _attach_run_log(out)
    try:
        records = read_manifest(cfg["manifest"])
        log.info("training on %d records from %s", len(records), cfg["manifest"])
        agg = run_experiment(records, cfg["model"], cfg["train"], out_dir=out)
        log.info("done: %s", json.dumps(agg.summary(), sort_keys=True))
    finally:
        logging.getLogger("vidtox").removeHandler(handler)
        handler.close()
    return agg.to_json()


def cmd_eval(checkpoint: str, manifest: str) -> dict:
    model = load_checkpoint(checkpoint)
    records = read_manifest(manifest)
    samples = [model.prepare(r) for r in records]  # raises on dimension mismatch before any scoring
    return {"records": len(samples), "checkpoint": checkpoint, "manifest": manifest, "metrics": evaluate(model, samples)}


def cmd_ablate(config: str, variants: Sequence[str], out: str, seed: Optional[int] = None) -> dict:
    bad = [v for v in variants if v not in VARIANTS]
    if bad:
        raise UsageError(f"unknown variant(s) {bad}; choose from {', '.join(VARIANTS)}")
    if not variants:
        raise UsageError("no variants given")
    cfg = load_run_config(config, seed)
    os.makedirs(out, exist_ok=True)
    _dump(_resolved_json(cfg, variants=list(variants)), os.path.join(out, "resolved_config.json"))
    handler = _attach_run_log(out)
    try:
        records = read_manifest(cfg["manifest"])
        table = ablation_sweep(records, cfg["model"], cfg["train"], variants, out_dir=out)
    finally:
        logging.getLogger("vidtox").removeHandler(handler)
        handler.close()
    return {v: agg.to_json() for v, agg in table.items()}


def _metric_runs(path: str, metric: str) -> list:
    try:
        with open(path, encoding="utf-8") as fh:
            blob = json.load(fh)
    except FileNotFoundError:
        raise UsageError(f"aggregate file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON ({exc})") from None
    task, _, name = metric.partition(".")
    try:
        runs = blob["metrics"][task][name]["runs"]
    except (KeyError, TypeError):
        raise UsageError(f"{path}: no metric {metric!r} (expected TASK.METRIC, e.g. toxicity.f1)") from None
    if len(runs) < 2:
        raise UsageError(f"{path}: {metric} has {len(runs)} run(s); the t-test needs at least 2")
    return [float(x) for x in runs]


def cmd_significance(runs_a: str, runs_b: str, metric: str = "toxicity.f1") -> dict:
    a, b = _metric_runs(runs_a, metric), _metric_runs(runs_b, metric)
    r = welch_t_test(a, b)
    return {
        "metric": metric,
        "n_a": len(a),
        "n_b": len(b),
        "mean_a": sum(a) / len(a),
        "mean_b": sum(b) / len(b),
        "t": r.t,
        "df": r.df,
        "p": r.p,
        "diverged": r.diverged,
        "alpha": ALPHA,
        "verdict": "significant" if r.p < ALPHA else "not significant",
    }


# -- entry point ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="vidtox", description="Code-mixed video toxicity: data, training and evaluation.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate a synthetic corpus with manifest and stats report")
    g.add_argument("--preset", required=True, help=f"one of: {', '.join(PRESETS)}")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--total", type=int, default=None, help="record count (default: preset size)")
    for m in ("text", "video", "audio"):
        g.add_argument(f"--cue-{m}", type=float, default=None, help=f"{m} cue strength override")

    t = sub.add_parser("train", help="run a multi-run experiment from a JSON config")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True, help="run directory")
    t.add_argument("--seed", type=int, default=None, help="override train.seed")

    e = sub.add_parser("eval", help="print metrics JSON for a checkpoint on a manifest")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--manifest", required=True, help="directory holding manifest.jsonl")

    a = sub.add_parser("ablate", help="train several model variants and write ablation_table.csv")
    a.add_argument("--config", required=True)
    a.add_argument("--variants", default="full,no_gf,no_mhca,no_both", help=f"comma list from: {', '.join(VARIANTS)}")
    a.add_argument("--out", required=True)
    a.add_argument("--seed", type=int, default=None)

    s = sub.add_parser("significance", help="Welch t-test between two aggregate.json files")
    s.add_argument("--runs-a", required=True)
    s.add_argument("--runs-b", required=True)
    s.add_argument("--metric", default="toxicity.f1", help="TASK.METRIC, e.g. toxicity.f1 or severity.accuracy")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.getLogger("vidtox").setLevel(logging.DEBUG if args.verbose else logging.INFO)
    if args.verbose:
        logging.basicConfig(stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "gen-data":
            cue = {m: getattr(args, f"cue_{m}") for m in ("text", "video", "audio") if getattr(args, f"cue_{m}") is not None}
            stats = cmd_gen_data(args.preset, args.out, args.seed, args.total, cue)
            print(format_stats(stats))
        elif args.command == "train":
            agg = cmd_train(args.config, args.out, args.seed)
            print(json.dumps(agg["metrics"], indent=2, sort_keys=True))
        elif args.command == "eval":
            print(json.dumps(cmd_eval(args.checkpoint, args.manifest), indent=2, sort_keys=True))
        elif args.command == "ablate":
            variants = [v.strip() for v in args.variants.split(",") if v.strip()]
            cmd_ablate(args.config, variants, args.out, args.seed)
            with open(os.path.join(args.out, "ablation_table.csv"), encoding="utf-8") as fh:
                sys.stdout.write(fh.read())
        elif args.command == "significance":
            print(json.dumps(cmd_significance(args.runs_a, args.runs_b, args.metric), indent=2, sort_keys=True))
    except UsageError as exc:
        print(f"vidtox {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CheckpointError, ManifestError, FileNotFoundError, ValueError, OSError, RuntimeError) as exc:
        print(f"vidtox {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
