import csv
import json
import os
import shutil
import subprocess
import sys

import pytest

from vidtox import cli
from vidtox.data import DEFAULT_AGREEMENT, GeneratorSpec, generate_dataset, simulate_annotations, write_manifest
from vidtox.cli import main

DIMS = {"sl_v": 6, "d_v": 5, "sl_a": 7, "d_a": 4}
TINY_MODEL = {"d_t": 8, "sl_prime": 4, "sl_t": 8, "heads": 2, "depth": 1, **DIMS}


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    # small feature dimensions keep the CLI tests fast
    out = tmp_path_factory.mktemp("corpus")
    recs = simulate_annotations(generate_dataset(GeneratorSpec(total=50, seed=0, **DIMS)), DEFAULT_AGREEMENT)
    write_manifest(recs, out)
    return out


def _config(tmp_path, manifest, **train):
    cfg = {"manifest": str(manifest), "model": TINY_MODEL, "train": {"epochs": 1, "n_runs": 1, **train}}
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return path


def test_gen_data_reference_stats(tmp_path, capsys):
    assert main(["gen-data", "--preset", "toxcmm-marginals", "--total", "4021", "--out", str(tmp_path / "d")]) == 0
    stats = json.loads((tmp_path / "d" / "stats.json").read_text())
    assert stats["histograms"] == {"toxicity": [2324, 1697], "severity": [2324, 834, 863], "sentiment": [469, 1401, 2151]}
    assert (tmp_path / "d" / "stats.txt").read_text().startswith("records")
    assert "2324 / 1697" in capsys.readouterr().out
    for t, k in stats["kappa"].items():
        assert abs(k - {"toxicity": 0.74, "sentiment": 0.67, "severity": 0.64}[t]) <= 0.05


def test_gen_data_is_byte_identical(tmp_path):
    for name in ("a", "b"):
        assert main(["gen-data", "--preset", "crossmodal-xor", "--total", "40", "--seed", "3", "--out", str(tmp_path / name)]) == 0
    assert (tmp_path / "a" / "manifest.jsonl").read_bytes() == (tmp_path / "b" / "manifest.jsonl").read_bytes()
    feats = sorted(os.listdir(tmp_path / "a" / "features"))
    assert feats == sorted(os.listdir(tmp_path / "b" / "features"))
    for f in feats[:10]:
        assert (tmp_path / "a" / "features" / f).read_bytes() == (tmp_path / "b" / "features" / f).read_bytes()


def test_gen_data_unknown_preset(tmp_path, capsys):
    assert main(["gen-data", "--preset", "imdb", "--out", str(tmp_path)]) == 1
    assert "choose from" in capsys.readouterr().err


def test_missing_arguments_exit_1(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["train"])
    assert exc.value.code == 1
    assert "usage" in capsys.readouterr().err


def test_train_writes_declared_files(tmp_path, corpus, capsys):
    cfg = _config(tmp_path, corpus)
    out = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--out", str(out)]) == 0
    for f in ("resolved_config.json", "config.json", "aggregate.json", "run.log", "run_00/result.json", "run_00/checkpoint/config.json"):
        assert (out / f).exists(), f
    resolved = json.loads((out / "resolved_config.json").read_text())
    assert resolved["train"]["lr"] == 1e-3 and resolved["model"]["depth"] == 1
    assert "toxicity" in json.loads(capsys.readouterr().out)


def test_train_seed_override_is_deterministic(tmp_path, corpus):
    cfg = _config(tmp_path, corpus)
    for name in ("a", "b"):
        assert main(["train", "--config", str(cfg), "--out", str(tmp_path / name), "--seed", "7"]) == 0
    assert json.loads((tmp_path / "a" / "resolved_config.json").read_text())["train"]["seed"] == 7
    for f in ("aggregate.json", "run_00/result.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_train_missing_manifest(tmp_path, capsys):
    cfg = _config(tmp_path, tmp_path / "nowhere")
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "r")]) == 1
    assert "nowhere" in capsys.readouterr().err
    assert not (tmp_path / "r").exists()


@pytest.mark.parametrize(
    "cfg",
    [{"model": {"heads": 3}}, {"train": {"ratios": [0.5, 0.5]}}, {"colour": 1}, {"model": {"tasks": ["humour"]}}],
)
def test_train_config_errors_before_training(tmp_path, corpus, cfg, capsys):
    body = {"manifest": str(corpus), **cfg}
    path = tmp_path / "c.json"
    path.write_text(json.dumps(body))
    assert main(["train", "--config", str(path), "--out", str(tmp_path / "r")]) == 1
    assert not (tmp_path / "r").exists()


def test_eval_round_trip_and_mismatch(tmp_path, corpus, capsys):
    cfg = _config(tmp_path, corpus)
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "run")]) == 0
    capsys.readouterr()
    ck = str(tmp_path / "run" / "run_00" / "checkpoint")
    outs = []
    for _ in range(2):
        assert main(["eval", "--checkpoint", ck, "--manifest", str(corpus)]) == 0
        outs.append(json.loads(capsys.readouterr().out))
    assert outs[0] == outs[1] and outs[0]["records"] == 50
    assert set(outs[0]["metrics"]) == {"toxicity", "severity", "sentiment"}

    other = tmp_path / "wide"
    assert main(["gen-data", "--preset", "crossmodal-xor", "--total", "8", "--out", str(other)]) == 0
    capsys.readouterr()
    assert main(["eval", "--checkpoint", ck, "--manifest", str(other)]) == 2
    assert "width" in capsys.readouterr().err


def test_eval_corrupted_checkpoint(tmp_path, corpus, capsys):
    cfg = _config(tmp_path, corpus)
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "run")]) == 0
    ck = tmp_path / "run" / "run_00" / "checkpoint"
    (ck / "params" / "text.embedding.txvf").write_bytes(b"TXVF\x01")
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(ck), "--manifest", str(corpus)]) == 2
    captured = capsys.readouterr()
    assert captured.out == "" and "text.embedding" in captured.err


def test_ablate_four_variants(tmp_path, corpus, capsys):
    cfg = _config(tmp_path, corpus, n_runs=2)
    out = tmp_path / "abl"
    assert main(["ablate", "--config", str(cfg), "--variants", "full,no_gf,no_mhca,no_both", "--out", str(out)]) == 0
    rows = list(csv.DictReader(open(out / "ablation_table.csv")))
    tox = [r for r in rows if r["task"] == "toxicity"]
    assert [r["variant"] for r in tox] == ["full", "no_gf", "no_mhca", "no_both"]
    assert {"accuracy_mean", "accuracy_std", "f1_mean", "f1_std"} <= set(rows[0])
    assert (out / "resolved_config.json").exists() and (out / "no_both" / "aggregate.json").exists()


def test_ablate_unknown_variant(tmp_path, corpus, capsys):
    cfg = _config(tmp_path, corpus)
    assert main(["ablate", "--config", str(cfg), "--variants", "full,no_text", "--out", str(tmp_path / "a")]) == 1
    assert "no_text" in capsys.readouterr().err


def _aggregate(path, runs):
    path.write_text(json.dumps({"metrics": {"toxicity": {"f1": {"runs": runs}}}}))
    return str(path)


def test_significance(tmp_path, capsys):
    a = _aggregate(tmp_path / "a.json", [0.80, 0.81, 0.79, 0.80, 0.82, 0.78, 0.80, 0.81, 0.79, 0.80])
    b = _aggregate(tmp_path / "b.json", [0.95, 0.96, 0.94, 0.95, 0.97, 0.93, 0.95, 0.96, 0.94, 0.95])
    same = cli.cmd_significance(a, a)
    assert same["p"] == 1.0 and same["verdict"] == "not significant"
    assert cli.cmd_significance(a, b)["verdict"] == "significant"
    assert main(["significance", "--runs-a", a, "--runs-b", b, "--metric", "toxicity.f1"]) == 0
    assert json.loads(capsys.readouterr().out)["p"] < 0.05


def test_significance_errors(tmp_path, capsys):
    a = _aggregate(tmp_path / "a.json", [0.8, 0.9])
    one = _aggregate(tmp_path / "one.json", [0.8])
    assert main(["significance", "--runs-a", a, "--runs-b", one]) == 1
    assert "at least 2" in capsys.readouterr().err
    assert main(["significance", "--runs-a", a, "--runs-b", a, "--metric", "severity.f1"]) == 1
    assert "severity.f1" in capsys.readouterr().err


def test_inputs_are_not_mutated(tmp_path, corpus):
    before = (corpus / "manifest.jsonl").read_bytes()
    cfg = _config(tmp_path, corpus)
    cfg_before = cfg.read_bytes()
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "r")]) == 0
    assert (corpus / "manifest.jsonl").read_bytes() == before and cfg.read_bytes() == cfg_before


@pytest.mark.skipif(shutil.which("vidtox") is None, reason="console script not installed")
def test_console_script(tmp_path):
    out = subprocess.run(["vidtox", "gen-data", "--preset", "crossmodal-xor", "--total", "8", "--out", str(tmp_path)],
                         capture_output=True, text=True)
    assert out.returncode == 0 and "records" in out.stdout


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "vidtox.cli", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and "vidtox" in out.stdout
