import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vidtox import autodiff as ad
from vidtox.autodiff import Parameter
from vidtox.data import GeneratorSpec, generate_dataset
from vidtox.model import ConfigError, ModelConfig
from vidtox.training import (
    ABLATION_COLUMNS,
    Adam,
    DivergenceError,
    TrainConfig,
    ablation_sweep,
    adam_step,
    clip_grad_norm,
    cosine_lr,
    evaluate,
    run_experiment,
    split_dataset,
    split_sizes,
    train,
)

TINY = ModelConfig(d_t=8, sl_prime=4, sl_t=8, heads=2, depth=1, sl_v=6, d_v=5, sl_a=7, d_a=4)


@pytest.fixture(scope="module")
def small_records():
    return generate_dataset(GeneratorSpec(total=50, seed=2, sl_v=6, d_v=5, sl_a=7, d_a=4))


# --- Adam ---------------------------------------------------------------------


def test_adam_first_step_moves_by_lr():
    p = Parameter(np.array([[1.0]]), "p")
    opt = Adam([p], eps=0.0)
    p.grad[...] = 2.0
    adam_step([p], opt, 0.1)
    assert p.data[0, 0] == pytest.approx(0.9, abs=1e-15)
    assert p.grad[0, 0] == 0.0


def test_adam_zero_gradient_is_a_no_op():
    p = Parameter(np.array([[0.5, -2.0]]), "p")
    opt = Adam([p])
    opt.step(0.1)
    np.testing.assert_array_equal(p.data, [[0.5, -2.0]])


def test_adam_matches_reference_trace_on_quadratic():
    # f(x) = (x - 3)^2, reference Adam written out longhand
    x = Parameter(np.array([[0.0]]), "x")
    opt = Adam([x], 0.9, 0.999, 1e-8)
    rx, m, v = 0.0, 0.0, 0.0
    for t in range(1, 4):
        ad.backward(ad.sum_all(ad.mul(x - 3.0, x - 3.0)))
        opt.step(0.05)
        g = 2 * (rx - 3.0)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        rx -= 0.05 * (m / (1 - 0.9**t)) / (math.sqrt(v / (1 - 0.999**t)) + 1e-8)
        assert x.data[0, 0] == pytest.approx(rx, abs=1e-10)


def test_adam_requires_gradients():
    p = Parameter(np.zeros((1, 1)), "p")
    p.grad = None
    with pytest.raises(ValueError, match="p"):
        Adam([p]).step(0.1)


def test_clip_grad_norm():
    a, b = Parameter(np.zeros((1, 2)), "a"), Parameter(np.zeros((1, 1)), "b")
    a.grad[...] = [[3.0, 0.0]]
    b.grad[...] = [[4.0]]
    assert clip_grad_norm([a, b], 1.0) == pytest.approx(5.0)
    np.testing.assert_allclose(np.concatenate([a.grad[0], b.grad[0]]), [0.6, 0.0, 0.8])
    clip_grad_norm([a, b], 10.0)
    np.testing.assert_allclose(b.grad, [[0.8]])


# --- schedule and splits -------------------------------------------------------


def test_cosine_endpoints():
    assert cosine_lr(0, 10, 1e-3, 1e-5) == pytest.approx(1e-3)
    assert cosine_lr(10, 10, 1e-3, 1e-5) == pytest.approx(1e-5)
    assert cosine_lr(5, 10, 1e-3, 1e-5) == pytest.approx((1e-3 + 1e-5) / 2)
    with pytest.raises(ValueError):
        cosine_lr(11, 10, 1.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 500), st.floats(0, 1), st.floats(0, 1))
def test_cosine_is_nonincreasing(total, lr_max, lr_min):
    lo, hi = sorted((lr_min, lr_max))
    lrs = [cosine_lr(s, total, hi, lo) for s in range(total + 1)]
    assert all(b <= a + 1e-15 for a, b in zip(lrs, lrs[1:]))


def test_split_sizes_for_reference_corpus():
    assert split_sizes(4021, (0.8, 0.1, 0.1)) == (3217, 402, 402)


@settings(max_examples=50, deadline=None)
@given(st.integers(3, 300), st.integers(0, 2**31))
def test_splits_partition_deterministically(n, seed):
    items = [type("R", (), {"id": f"r{i}"})() for i in range(n)]
    tr, va, te = split_dataset(items, (0.8, 0.1, 0.1), seed)
    assert sorted(r.id for r in tr + va + te) == sorted(r.id for r in items)
    assert len(va) == len(te) == math.floor(0.1 * n + 1e-9)
    assert [r.id for r in split_dataset(items, (0.8, 0.1, 0.1), seed)[0]] == [r.id for r in tr]


def test_split_needs_three_records():
    with pytest.raises(ValueError, match="3"):
        split_dataset([1, 2], (0.8, 0.1, 0.1), 0)


@pytest.mark.parametrize(
    "kwargs", [dict(ratios=(0.5, 0.5)), dict(ratios=(0.8, 0.1, 0.2)), dict(batch_size=0), dict(n_runs=0), dict(beta1=1.0), dict(lr=-1)]
)
def test_train_config_validation(kwargs):
    with pytest.raises(ConfigError):
        TrainConfig(**kwargs)


def test_train_config_round_trip():
    tc = TrainConfig(lr=0.01, ratios=[0.6, 0.2, 0.2])
    assert TrainConfig.from_dict(json.loads(json.dumps(tc.to_dict()))) == tc
    with pytest.raises(ConfigError, match="unknown"):
        TrainConfig.from_dict({"learning_rate": 1})


# --- training --------------------------------------------------------------------


def test_zero_lr_freezes_parameters(small_records):
    tc = TrainConfig(lr=0.0, epochs=2, n_runs=1, clip_norm=None)
    model, result = train(small_records, TINY, tc)
    from vidtox.model import Model

    fresh = Model(ModelConfig(**{**TINY.to_dict(), "seed": 0}), model.vocab)
    for name, p in fresh.params.items():
        np.testing.assert_array_equal(model.params[name].data, p.data)
    assert result.best_epoch == 0


def test_same_seed_is_bit_identical(small_records):
    tc = TrainConfig(epochs=2, n_runs=1, seed=3)
    _, a = train(small_records, TINY, tc)
    _, b = train(small_records, TINY, tc)
    assert a.to_json() == b.to_json()


def test_result_contract(small_records):
    _, r = train(small_records, TINY, TrainConfig(epochs=2, seed=1))
    assert len(r.loss_curve) == 2 and all(math.isfinite(x) for x in r.loss_curve)
    assert set(r.test) == {"toxicity", "severity", "sentiment"}
    for m in r.test.values():
        assert 0 <= m["accuracy"] <= 1 and 0 <= m["f1"] <= 1
    assert sum(r.beta) == pytest.approx(3.0, abs=1e-9) and min(r.beta) > 0


def test_learns_a_separable_set():
    # every toxic record carries a toxic text marker and strong audio/video cues
    recs = generate_dataset(GeneratorSpec(total=200, seed=0, cue_strength={"text": 1.0, "video": 8.0, "audio": 8.0}))
    tc = TrainConfig(epochs=30, n_runs=1, ratios=(0.8, 0.1, 0.1))
    model, r = train(recs, ModelConfig(tasks=("toxicity",)), tc)
    tr, _, _ = split_dataset(recs, tc.ratios, 0)
    acc = evaluate(model, [model.prepare(x) for x in tr])["toxicity"]["accuracy"]
    assert r.loss_curve[-1] < r.loss_curve[0]
    assert acc >= 0.95


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_reported(small_records):
    with pytest.raises(DivergenceError, match="epoch 1"):
        train(small_records, TINY, TrainConfig(lr=1e30, epochs=1, clip_norm=None))


def test_run_experiment_layout(tmp_path, small_records):
    agg = run_experiment(small_records, TINY, TrainConfig(epochs=1, n_runs=2, seed=5), out_dir=str(tmp_path))
    assert [r.seed for r in agg.runs] == [5, 6]
    for f in ("config.json", "aggregate.json", "run_00/result.json", "run_01/checkpoint/params.json"):
        assert (tmp_path / f).exists(), f
    blob = json.loads((tmp_path / "aggregate.json").read_text())
    acc = blob["metrics"]["toxicity"]["accuracy"]
    assert len(acc["runs"]) == 2
    assert acc["mean"] == float(np.mean(acc["runs"]))
    assert acc["std"] == float(np.std(acc["runs"], ddof=1))


def test_single_run_aggregate_equals_run(small_records):
    agg = run_experiment(small_records, TINY, TrainConfig(epochs=1, n_runs=1))
    s = agg.summary()
    assert s["toxicity"]["f1"]["mean"] == agg.runs[0].test["toxicity"]["f1"]
    assert s["toxicity"]["f1"]["std"] == 0.0


def test_parallel_runs_match_serial(small_records):
    serial = run_experiment(small_records, TINY, TrainConfig(epochs=1, n_runs=2, workers=1))
    parallel = run_experiment(small_records, TINY, TrainConfig(epochs=1, n_runs=2, workers=2))
    assert [r.to_json() for r in serial.runs] == [r.to_json() for r in parallel.runs]


def test_ablation_table(tmp_path, small_records):
    table = ablation_sweep(small_records, TINY, TrainConfig(epochs=1, n_runs=2), ["full", "no_gf", "no_mhca", "no_both"], str(tmp_path))
    with open(tmp_path / "ablation_table.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert tuple(rows[0]) == ABLATION_COLUMNS
    assert {r["variant"] for r in rows} == {"full", "no_gf", "no_mhca", "no_both"}
    assert len([r for r in rows if r["task"] == "toxicity"]) == 4
    checks = {v: [r.split_checksum for r in agg.runs] for v, agg in table.items()}
    assert len({tuple(c) for c in checks.values()}) == 1


def test_ablation_rejects_unknown_variant(small_records):
    with pytest.raises(ConfigError, match="no_text"):
        ablation_sweep(small_records, TINY, TrainConfig(epochs=1, n_runs=1), ["full", "no_text"])
