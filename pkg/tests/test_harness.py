import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from proreg import harness
from proreg.datagen import BiasSpec
from proreg.harness import (
    CSV_COLUMNS,
    ExperimentConfig,
    ExperimentError,
    Method,
    MetricsRow,
    OracleConfig,
    accuracy,
    aggregate,
    best_in_grid,
    ensemble_predict,
    harmonic_mean,
    read_results,
    results_csv,
    run_experiment,
    run_seed,
    sweep,
)
from proreg.model import TrainConfig
from proreg.probs import InvalidInputError, InvalidParameterError

SMALL = ExperimentConfig(
    bias=BiasSpec(class_count=3, semantic_dim=4, context_dim=4,
                  train_size=150, id_test_size=90, ood_test_size=90),
    oracle=OracleConfig(sigma=0.2),
    train=TrainConfig(epochs=2, batch_size=32),
    seeds=(0, 1),
)


def _rows_equal(a, b):
    key = lambda r: (r.seed, r.id_accuracy, r.ood_accuracy, r.harmonic_mean)
    return [key(r) for r in a] == [key(r) for r in b]


# --- metrics ---------------------------------------------------------------

def test_harmonic_mean_examples():
    assert harmonic_mean(0.5, 0.5) == 0.5
    assert harmonic_mean(1.0, 0.0) == 0.0
    assert harmonic_mean(0.0, 0.0) == 0.0
    assert abs(harmonic_mean(0.933, 0.925) - 0.929) < 5e-4


@given(st.floats(0, 1), st.floats(0, 1))
def test_harmonic_mean_identity(a, b):
    hm = harmonic_mean(a, b)
    expected = 0.0 if a + b == 0 else 2 * a * b / (a + b)
    assert abs(hm - expected) <= 1e-9
    assert min(a, b) - 1e-12 <= hm <= max(a, b) + 1e-12


@pytest.mark.parametrize("bad", [(-0.1, 0.5), (0.5, 1.1)])
def test_harmonic_mean_range(bad):
    with pytest.raises(InvalidParameterError):
        harmonic_mean(*bad)


def test_accuracy_recount_and_ties():
    rng = np.random.default_rng(0)
    probs = rng.dirichlet(np.ones(4), size=200)
    labels = rng.integers(4, size=200)
    brute = sum(int(max(range(4), key=lambda j: (probs[i, j], -j)) == labels[i]) for i in range(200))
    assert accuracy(probs, labels) == brute / 200
    assert accuracy(np.full((3, 3), 1 / 3), [0, 1, 2]) == pytest.approx(1 / 3)
    with pytest.raises(InvalidInputError):
        accuracy(np.zeros((0, 3)), [])


def test_constant_predictor_at_chance():
    labels = np.random.default_rng(1).integers(5, size=5000)
    probs = np.tile(np.eye(5)[2], (5000, 1))
    assert abs(accuracy(probs, labels) - 0.2) < 0.02


def test_ensemble_endpoints_exact():
    rng = np.random.default_rng(2)
    f, z = rng.dirichlet(np.ones(3), 10), rng.dirichlet(np.ones(3), 10)
    assert ensemble_predict(f, z, 0.0).tobytes() == f.tobytes()
    assert ensemble_predict(f, z, 1.0).tobytes() == z.tobytes()
    np.testing.assert_allclose(ensemble_predict(f, z, 0.3).sum(axis=1), 1.0)
    with pytest.raises(InvalidParameterError):
        ensemble_predict(f, z, 1.2)


# --- configuration ---------------------------------------------------------

def test_config_roundtrip(tmp_path):
    cfg = replace(SMALL, method=Method("kd", 0.25, "random"), output="x.csv")
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg.to_dict()))
    assert ExperimentConfig.load(path) == cfg


@pytest.mark.parametrize("mutate", [
    lambda d: d.update(schema_version=2),
    lambda d: d.update(colour=1),
    lambda d: d["oracle"].update(noise=1),
    lambda d: d["train"].update(seed=3),
    lambda d: d.update(seeds=[]),
    lambda d: d["method"].update(alpha=-1.0),
])
def test_config_rejects_bad_input(mutate):
    d = SMALL.to_dict()
    mutate(d)
    with pytest.raises(InvalidParameterError):
        ExperimentConfig.from_dict(d)


@pytest.mark.parametrize("make", [
    lambda: Method("kd", 1.5), lambda: Method("ensemble", -0.5), lambda: Method("ft", 1.0),
    lambda: Method("bogus"), lambda: Method("proreg", 2.0, "warm"),
])
def test_method_validation(make):
    with pytest.raises(InvalidParameterError):
        make()


# --- runs ------------------------------------------------------------------

def test_zero_shot_clean_oracle_on_noiseless_data():
    cfg = replace(SMALL, bias=replace(SMALL.bias, noise_std=0.0), oracle=OracleConfig(sigma=0.0),
                  method=Method("zero_shot"))
    for row in run_experiment(cfg):
        assert row.id_accuracy == row.ood_accuracy == 1.0


def test_ft_plus_at_epoch_zero_equals_zero_shot():
    cfg = replace(SMALL, train=replace(SMALL.train, epochs=0))
    assert _rows_equal(run_experiment(cfg.with_method(Method("ft_plus"))),
                       run_experiment(cfg.with_method(Method("zero_shot"))))


@pytest.mark.parametrize("init", ["random", "prompt"])
def test_kd_lambda_zero_equals_matching_ft(init):
    kd = run_experiment(SMALL.with_method(Method("kd", 0.0, init)))
    ft = run_experiment(SMALL.with_method(Method("ft" if init == "random" else "ft_plus")))
    assert _rows_equal(kd, ft)


def test_ensemble_lambda_zero_equals_ft():
    assert _rows_equal(run_experiment(SMALL.with_method(Method("ensemble", 0.0))),
                       run_experiment(SMALL.with_method(Method("ft"))))


def test_zero_shot_rows_shared_across_sweeps():
    a = run_experiment(SMALL.with_method(Method("zero_shot")))
    b = run_experiment(replace(SMALL, train=replace(SMALL.train, lr=0.5)).with_method(Method("zero_shot")))
    assert _rows_equal(a, b)


def test_rows_satisfy_identity():
    for r in sweep(SMALL, "alpha", [0.5, 2.0]):
        assert abs(r.harmonic_mean - harmonic_mean(r.id_accuracy, r.ood_accuracy)) <= 1e-9
        assert 0 <= r.id_accuracy <= 1 and 0 <= r.ood_accuracy <= 1


def test_run_seed_keep_returns_artifacts():
    row, art = run_seed(SMALL, 0, keep=True)
    assert row.seed == 0 and art.model is not None and art.dataset.y_zs is not None


def test_sweep_validation():
    with pytest.raises(InvalidParameterError):
        sweep(SMALL, "beta", [1.0])
    with pytest.raises(InvalidParameterError):
        sweep(SMALL, "alpha", [])


# --- CSV -------------------------------------------------------------------

def test_csv_is_deterministic_and_schedule_independent():
    serial = results_csv(sweep(SMALL, "kd_lambda", [0.0, 0.5], jobs=1))
    again = results_csv(sweep(SMALL, "kd_lambda", [0.0, 0.5], jobs=1))
    parallel = results_csv(sweep(SMALL, "kd_lambda", [0.0, 0.5], jobs=2))
    assert serial == again == parallel


def test_csv_schema(tmp_path):
    rows = run_experiment(SMALL)
    path = harness.write_results(tmp_path / "r.csv", rows)
    lines = path.read_text().splitlines()
    assert lines[0] == ",".join(CSV_COLUMNS)
    parsed = read_results(path)
    assert [p["row_type"] for p in parsed] == ["run", "run", "mean", "std"]
    assert float(parsed[0]["id_accuracy"]) == rows[0].id_accuracy
    assert parsed[2]["seed"] == "" and parsed[2]["n_seeds"] == "2"


def test_canonical_order():
    rows = [MetricsRow("proreg", "alpha", 2.0, 1, .5, .5, .5), MetricsRow("ft", "", None, 0, .5, .5, .5),
            MetricsRow("proreg", "alpha", 0.5, 0, .5, .5, .5), MetricsRow("ft", "", None, 1, .5, .5, .5)]
    assert results_csv(rows) == results_csv(rows[::-1])


def test_aggregate_and_best():
    rows = [MetricsRow("kd", "lambda", lam, s, acc, acc, acc)
            for lam, acc in ((0.0, 0.6), (0.5, 0.8), (1.0, 0.8)) for s in (0, 1)]
    stats = aggregate(rows)
    assert [s.param_value for s in stats] == [0.0, 0.5, 1.0]
    assert best_in_grid(stats, "kd").param_value == 0.5
    assert stats[0].std["harmonic_mean"] == 0.0


def test_stage_tagged_error_keeps_partial_rows(monkeypatch, tmp_path):
    real_fit = harness.fit

    def flaky(config, dataset, oracle, seed, method=None):
        if seed == 1:
            raise FloatingPointError("boom")
        return real_fit(config, dataset, oracle, seed, method)

    monkeypatch.setattr(harness, "fit", flaky)
    with pytest.raises(ExperimentError) as info:
        run_experiment(replace(SMALL, seeds=(0, 1, 2)), jobs=1)
    err = info.value
    assert err.stage == "train" and err.seed == 1
    assert [r.seed for r in err.partial_rows] == [0]
    text = results_csv(err.partial_rows, truncated=str(err))
    assert text.rstrip().splitlines()[-1].startswith("# TRUNCATED:")


def test_output_dir_env(monkeypatch, tmp_path):
    monkeypatch.setenv(harness.ENV_OUTPUT_DIR, str(tmp_path))
    assert harness.resolve_output("a/b.csv", "x") == tmp_path / "a/b.csv"
    assert harness.resolve_output("/abs.csv", "x") == harness.Path("/abs.csv")
    monkeypatch.setenv(harness.ENV_JOBS, "0")
    with pytest.raises(InvalidParameterError):
        harness.jobs_from_env()
