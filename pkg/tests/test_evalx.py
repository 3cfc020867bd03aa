from dataclasses import replace

import numpy as np
import pytest

import oracles
from conftest import random_obs
from vodkit import synth
from vodkit.errors import DataError
from vodkit.evalx import (
    ExperimentResult, evaluate, mix_seed, n_test_cells, predict, r_squared, run_sweep, split,
    subsample_cells, subsample_records,
)
from vodkit.ingest import ObservationMatrix
from vodkit.matest import AlsConfig, estimate, svt


# --- r_squared ---------------------------------------------------------------

def test_r2_hand_examples():
    assert r_squared([0, 1, 2], [0, 1, 2]) == 1.0
    assert r_squared([1, 2, 3], [2, 2, 2]) == 0.0
    assert r_squared([0, 1], [0.5, 0.5]) == 0.0
    # SS_res = 1, SS_tot = 2/3
    assert r_squared([0, 1, 1], [0, 1, 0]) == pytest.approx(-0.5, abs=1e-15)


def test_r2_matches_oracle(rng):
    y = rng.random(50)
    yhat = y + rng.normal(0, 0.1, 50)
    assert r_squared(y, yhat) == pytest.approx(oracles.r2(y, yhat), abs=1e-12)
    assert r_squared(y, yhat) <= 1.0


def test_r2_errors():
    with pytest.raises(DataError):
        r_squared([1.0], [1.0])
    with pytest.raises(DataError):
        r_squared([2, 2, 2], [1, 2, 3])
    with pytest.raises(DataError):
        r_squared([1, 2], [1, 2, 3])


def test_svt_full_rank_in_sample_r2(rng):
    x = rng.random((7, 5))
    obs = ObservationMatrix.from_dense(x)
    est = svt(obs, 5)
    r2 = r_squared(x.ravel(), est.values.ravel())
    assert 1 - r2 < 1e-8


# --- split -------------------------------------------------------------------

def _obs_with(n_obs, rng, shape=(50, 40)):
    mask = np.zeros(shape[0] * shape[1], bool)
    mask[rng.choice(mask.size, n_obs, replace=False)] = True
    return ObservationMatrix.from_dense(rng.random(shape), mask.reshape(shape))


def test_split_count_rounding(rng):
    obs = _obs_with(1000, rng)
    assert len(split(obs, 0.2, 0).test_values) == 200
    assert n_test_cells(1000, 0.0001) == 1
    assert n_test_cells(999, 0.2) == 199
    assert len(split(obs, 1e-6, 0).test_values) == 1


def test_split_partitions_observed_cells(rng):
    obs = random_obs(rng, 20, 15, fill=0.5)
    sp = split(obs, 0.3, 7)
    test = set(zip(sp.test_rows.tolist(), sp.test_cols.tolist()))
    train = set(zip(*np.nonzero(sp.train.mask)))
    orig = set(zip(*np.nonzero(obs.mask)))
    assert not test & train and test | train == orig
    assert abs(len(test) - 0.3 * len(orig)) <= 1
    for i, j, v in sp.test_cells:
        assert v == obs.values[i, j]


def test_split_deterministic_and_seed_sensitive(rng):
    obs = random_obs(rng, 20, 15, fill=0.5)
    a, b, c = split(obs, 0.2, 3), split(obs, 0.2, 3), split(obs, 0.2, 4)
    assert a.test_cells == b.test_cells and a.train.equals(b.train)
    assert a.test_cells != c.test_cells


@pytest.mark.parametrize("frac", [0.0, 1.0, -0.1, 1.5])
def test_split_bad_fraction(rng, frac):
    with pytest.raises(DataError):
        split(random_obs(rng, 5, 5), frac, 0)


def test_split_too_few_cells():
    obs = ObservationMatrix.from_dense(np.ones((2, 2)), np.array([[True, False], [False, False]]))
    assert obs.n_observed == 1
    with pytest.raises(DataError):
        split(obs, 0.5, 0)


def test_predict_cold_row_uses_column_mean():
    vals = np.array([[0.1, 0.2], [0.3, 0.4], [0.5, 0.6]])
    train = ObservationMatrix.from_dense(vals, np.array([[1, 1], [1, 1], [0, 0]], bool))
    est = estimate(train, "svt", AlsConfig(rank=1))
    p = predict(est, train, np.array([2, 0]), np.array([1, 0]))
    assert p[0] == pytest.approx(est.values[:, 1].mean())
    assert p[1] == est.values[0, 0]


# --- sweep -------------------------------------------------------------------

def _synthetic(seed=0, m=80, n=12, rho=0.6):
    model = synth.generate_model(m, n, 2, seed=seed)
    return synth.sample_observations(model, synth.SamplingConfig(rho=rho, seed=seed))


def test_single_point_sweep_equals_manual_evaluation():
    obs = _synthetic()
    cfg = AlsConfig(rank=2, lam=0.01)
    res = run_sweep(obs, ["als"], "holdout_fraction", [0.25], cfg, seed=9)
    s = mix_seed(9, 0)
    sp = split(obs, 0.25, mix_seed(s, 1))
    r2_in, r2_out, _ = evaluate(sp, "als", replace(cfg, seed=mix_seed(s, 2)))
    row = res.rows[0]
    assert (row.r2_in, row.r2_out) == (r2_in, r2_out)


def test_sweep_shape_and_determinism(tmp_path):
    obs = _synthetic()
    cfg = AlsConfig(rank=2)
    grid = [0.3, 0.6, 1.0]
    a = run_sweep(obs, ["svt", "als"], "fill_fraction", grid, cfg, seed=1)
    b = run_sweep(obs, ["svt", "als"], "fill_fraction", grid, cfg, seed=1, workers=3)
    assert [r[:5] for r in a.rows] == [r[:5] for r in b.rows]
    assert [r.algorithm for r in a.rows] == ["svt"] * 3 + ["als"] * 3
    assert all(r.r2_in <= 1 and r.r2_out <= 1 for r in a.rows)
    a.write(tmp_path / "a.csv")
    b.write(tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    header = (tmp_path / "a.csv").read_text().splitlines()[0]
    assert header == "algorithm,sweep_variable,sweep_value,r2_in,r2_out"


def test_sweep_errors():
    obs = _synthetic()
    with pytest.raises(DataError):
        run_sweep(obs, ["als"], "fill_fraction", [], AlsConfig())
    with pytest.raises(DataError):
        run_sweep(obs, ["als"], "colour", [0.5], AlsConfig())
    with pytest.raises(DataError):
        run_sweep(obs, ["als"], "fill_fraction", [0.0001], AlsConfig())


def test_subsample_cells_count(rng):
    obs = random_obs(rng, 30, 20, fill=0.5)
    sub = subsample_cells(obs, 0.25, np.random.default_rng(0))
    assert sub.n_observed == round(0.25 * obs.n_observed)
    assert not (sub.mask & ~obs.mask).any()
    assert subsample_cells(obs, 1.0, np.random.default_rng(0)).equals(obs)


def test_subsample_records_preserves_totals():
    clicks = np.array([[3, 0], [1, 5]])
    counts = np.array([[10, 4], [2, 9]])
    obs = ObservationMatrix.from_counts(clicks, counts)
    sub = subsample_records(obs, 12, np.random.default_rng(0))
    assert sub.counts.sum() == 12
    assert (sub.counts <= counts).all() and (sub.clicks <= clicks).all()
    with pytest.raises(DataError):
        subsample_records(obs, 100, np.random.default_rng(0))


def test_out_of_sample_below_in_sample_on_average():
    gaps = []
    for seed in range(20):
        obs = _synthetic(seed, m=60, n=12, rho=0.5)
        r2_in, r2_out, _ = evaluate(split(obs, 0.2, seed), "als", AlsConfig(rank=2, seed=seed))
        gaps.append(r2_in - r2_out)
    assert np.mean(gaps) > 0


def test_mix_seed_is_order_free():
    assert mix_seed(1, 2) == mix_seed(1, 2)
    assert len({mix_seed(1, i) for i in range(100)}) == 100
    assert mix_seed(1, 2) != mix_seed(2, 1)


def test_experiment_result_runtime_optional(tmp_path):
    res = run_sweep(_synthetic(), ["svt"], "holdout_fraction", [0.2], AlsConfig(rank=2))
    res.write(tmp_path / "r.csv", include_runtime=True)
    assert (tmp_path / "r.csv").read_text().splitlines()[0].endswith(",runtime")
    assert isinstance(res, ExperimentResult) and res.for_algorithm("als") == []
