"""R^2, holdout splits and the sweep harness behind the accuracy curves."""
from __future__ import annotations

import csv
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import NamedTuple, Sequence

import numpy as np

from .errors import DataError
from .ingest import ObservationMatrix
from .matest import AlsConfig, EstimateMatrix, estimate

SWEEPS = ("fill_fraction", "data_points", "holdout_fraction")


def r_squared(actual, predicted) -> float:
    """Coefficient of determination ``1 - SS_res / SS_tot``."""
    y = np.asarray(actual, dtype=np.float64)
    yhat = np.asarray(predicted, dtype=np.float64)
    if y.shape != yhat.shape or y.size < 2:
        raise DataError("need at least two (actual, predicted) pairs of equal length")
    ss_tot = np.sum((y - y.mean()) ** 2)
    if ss_tot == 0:
        raise DataError("actual values have zero variance; R^2 undefined")
    return float(1.0 - np.sum((y - yhat) ** 2) / ss_tot)


@dataclass
class HoldoutSplit:
    train: ObservationMatrix
    test_rows: np.ndarray
    test_cols: np.ndarray
    test_values: np.ndarray
    fraction: float
    seed: int

    @property
    def test_cells(self) -> list[tuple[int, int, float]]:
        return list(zip(self.test_rows.tolist(), self.test_cols.tolist(), self.test_values.tolist()))


def n_test_cells(n_observed: int, fraction: float) -> int:
    return max(1, int(np.floor(fraction * n_observed)))


def split(obs: ObservationMatrix, fraction: float, seed: int) -> HoldoutSplit:
    """Hold out ``floor(fraction * observed)`` (at least one) cells uniformly at random."""
    if not 0 < fraction < 1:
        raise DataError(f"holdout fraction must lie in (0, 1), got {fraction}")
    rows, cols, vals = obs.observed()
    n_obs = len(rows)
    k = n_test_cells(n_obs, fraction)
    if k >= n_obs:
        raise DataError(f"cannot hold out {k} of {n_obs} observed cells")
    rng = np.random.default_rng(seed)
    pick = np.sort(rng.choice(n_obs, size=k, replace=False))
    mask = obs.mask.copy()
    mask[rows[pick], cols[pick]] = False
    return HoldoutSplit(obs.with_mask(mask), rows[pick], cols[pick], vals[pick], fraction, seed)


def predict(est: EstimateMatrix, train: ObservationMatrix, rows, cols) -> np.ndarray:
    """Clamped estimate at the given cells; rows with no training data get the column mean."""
    vals = est.values
    pred = vals[rows, cols].copy()
    cold = ~train.mask.any(axis=1)
    if cold.any():
        col_mean = vals.mean(axis=0)
        hit = cold[rows]
        pred[hit] = col_mean[np.asarray(cols)[hit]]
    return pred


def evaluate(sp: HoldoutSplit, algorithm: str, cfg: AlsConfig) -> tuple[float, float, EstimateMatrix]:
    """Fit on the training part; return (in-sample R^2, out-of-sample R^2, estimate)."""
    est = estimate(sp.train, algorithm, cfg)
    rows, cols, vals = sp.train.observed()
    r2_in = r_squared(vals, predict(est, sp.train, rows, cols))
    r2_out = r_squared(sp.test_values, predict(est, sp.train, sp.test_rows, sp.test_cols))
    return r2_in, r2_out, est


class ResultRow(NamedTuple):
    algorithm: str
    sweep_variable: str
    sweep_value: float
    r2_in: float
    r2_out: float
    runtime: float


@dataclass
class ExperimentResult:
    rows: list[ResultRow]

    def for_algorithm(self, algorithm: str) -> list[ResultRow]:
        return [r for r in self.rows if r.algorithm == algorithm]

    def write(self, path, include_runtime: bool = False) -> None:
        """CSV of the rows. Runtime is wall-clock and left out unless asked for."""
        fields = list(ResultRow._fields)
        if not include_runtime:
            fields.remove("runtime")
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(fields)
            for r in self.rows:
                d = r._asdict()
                w.writerow([repr(d[f]) if isinstance(d[f], float) else d[f] for f in fields])


def mix_seed(seed: int, *parts: int) -> int:
    """Derived per-job seed, independent of execution order."""
    return int(np.random.SeedSequence([seed, *parts]).generate_state(1, np.uint64)[0])


def subsample_cells(obs: ObservationMatrix, fill: float, rng) -> ObservationMatrix:
    """Keep ``round(fill * observed)`` of the observed cells, chosen uniformly."""
    if not 0 < fill <= 1:
        raise DataError(f"fill must lie in (0, 1], got {fill}")
    rows, cols, _ = obs.observed()
    want = int(round(fill * len(rows)))
    if want < 2:
        raise DataError(f"fill {fill} leaves fewer than two observed cells")
    pick = rng.choice(len(rows), size=want, replace=False)
    mask = np.zeros(obs.shape, dtype=bool)
    mask[rows[pick], cols[pick]] = True
    return obs.with_mask(mask)


def subsample_records(obs: ObservationMatrix, n_records: int, rng) -> ObservationMatrix:
    """Draw ``n_records`` raw exposures without replacement, then re-aggregate."""
    clicks, counts = obs.clicks, obs.counts
    total = int(counts.sum())
    n_records = int(n_records)
    if not 0 < n_records <= total:
        raise DataError(f"cannot draw {n_records} records from {total}")
    colors = np.concatenate([clicks.ravel(), (counts - clicks).ravel()])
    draw = rng.multivariate_hypergeometric(colors, n_records, method="marginals")
    k = clicks.size
    new_clicks = draw[:k].reshape(obs.shape)
    new_counts = new_clicks + draw[k:].reshape(obs.shape)
    return ObservationMatrix.from_counts(new_clicks, new_counts, list(obs.row_keys), list(obs.col_keys))


def _grid_point(obs, algorithms, sweep, value, cfg, holdout, seed):
    rng = np.random.default_rng(seed)
    data = obs
    frac = holdout
    if sweep == "fill_fraction":
        data = subsample_cells(obs, value, rng)
    elif sweep == "data_points":
        data = subsample_records(obs, value, rng)
    elif sweep == "holdout_fraction":
        frac = value
    sp = split(data, frac, mix_seed(seed, 1))
    out = []
    for algo in algorithms:
        t0 = time.perf_counter()
        r2_in, r2_out, _ = evaluate(sp, algo, replace(cfg, seed=mix_seed(seed, 2)))
        out.append(ResultRow(algo, sweep, float(value), r2_in, r2_out, time.perf_counter() - t0))
    return out


def run_sweep(
    obs: ObservationMatrix,
    algorithms: Sequence[str],
    sweep: str,
    grid: Sequence[float],
    cfg: AlsConfig,
    seed: int = 0,
    holdout: float = 0.2,
    workers: int = 1,
) -> ExperimentResult:
    """R^2 in/out per algorithm at each grid value.

    ``fill_fraction`` keeps a share of the observed cells, ``data_points`` draws a
    number of raw exposures, ``holdout_fraction`` varies the test share.
    Each grid point gets its own seed derived from ``seed`` and its index.
    """
    if sweep not in SWEEPS:
        raise DataError(f"unknown sweep {sweep!r}; choose from {SWEEPS}")
    if not grid:
        raise DataError("empty sweep grid")
    jobs = [(obs, list(algorithms), sweep, v, cfg, holdout, mix_seed(seed, i)) for i, v in enumerate(grid)]
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(lambda a: _grid_point(*a), jobs))
    else:
        parts = [_grid_point(*a) for a in jobs]
    rows = [r for algo in algorithms for part in parts for r in part if r.algorithm == algo]
    return ExperimentResult(rows)
