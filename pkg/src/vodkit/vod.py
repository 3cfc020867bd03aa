"""Value of data per (user, advertiser) and pre/post estimation diagnostics.

The value of user ``i``'s data to advertiser column ``j`` is the distance of
the user's CTR from the column's population mean. Production reports use an
estimated CTR matrix; :func:`true_vod` evaluates the same quantity on a
synthetic model's ground truth.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .ingest import ObservationMatrix
from .matest import EstimateMatrix


def _as_array(est) -> np.ndarray:
    vals = est.values if isinstance(est, EstimateMatrix) else np.asarray(est, dtype=np.float64)
    if vals.ndim != 2 or vals.size == 0:
        raise DataError("estimate must be a non-empty 2-d matrix")
    return vals


def _moments(vals: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # Sums are taken about the first observed value of each column, so a
    # constant column gets exactly its value as mean and zero variance.
    n_obs = mask.sum(axis=0)
    first = vals[mask.argmax(axis=0), np.arange(vals.shape[1])]
    d = np.where(mask, vals - first, 0.0)
    mu = first + d.sum(axis=0) / n_obs
    var = (np.where(mask, vals - mu, 0.0) ** 2).sum(axis=0) / n_obs
    return mu, var


def column_moments_pre(obs: ObservationMatrix) -> tuple[np.ndarray, np.ndarray]:
    """Mean and population variance of each column over observed cells only."""
    mask = obs.mask
    if (mask.sum(axis=0) == 0).any():
        bad = [obs.col_keys[j] for j in np.flatnonzero(~mask.any(axis=0))]
        raise DataError(f"columns with no observations: {bad}")
    return _moments(obs.zero_filled(), mask)


def _column_mean(vals: np.ndarray) -> np.ndarray:
    return _moments(vals, np.ones(vals.shape, dtype=bool))[0]


def _normalise(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    # Undefined where the denominator is zero: NaN in memory, blank on disk.
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(den != 0, num / np.where(den != 0, den, 1.0), np.nan)


@dataclass
class VodReport:
    per_pair: np.ndarray
    column_means: np.ndarray
    per_category_norm: np.ndarray   # NaN where mu_pre is 0 or unknown
    mu_pre: np.ndarray | None = None
    col_keys: list[str] | None = None
    row_keys: list[str] | None = None

    @property
    def undefined(self) -> list[int]:
        return np.flatnonzero(np.isnan(self.per_category_norm)).tolist()

    def vod_for_user(self, row: int) -> dict[str, float]:
        keys = self.col_keys or [f"c{j}" for j in range(self.per_pair.shape[1])]
        return {k: float(v) for k, v in zip(keys, self.per_pair[row])}

    def write(self, path, quantiles_of: np.ndarray | None = None) -> None:
        """One row per category. ``quantiles_of`` adds min/q1/median/q3/max columns."""
        keys = self.col_keys or [f"c{j}" for j in range(len(self.column_means))]
        header = ["ad_category", "column_mean", "mu_pre", "vod_mean", "vod_norm"]
        q = None
        if quantiles_of is not None:
            header += ["ctr_min", "ctr_q1", "ctr_median", "ctr_q3", "ctr_max"]
            q = quantile_table(quantiles_of)
        mean_vod = self.per_pair.mean(axis=0)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for j, key in enumerate(keys):
                mu = "" if self.mu_pre is None else _fmt(self.mu_pre[j])
                row = [key, _fmt(self.column_means[j]), mu, _fmt(mean_vod[j]), _fmt(self.per_category_norm[j])]
                if q is not None:
                    row += [_fmt(x) for x in q[j]]
                w.writerow(row)

    def write_pairs(self, path) -> None:
        write_matrix(path, self.per_pair, self.row_keys, self.col_keys)


def _fmt(x) -> str:
    return "" if x is None or not np.isfinite(x) else repr(float(x))


def write_matrix(path, mat, row_keys=None, col_keys=None) -> None:
    m, n = mat.shape
    row_keys = row_keys or [f"u{i}" for i in range(m)]
    col_keys = col_keys or [f"c{j}" for j in range(n)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["user_group", *col_keys])
        for key, row in zip(row_keys, mat):
            w.writerow([key, *(_fmt(x) for x in row)])


def read_matrix(path) -> tuple[np.ndarray, list[str], list[str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        keys, rows = [], []
        for rec in reader:
            keys.append(rec[0])
            rows.append([float(x) if x else np.nan for x in rec[1:]])
    return np.array(rows), keys, header[1:]


def vod(est, obs: ObservationMatrix | None = None, mu_pre=None) -> VodReport:
    """``|M[i, j] - mean_i M[i, j]|`` for every cell, plus the normalised column average.

    The normalisation divides the column's mean VoD by the pre-estimation
    observed mean CTR, taken from ``obs`` or given directly as ``mu_pre``.
    """
    vals = _as_array(est)
    col_means = _column_mean(vals)
    per_pair = np.abs(vals - col_means)
    if mu_pre is None and obs is not None:
        if obs.shape != vals.shape:
            raise DataError(f"observation shape {obs.shape} != estimate shape {vals.shape}")
        mu_pre, _ = column_moments_pre(obs)
    if mu_pre is None:
        norm = np.full(vals.shape[1], np.nan)
    else:
        mu_pre = np.asarray(mu_pre, dtype=np.float64)
        norm = _normalise(per_pair.mean(axis=0), mu_pre)
    keys = getattr(est, "col_keys", None) or (obs.col_keys if obs is not None else None)
    rows = getattr(est, "row_keys", None) or (obs.row_keys if obs is not None else None)
    return VodReport(per_pair, col_means, norm, mu_pre, keys, rows)


def true_vod(means: np.ndarray) -> VodReport:
    """Ground-truth value of data from a synthetic model's mean matrix."""
    means = np.asarray(means, dtype=np.float64)
    return vod(means, mu_pre=means.mean(axis=0))


@dataclass
class SignalNoiseReport:
    mu_pre: np.ndarray
    mu_post: np.ndarray
    var_pre: np.ndarray
    var_post: np.ndarray
    mu_diff: np.ndarray
    var_diff: np.ndarray
    col_keys: list[str] | None = None

    def write(self, path) -> None:
        keys = self.col_keys or [f"c{j}" for j in range(len(self.mu_pre))]
        cols = ("mu_pre", "mu_post", "var_pre", "var_post", "mu_diff", "var_diff")
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["ad_category", *cols])
            for j, key in enumerate(keys):
                w.writerow([key, *(_fmt(getattr(self, c)[j]) for c in cols)])


def signal_noise(obs: ObservationMatrix, est) -> SignalNoiseReport:
    """Column mean/variance before (observed cells) and after (all cells) estimation.

    Differences are normalised by the pre mean (mean) and its square (variance).
    """
    vals = _as_array(est)
    if obs.shape != vals.shape:
        raise DataError(f"observation shape {obs.shape} != estimate shape {vals.shape}")
    mu_pre, var_pre = column_moments_pre(obs)
    mu_post, var_post = _moments(vals, np.ones(vals.shape, dtype=bool))
    mu_diff = _normalise(np.abs(mu_pre - mu_post), mu_pre)
    var_diff = _normalise(np.abs(var_pre - var_post), mu_pre**2)
    return SignalNoiseReport(mu_pre, mu_post, var_pre, var_post, mu_diff, var_diff, list(obs.col_keys))


def quantile_table(est) -> np.ndarray:
    """Per-column (min, q1, median, q3, max) of the estimated CTRs."""
    vals = _as_array(est)
    return np.quantile(vals, [0.0, 0.25, 0.5, 0.75, 1.0], axis=0).T
