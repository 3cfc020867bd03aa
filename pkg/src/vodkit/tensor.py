"""Intent-aware estimation on (user x ad x intent) tensors.

The tensor is flattened by appending the intent slices along the column
axis: cell ``(i, j, l)`` becomes column ``l * n + j`` (0-based). A single
matrix estimate on the flat matrix is then cut back into slices. The
per-slice baseline runs an independent estimate on every slice instead.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError
from .evalx import r_squared
from .ingest import IntentTensor, ObservationMatrix
from .matest import AlsConfig, EstimateMatrix, estimate

FLAT_RANK = 3


def flat_index(j, l, n):
    return l * n + j


def unflat_index(col, n):
    """Inverse of :func:`flat_index`: returns ``(j, l)``."""
    return col % n, col // n


def flatten(t: IntentTensor) -> ObservationMatrix:
    m, n, k = t.shape
    # (m, n, k) -> (m, k, n) -> (m, k*n) puts (j, l) at column l*n + j
    vals = t.values.transpose(0, 2, 1).reshape(m, n * k)
    counts = t.counts.transpose(0, 2, 1).reshape(m, n * k)
    cols = [f"{t.intent_keys[l]}|{t.col_keys[j]}" for l in range(k) for j in range(n)]
    return ObservationMatrix(vals, counts, list(t.row_keys), cols)


def unflatten_array(flat: np.ndarray, n: int, k: int) -> np.ndarray:
    m = flat.shape[0]
    if flat.shape[1] != n * k:
        raise DataError(f"flat matrix has {flat.shape[1]} columns, expected {n * k}")
    return flat.reshape(m, k, n).transpose(0, 2, 1)


def unflatten(flat: ObservationMatrix, col_keys, intent_keys) -> IntentTensor:
    n, k = len(col_keys), len(intent_keys)
    return IntentTensor(
        unflatten_array(flat.values, n, k), unflatten_array(flat.counts, n, k),
        list(flat.row_keys), list(col_keys), list(intent_keys),
    )


@dataclass
class TensorEstimate:
    raw: np.ndarray
    method: str
    cold_slices: list[int] = field(default_factory=list)
    row_keys: list[str] | None = None
    col_keys: list[str] | None = None
    intent_keys: list[str] | None = None

    @property
    def values(self) -> np.ndarray:
        return np.clip(self.raw, 0.0, 1.0)

    def write_slices(self, directory) -> list[Path]:
        """One dense CSV per intent slice."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        m, n, k = self.raw.shape
        rows = self.row_keys or [f"u{i}" for i in range(m)]
        cols = self.col_keys or [f"c{j}" for j in range(n)]
        ints = self.intent_keys or [f"s{l}" for l in range(k)]
        paths = []
        vals = self.values
        for l, name in enumerate(ints):
            p = directory / f"slice_{name}.csv"
            with open(p, "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["user_group", *cols])
                for key, row in zip(rows, vals[:, :, l]):
                    w.writerow([key, *(repr(float(x)) for x in row)])
            paths.append(p)
        return paths


def estimate_flattened(t: IntentTensor, cfg: AlsConfig, algorithm: str = "als") -> TensorEstimate:
    est = estimate(flatten(t), algorithm, cfg)
    m, n, k = t.shape
    return TensorEstimate(
        unflatten_array(est.raw, n, k), "flattened", [], list(t.row_keys), list(t.col_keys), list(t.intent_keys)
    )


def column_fallback(t: IntentTensor) -> np.ndarray:
    """Per ad column, the mean of every observed value across users and slices.

    Columns never observed anywhere get the mean of all observed values.
    """
    if not t.mask.any():
        raise DataError("tensor has no observed cells")
    vals = np.where(t.mask, t.values, 0.0)
    seen = t.mask.sum(axis=(0, 2))
    overall = vals.sum() / t.mask.sum()
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(seen > 0, vals.sum(axis=(0, 2)) / np.maximum(seen, 1), overall)


def estimate_per_slice(t: IntentTensor, cfg: AlsConfig, algorithm: str = "als") -> TensorEstimate:
    """Independent estimate per slice; the same config is shared by all slices.

    A slice with no observations at all is filled with :func:`column_fallback`
    and listed in ``cold_slices``.
    """
    m, n, k = t.shape
    raw = np.empty((m, n, k))
    cold = []
    fallback = None
    for l in range(k):
        sl = t.slice(l)
        if sl.n_observed == 0:
            if fallback is None:
                fallback = column_fallback(t)
            raw[:, :, l] = fallback[None, :]
            cold.append(l)
            continue
        raw[:, :, l] = estimate(sl, algorithm, cfg).raw
    return TensorEstimate(raw, "per_slice", cold, list(t.row_keys), list(t.col_keys), list(t.intent_keys))


def tensor_split(t: IntentTensor, fraction: float, seed: int):
    """Hold out a share of observed tensor cells. Returns (train tensor, index arrays, values)."""
    if not 0 < fraction < 1:
        raise DataError(f"holdout fraction must lie in (0, 1), got {fraction}")
    idx = np.nonzero(t.mask)
    n_obs = len(idx[0])
    n_test = max(1, int(np.floor(fraction * n_obs)))
    if n_test >= n_obs:
        raise DataError("not enough observed cells to hold any out")
    rng = np.random.default_rng(seed)
    pick = np.sort(rng.choice(n_obs, size=n_test, replace=False))
    test = tuple(a[pick] for a in idx)
    vals = t.values.copy()
    counts = t.counts.copy()
    vals[test] = np.nan
    counts[test] = 0
    train = IntentTensor(vals, counts, list(t.row_keys), list(t.col_keys), list(t.intent_keys))
    return train, test, t.values[test]


def out_of_sample_r2(est: TensorEstimate, test, test_values) -> float:
    return r_squared(test_values, est.values[test])
