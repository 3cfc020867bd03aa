"""Matrix estimation: rank-truncated SVT, ALS, and SVT-warm-started ALS."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import kernels
from .errors import DataError
from .ingest import ObservationMatrix

log = logging.getLogger(__name__)

ALGORITHMS = ("svt", "als", "svt+als")


@dataclass
class EstimateMatrix:
    """Dense estimate of the CTR matrix.

    ``values`` is clamped to [0, 1]; ``raw`` is the pre-clamp low-rank matrix
    that every rank and linearity check is stated against.
    """

    raw: np.ndarray
    rank_used: int
    algorithm: str
    row_keys: list[str] | None = None
    col_keys: list[str] | None = None
    singular_values: np.ndarray | None = None
    user_factors: np.ndarray | None = None
    ad_factors: np.ndarray | None = None
    lam: float | None = None
    iterations: int = 0
    objective_history: list[float] = field(default_factory=list)

    @property
    def values(self) -> np.ndarray:
        return np.clip(self.raw, 0.0, 1.0)

    @property
    def shape(self):
        return self.raw.shape

    @property
    def final_objective(self) -> float | None:
        return self.objective_history[-1] if self.objective_history else None

    def factors(self):
        if self.user_factors is None:
            u, s, vt, _ = kernels.jacobi_svd(self.raw)
            root = np.sqrt(s[: self.rank_used])
            return u[:, : self.rank_used] * root, vt[: self.rank_used].T * root
        return self.user_factors, self.ad_factors

    def metadata(self) -> dict:
        sv = None if self.singular_values is None else [float(x) for x in self.singular_values]
        return {
            "algorithm": self.algorithm,
            "rank": self.rank_used,
            "lambda": self.lam,
            "iterations": self.iterations,
            "final_objective": self.final_objective,
            "singular_values": sv,
        }

    def write(self, path) -> tuple[Path, Path]:
        """Dense clamped CSV plus a ``.json`` sidecar with run metadata."""
        path = Path(path)
        m, n = self.shape
        rows = self.row_keys or [f"u{i}" for i in range(m)]
        cols = self.col_keys or [f"c{j}" for j in range(n)]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["user_group", *cols])
            for key, row in zip(rows, self.values):
                w.writerow([key, *(repr(float(x)) for x in row)])
        side = path.with_suffix(".json")
        side.write_text(json.dumps(self.metadata(), indent=2) + "\n", encoding="utf-8")
        return path, side


def read_estimate(path) -> EstimateMatrix:
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        keys, rows = [], []
        for rec in reader:
            keys.append(rec[0])
            rows.append([float(x) for x in rec[1:]])
    meta = json.loads(path.with_suffix(".json").read_text()) if path.with_suffix(".json").exists() else {}
    return EstimateMatrix(
        np.array(rows), meta.get("rank") or 0, meta.get("algorithm", "unknown"), keys, header[1:],
        lam=meta.get("lambda"), iterations=meta.get("iterations", 0),
    )


@dataclass
class AlsConfig:
    rank: int = 2
    lam: float = 0.01
    max_iters: int = 200
    tol: float = 1e-8
    seed: int = 0
    warm_start: EstimateMatrix | None = None
    threads: int = 1

    def __post_init__(self):
        if self.rank < 1:
            raise DataError(f"rank must be positive, got {self.rank}")
        if self.lam < 0:
            raise DataError(f"lambda must be non-negative, got {self.lam}")
        if self.tol <= 0:
            raise DataError("tol must be positive")
        if self.max_iters < 1:
            raise DataError("max_iters must be positive")


def _check(obs: ObservationMatrix, rank: int):
    m, n = obs.shape
    if obs.n_observed == 0:
        raise DataError("observation matrix has no observed cells")
    if not 1 <= rank <= min(m, n):
        raise DataError(f"rank {rank} outside [1, {min(m, n)}]")


def svt(obs: ObservationMatrix, rank: int) -> EstimateMatrix:
    """Keep the top ``rank`` singular triplets of the zero-filled matrix, inflate by 1/rho."""
    _check(obs, rank)
    rho = obs.n_observed / obs.values.size
    u, s, vt, _ = kernels.jacobi_svd(obs.zero_filled())
    root = np.sqrt(s[:rank] / rho)
    uf = u[:, :rank] * root
    vf = vt[:rank].T * root
    raw = uf @ vf.T
    rows, cols, vals = obs.observed()
    sse = float(np.sum((vals - raw[rows, cols]) ** 2))
    return EstimateMatrix(
        raw, rank, "svt", list(obs.row_keys), list(obs.col_keys), s, uf, vf, None, 0, [sse]
    )


class _Observed:
    """Observed cells in row-major and column-major CSR layouts."""

    def __init__(self, obs: ObservationMatrix):
        m, n = obs.shape
        self.rows, self.cols, self.vals = obs.observed()
        self.row_ptr = np.concatenate([[0], np.cumsum(np.bincount(self.rows, minlength=m))])
        order = np.lexsort((self.rows, self.cols))
        self.col_ptr = np.concatenate([[0], np.cumsum(np.bincount(self.cols, minlength=n))])
        self.rows_by_col = self.rows[order]
        self.vals_by_col = self.vals[order]

    def objective(self, u, v, lam) -> float:
        pred = np.einsum("ij,ij->i", u[self.rows], v[self.cols])
        return float(np.sum((self.vals - pred) ** 2) + lam * (np.sum(u * u) + np.sum(v * v)))


def als_objective(obs: ObservationMatrix, u, v, lam: float) -> float:
    """Squared error over observed cells plus ``lam * (|U|^2 + |V|^2)``."""
    return _Observed(obs).objective(u, v, lam)


def random_init(obs: ObservationMatrix, rank: int, seed: int):
    """Uniform factors sized so that the initial products match the observed mean."""
    m, n = obs.shape
    rng = np.random.default_rng(seed)
    mean = float(np.nanmean(obs.values)) if obs.n_observed else 0.0
    a = np.sqrt(4.0 * max(abs(mean), 1e-12) / rank)
    return rng.uniform(0.0, a, (m, rank)), rng.uniform(0.0, a, (n, rank))


def als(obs: ObservationMatrix, cfg: AlsConfig, init=None) -> EstimateMatrix:
    """Alternating ridge regressions over observed cells.

    Starts from ``init=(U, V)``, else ``cfg.warm_start`` factors, else a
    seeded random draw. The objective is recorded after every half-step.
    Rows or columns with no observations end up with zero factors when
    ``lam > 0``; with ``lam == 0`` they raise :class:`DegenerateError`.
    """
    _check(obs, cfg.rank)
    if init is not None:
        u, v = (np.array(x, dtype=np.float64) for x in init)
    elif cfg.warm_start is not None:
        u, v = (np.array(x, dtype=np.float64) for x in cfg.warm_start.factors())
    else:
        u, v = random_init(obs, cfg.rank, cfg.seed)
    if u.shape != (obs.shape[0], cfg.rank) or v.shape != (obs.shape[1], cfg.rank):
        raise DataError("initial factors do not match matrix shape and rank")
    data = _Observed(obs)
    j_prev = data.objective(u, v, cfg.lam)
    history = [j_prev]
    it = 0
    for it in range(1, cfg.max_iters + 1):
        u = kernels.solve_rows(data.row_ptr, data.cols, data.vals, v, cfg.lam, cfg.threads)
        history.append(data.objective(u, v, cfg.lam))
        v = kernels.solve_rows(data.col_ptr, data.rows_by_col, data.vals_by_col, u, cfg.lam, cfg.threads)
        j = data.objective(u, v, cfg.lam)
        history.append(j)
        if abs(j_prev - j) <= cfg.tol * max(j_prev, 1e-300):
            break
        j_prev = j
    else:
        log.info("als stopped at max_iters=%d (relative change still above %g)", cfg.max_iters, cfg.tol)
    return EstimateMatrix(
        u @ v.T, cfg.rank, "als", list(obs.row_keys), list(obs.col_keys), None, u, v, cfg.lam, it, history
    )


def svt_then_als(obs: ObservationMatrix, cfg: AlsConfig) -> EstimateMatrix:
    """ALS initialised from the SVT factors (singular values split by square root)."""
    warm = svt(obs, cfg.rank)
    est = als(obs, replace(cfg, warm_start=warm))
    est.algorithm = "svt+als"
    est.singular_values = warm.singular_values
    return est


def estimate(obs: ObservationMatrix, algorithm: str, cfg: AlsConfig) -> EstimateMatrix:
    algorithm = algorithm.lower()
    if algorithm == "svt":
        return svt(obs, cfg.rank)
    if algorithm == "als":
        return als(obs, cfg)
    if algorithm in ("svt+als", "svt_then_als", "hybrid"):
        return svt_then_als(obs, cfg)
    raise DataError(f"unknown algorithm {algorithm!r}; choose from {ALGORITHMS}")
