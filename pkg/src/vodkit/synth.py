"""Synthetic click data from a known latent variable model.

Every estimator in the package is tested against data drawn here, where the
true CTR matrix is known.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError
from .ingest import IntentTensor, ObservationMatrix, write_click_log

# Human CTR band; mean matrices are scaled so their maximum is the top end.
CTR_LOW, CTR_HIGH = 0.001, 0.02
LINKS = ("dot", "logistic")


@dataclass
class LatentModel:
    """Factors of ``M[i, j] = f(theta_i, omega_j)`` (and ``psi_l`` with intent).

    For the ``dot`` link the mean is ``scale * sum_r theta_ir omega_jr psi_lr``,
    an exact rank-``r`` matrix (flattened tensor). ``slice_ad_factors``, when
    set, gives every intent slice its own ad factors instead of sharing them.
    """

    user_factors: np.ndarray
    ad_factors: np.ndarray
    intent_factors: np.ndarray | None = None
    link: str = "dot"
    scale: float = 1.0
    slice_ad_factors: np.ndarray | None = None

    @property
    def rank(self) -> int:
        return self.user_factors.shape[1]

    @property
    def has_intent(self) -> bool:
        return self.intent_factors is not None or self.slice_ad_factors is not None

    def _raw(self) -> np.ndarray:
        return self.user_factors @ self.ad_factors.T

    def _raw_tensor(self) -> np.ndarray:
        if self.slice_ad_factors is not None:
            return np.einsum("ir,ljr->ijl", self.user_factors, self.slice_ad_factors)
        return np.einsum("ir,jr,lr->ijl", self.user_factors, self.ad_factors, self.intent_factors)

    def _link(self, z: np.ndarray) -> np.ndarray:
        if self.link == "dot":
            return np.clip(self.scale * z, 0.0, 1.0)
        std = z.std() or 1.0
        return CTR_LOW + (CTR_HIGH - CTR_LOW) / (1.0 + np.exp(-self.scale * (z - z.mean()) / std))

    def means(self) -> np.ndarray:
        return self._link(self._raw())

    def tensor_means(self) -> np.ndarray:
        if not self.has_intent:
            raise DataError("model has no intent factors")
        return self._link(self._raw_tensor())


def _unit_columns(a):
    norms = np.linalg.norm(a, axis=0)
    return a / np.where(norms > 0, norms, 1.0)


def generate_model(
    m: int,
    n: int,
    r: int,
    k: int | None = None,
    seed: int = 0,
    link: str = "dot",
    spread: str = "uniform",
    shared_intent: bool = True,
    logistic_gain: float = 4.0,
) -> LatentModel:
    """Draw factors uniform on [0, 1], normalise each factor column.

    ``spread="heterogeneous"`` makes the first latent dimension a constant
    user baseline whose weight varies log-uniformly across ads, so some ad
    columns are nearly flat across users and others very spread out. Each
    ad's factors are then rescaled so all columns share one mean CTR.
    ``shared_intent=False`` draws independent ad factors per intent slice.
    """
    if min(m, n, r) < 1 or (k is not None and k < 1):
        raise DataError(f"dimensions must be positive: m={m} n={n} r={r} k={k}")
    if link not in LINKS:
        raise DataError(f"unknown link {link!r}")
    rng = np.random.default_rng(seed)
    theta = _unit_columns(rng.uniform(0.0, 1.0, (m, r)))
    omega = _unit_columns(rng.uniform(0.0, 1.0, (n, r)))
    if spread == "heterogeneous":
        theta[:, 0] = 1.0 / np.sqrt(m)
        rest = omega[:, 1:].sum(axis=1) if r > 1 else np.ones(n)
        omega[:, 0] = rest * 10.0 ** rng.uniform(-1.0, 1.0, n)
        # equal column means; row scaling of omega keeps the rank
        omega /= (theta @ omega.T).mean(axis=0)[:, None]
    elif spread != "uniform":
        raise DataError(f"unknown spread {spread!r}")
    psi = slices = None
    if k is not None:
        if shared_intent:
            psi = _unit_columns(rng.uniform(0.0, 1.0, (k, r)))
        else:
            slices = np.stack([_unit_columns(rng.uniform(0.0, 1.0, (n, r))) for _ in range(k)])
    model = LatentModel(theta, omega, psi, link, 1.0, slices)
    if link == "dot":
        raw = model._raw_tensor() if model.has_intent else model._raw()
        top = raw.max()
        model.scale = CTR_HIGH / top if top > 0 else 1.0
    else:
        model.scale = logistic_gain
    return model


@dataclass
class SamplingConfig:
    rho: float = 0.4
    exposures_per_observed_cell: int = 1000
    seed: int = 0
    botfraction: float = 0.0
    # exposures ~ 1 + Poisson(E - 1) per observed cell instead of exactly E
    heterogeneous_exposures: bool = False

    def __post_init__(self):
        if not 0.0 <= self.rho <= 1.0:
            raise DataError(f"rho must lie in [0, 1], got {self.rho}")
        if not 0.0 <= self.botfraction < 1.0:
            raise DataError(f"botfraction must lie in [0, 1), got {self.botfraction}")
        if self.exposures_per_observed_cell < 1:
            raise DataError("exposures_per_observed_cell must be positive")


@dataclass
class SyntheticSample:
    obs: ObservationMatrix | IntentTensor
    means: np.ndarray      # true CTR per cell, bots included
    is_bot: np.ndarray     # per user row


def _keys(prefix, count):
    width = len(str(max(count - 1, 0)))
    return [f"{prefix}{i:0{width}d}" for i in range(count)]


def _draw(means, cfg, rng):
    m = means.shape[0]
    n_bots = int(round(cfg.botfraction * m))
    bots = np.zeros(m, dtype=bool)
    bots[rng.choice(m, n_bots, replace=False)] = True
    bot_ctr = rng.uniform(0.5, 1.0, n_bots)
    means = means.copy()
    means[bots] = bot_ctr.reshape((-1,) + (1,) * (means.ndim - 1))
    observed = rng.random(means.shape) < cfg.rho
    e = cfg.exposures_per_observed_cell
    if cfg.heterogeneous_exposures:
        counts = np.where(observed, 1 + rng.poisson(e - 1, means.shape), 0)
    else:
        counts = np.where(observed, e, 0)
    clicks = rng.binomial(counts, means)
    # Bots click deterministically at (at least) their rate.
    clicks[bots] = np.ceil(means[bots] * counts[bots]).astype(np.int64)
    return clicks, counts, means, bots


def sample(model: LatentModel, cfg: SamplingConfig) -> SyntheticSample:
    rng = np.random.default_rng(cfg.seed)
    clicks, counts, means, bots = _draw(model.means(), cfg, rng)
    m, n = means.shape
    obs = ObservationMatrix.from_counts(clicks, counts, _keys("u", m), _keys("c", n))
    return SyntheticSample(obs, means, bots)


def sample_observations(model: LatentModel, cfg: SamplingConfig) -> ObservationMatrix:
    """Observe each cell with probability rho; value = mean of E Bernoulli clicks."""
    return sample(model, cfg).obs


def sample_tensor(model: LatentModel, cfg: SamplingConfig) -> SyntheticSample:
    if not model.has_intent:
        raise DataError("model has no intent factors")
    rng = np.random.default_rng(cfg.seed)
    clicks, counts, means, bots = _draw(model.tensor_means(), cfg, rng)
    m, n, k = means.shape
    obs = IntentTensor.from_counts(clicks, counts, _keys("u", m), _keys("c", n), _keys("s", k))
    return SyntheticSample(obs, means, bots)


def sample_intent_tensor(model: LatentModel, cfg: SamplingConfig) -> IntentTensor:
    return sample_tensor(model, cfg).obs


def write_dataset(directory, smp: SyntheticSample) -> dict[str, Path]:
    """Write ``clicks.csv`` (ingest schema) and ``truth.csv`` (true means, bot labels)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    clicks_path = directory / "clicks.csv"
    truth_path = directory / "truth.csv"
    n_rows = write_click_log(clicks_path, smp.obs)
    obs = smp.obs
    with open(truth_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("user_group", "ad_category", "intent", "mean", "is_bot"))
        for idx in np.ndindex(smp.means.shape):
            intent = obs.intent_keys[idx[2]] if len(idx) == 3 else ""
            w.writerow((obs.row_keys[idx[0]], obs.col_keys[idx[1]], intent, repr(float(smp.means[idx])), int(smp.is_bot[idx[0]])))
    return {"clicks": clicks_path, "truth": truth_path, "rows": n_rows}
