"""Click logs in, observation matrices out.

A click log is a CSV with one row per ad exposure::

    user_group,ad_category,intent,clicked

Rows are grouped into (user group, ad category) cells; each cell keeps its
click and exposure counts so the empirical CTR is an exact ratio.
"""
from __future__ import annotations

import csv
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Iterator, NamedTuple

import numpy as np

from . import kernels
from .errors import DataError, MalformedLogError

log = logging.getLogger(__name__)

COLUMNS = ("user_group", "ad_category", "intent", "clicked")
# Aggregate click rate of the Avito context-ad log: 1,146,289 / 190,157,735.
AVITO_CLICK_RATE = 1_146_289 / 190_157_735
HUMAN_CTR_CEILING = 0.02


class ClickRecord(NamedTuple):
    user_group: str
    ad_category: str
    intent: str | None
    clicked: bool


@dataclass
class ObservationMatrix:
    """Partially observed m x n empirical-CTR matrix.

    ``values`` holds NaN where a cell was never exposed; ``counts`` is the
    number of exposures behind each value (0 exactly where missing).
    """

    values: np.ndarray
    counts: np.ndarray
    row_keys: list[str] = field(default=None)
    col_keys: list[str] = field(default=None)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.values.ndim != 2 or self.values.shape != self.counts.shape:
            raise DataError(f"values {self.values.shape} and counts {self.counts.shape} must be equal 2-d shapes")
        m, n = self.values.shape
        if self.row_keys is None:
            self.row_keys = [f"u{i}" for i in range(m)]
        if self.col_keys is None:
            self.col_keys = [f"c{j}" for j in range(n)]
        if len(self.row_keys) != m or len(self.col_keys) != n:
            raise DataError("key lists do not match matrix shape")
        if (np.isnan(self.values) != (self.counts == 0)).any():
            raise DataError("a value is missing exactly where its count is zero")
        if (self.counts < 0).any():
            raise DataError("negative exposure count")
        obs = self.values[self.mask]
        if obs.size and (obs.min() < 0 or obs.max() > 1):
            raise DataError("observed values must lie in [0, 1]")

    @classmethod
    def from_counts(cls, clicks, counts, row_keys=None, col_keys=None):
        clicks = np.asarray(clicks, dtype=np.int64)
        counts = np.asarray(counts, dtype=np.int64)
        with np.errstate(invalid="ignore", divide="ignore"):
            values = np.where(counts > 0, clicks / np.maximum(counts, 1), np.nan)
        return cls(values, counts, row_keys, col_keys)

    @classmethod
    def from_dense(cls, values, mask=None, row_keys=None, col_keys=None):
        """Wrap real values; each observed cell counts as one exposure."""
        values = np.array(values, dtype=np.float64)
        if mask is None:
            mask = ~np.isnan(values)
        mask = np.asarray(mask, dtype=bool)
        values[~mask] = np.nan
        return cls(values, mask.astype(np.int64), row_keys, col_keys)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def mask(self) -> np.ndarray:
        return self.counts > 0

    @property
    def clicks(self) -> np.ndarray:
        return np.rint(np.nan_to_num(self.values) * self.counts).astype(np.int64)

    @property
    def n_observed(self) -> int:
        return int(self.mask.sum())

    @property
    def fill(self) -> float:
        return self.n_observed / self.values.size

    def zero_filled(self) -> np.ndarray:
        return np.nan_to_num(self.values, nan=0.0)

    def observed(self):
        """(rows, cols, values) of observed cells in row-major order."""
        rows, cols = np.nonzero(self.mask)
        return rows, cols, self.values[rows, cols]

    def take_rows(self, keep) -> "ObservationMatrix":
        keep = np.asarray(keep)
        if keep.dtype == bool:
            keep = np.flatnonzero(keep)
        return ObservationMatrix(
            self.values[keep], self.counts[keep], [self.row_keys[i] for i in keep], list(self.col_keys)
        )

    def with_mask(self, mask) -> "ObservationMatrix":
        """Copy keeping only the observed cells where ``mask`` is true."""
        mask = np.asarray(mask, dtype=bool) & self.mask
        values = np.where(mask, self.values, np.nan)
        return ObservationMatrix(values, np.where(mask, self.counts, 0), list(self.row_keys), list(self.col_keys))

    def equals(self, other: "ObservationMatrix") -> bool:
        return (
            self.row_keys == other.row_keys
            and self.col_keys == other.col_keys
            and np.array_equal(self.counts, other.counts)
            and np.array_equal(self.values, other.values, equal_nan=True)
        )


@dataclass
class IntentTensor:
    """m x n x k analogue of :class:`ObservationMatrix` (user, ad, intent)."""

    values: np.ndarray
    counts: np.ndarray
    row_keys: list[str] = field(default=None)
    col_keys: list[str] = field(default=None)
    intent_keys: list[str] = field(default=None)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.values.ndim != 3 or self.values.shape != self.counts.shape:
            raise DataError("values and counts must be equal 3-d shapes")
        m, n, k = self.values.shape
        self.row_keys = self.row_keys or [f"u{i}" for i in range(m)]
        self.col_keys = self.col_keys or [f"c{j}" for j in range(n)]
        self.intent_keys = self.intent_keys or [f"s{l}" for l in range(k)]
        if (len(self.row_keys), len(self.col_keys), len(self.intent_keys)) != (m, n, k):
            raise DataError("key lists do not match tensor shape")
        if (np.isnan(self.values) != (self.counts == 0)).any():
            raise DataError("a value is missing exactly where its count is zero")

    @classmethod
    def from_counts(cls, clicks, counts, row_keys=None, col_keys=None, intent_keys=None):
        counts = np.asarray(counts, dtype=np.int64)
        with np.errstate(invalid="ignore", divide="ignore"):
            values = np.where(counts > 0, np.asarray(clicks) / np.maximum(counts, 1), np.nan)
        return cls(values, counts, row_keys, col_keys, intent_keys)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape

    @property
    def mask(self) -> np.ndarray:
        return self.counts > 0

    @property
    def clicks(self) -> np.ndarray:
        return np.rint(np.nan_to_num(self.values) * self.counts).astype(np.int64)

    def slice(self, l: int) -> ObservationMatrix:
        return ObservationMatrix(self.values[:, :, l], self.counts[:, :, l], list(self.row_keys), list(self.col_keys))

    def equals(self, other: "IntentTensor") -> bool:
        return (
            (self.row_keys, self.col_keys, self.intent_keys) == (other.row_keys, other.col_keys, other.intent_keys)
            and np.array_equal(self.counts, other.counts)
            and np.array_equal(self.values, other.values, equal_nan=True)
        )


# ---------------------------------------------------------------------------
# Taxonomy
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Taxonomy:
    tier1: tuple[str, ...]
    tier2: dict[str, tuple[str, ...]]

    @property
    def n_tier2(self) -> int:
        return sum(len(v) for v in self.tier2.values())

    def parent(self, name: str) -> str | None:
        for t1, children in self.tier2.items():
            if name in children:
                return t1
        return None

    @classmethod
    def from_csv(cls, path) -> "Taxonomy":
        with open(path, newline="", encoding="utf-8") as fh:
            return cls._from_rows(csv.DictReader(fh))

    @classmethod
    def _from_rows(cls, rows) -> "Taxonomy":
        tier2: dict[str, list[str]] = {}
        for row in rows:
            tier2.setdefault(row["tier1"].strip(), []).append(row["tier2"].strip())
        return cls(tuple(tier2), {k: tuple(v) for k, v in tier2.items()})


def load_taxonomy() -> Taxonomy:
    """The bundled two-tier ad-category table (28 tier-1, 341 tier-2)."""
    text = resources.files("vodkit").joinpath("data/iab_tiers.csv").read_text(encoding="utf-8")
    return Taxonomy._from_rows(csv.DictReader(text.splitlines()))


# ---------------------------------------------------------------------------
# Reading and writing logs
# ---------------------------------------------------------------------------

_TRUE = {"1", "true", "t", "yes"}
_FALSE = {"0", "false", "f", "no"}


class ClickLogReader:
    """Iterate :class:`ClickRecord` from a CSV log.

    Malformed rows are skipped and counted. When iteration finishes, a
    malformed share above ``max_malformed`` raises :class:`MalformedLogError`.
    ``schema`` maps our column names to the file's header names.
    """

    def __init__(self, path, schema: dict[str, str] | None = None, max_malformed: float = 0.01):
        self.path = Path(path)
        self.schema = {c: c for c in COLUMNS}
        self.schema.update(schema or {})
        self.max_malformed = max_malformed
        self.rows = 0
        self.malformed = 0
        self.malformed_lines: list[int] = []

    def __iter__(self) -> Iterator[ClickRecord]:
        self.rows = self.malformed = 0
        self.malformed_lines = []
        with open(self.path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            header = reader.fieldnames or []
            for col in ("user_group", "ad_category", "clicked"):
                if self.schema[col] not in header:
                    raise DataError(f"{self.path}: missing required column {self.schema[col]!r}")
            has_intent = self.schema["intent"] in header
            for row in reader:
                self.rows += 1
                rec = self._parse(row, has_intent)
                if rec is None:
                    self.malformed += 1
                    self.malformed_lines.append(reader.line_num)
                    continue
                yield rec
        if self.malformed:
            log.warning("%s: %d of %d rows malformed", self.path, self.malformed, self.rows)
            if self.malformed > self.max_malformed * self.rows:
                raise MalformedLogError(
                    f"{self.path}: {self.malformed}/{self.rows} malformed rows exceeds {self.max_malformed:.1%}"
                )

    def _parse(self, row, has_intent):
        if None in row or any(v is None for v in row.values()):
            return None
        user = row[self.schema["user_group"]].strip()
        cat = row[self.schema["ad_category"]].strip()
        flag = row[self.schema["clicked"]].strip().lower()
        if not user or not cat:
            return None
        if flag in _TRUE:
            clicked = True
        elif flag in _FALSE:
            clicked = False
        else:
            return None
        intent = row[self.schema["intent"]].strip() if has_intent else ""
        return ClickRecord(user, cat, intent or None, clicked)


def read_click_log(path, schema=None, max_malformed: float = 0.01) -> ClickLogReader:
    return ClickLogReader(path, schema, max_malformed)


def _key_index(keys):
    return {k: i for i, k in enumerate(keys)}


def aggregate(records: Iterable[ClickRecord], min_exposures: int = 1) -> ObservationMatrix:
    """Group records into cells; keys sorted lexicographically.

    Cells with fewer than ``min_exposures`` exposures are treated as missing.
    """
    cells: dict[tuple[str, str], list[int]] = defaultdict(lambda: [0, 0])
    for rec in records:
        c = cells[rec.user_group, rec.ad_category]
        c[0] += rec.clicked
        c[1] += 1
    if not cells:
        raise DataError("no click records to aggregate")
    rows = sorted({u for u, _ in cells})
    cols = sorted({a for _, a in cells})
    ri, ci = _key_index(rows), _key_index(cols)
    clicks = np.zeros((len(rows), len(cols)), dtype=np.int64)
    counts = np.zeros_like(clicks)
    for (u, a), (k, e) in cells.items():
        if e >= min_exposures:
            clicks[ri[u], ci[a]] = k
            counts[ri[u], ci[a]] = e
    return ObservationMatrix.from_counts(clicks, counts, rows, cols)


def aggregate_tensor(records: Iterable[ClickRecord], min_exposures: int = 1) -> IntentTensor:
    cells: dict[tuple[str, str, str], list[int]] = defaultdict(lambda: [0, 0])
    for rec in records:
        if rec.intent is None:
            raise DataError(f"record without intent: {rec}")
        c = cells[rec.user_group, rec.ad_category, rec.intent]
        c[0] += rec.clicked
        c[1] += 1
    if not cells:
        raise DataError("no click records to aggregate")
    rows = sorted({u for u, _, _ in cells})
    cols = sorted({a for _, a, _ in cells})
    ints = sorted({s for _, _, s in cells})
    ri, ci, li = _key_index(rows), _key_index(cols), _key_index(ints)
    clicks = np.zeros((len(rows), len(cols), len(ints)), dtype=np.int64)
    counts = np.zeros_like(clicks)
    for (u, a, s), (k, e) in cells.items():
        if e >= min_exposures:
            clicks[ri[u], ci[a], li[s]] = k
            counts[ri[u], ci[a], li[s]] = e
    return IntentTensor.from_counts(clicks, counts, rows, cols, ints)


def write_click_log(path, obs: ObservationMatrix | IntentTensor) -> int:
    """Expand cell counts back into one CSV row per exposure.

    Returns the number of data rows written. Aggregating the written file
    reproduces ``obs`` exactly (up to rows/columns with no exposures).
    """
    clicks, counts = obs.clicks, obs.counts
    intents = obs.intent_keys if isinstance(obs, IntentTensor) else None
    n = 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COLUMNS)
        for idx in zip(*np.nonzero(counts)):
            u, a = obs.row_keys[idx[0]], obs.col_keys[idx[1]]
            s = intents[idx[2]] if intents is not None else ""
            k, e = int(clicks[idx]), int(counts[idx])
            w.writerows([(u, a, s, 1)] * k)
            w.writerows([(u, a, s, 0)] * (e - k))
            n += e
    return n


def write_tensor_csv(path, t: IntentTensor) -> None:
    """Observed cells as ``user_group,ad_category,intent,value,count``."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("user_group", "ad_category", "intent", "value", "count"))
        for i, j, l in zip(*np.nonzero(t.counts)):
            w.writerow((t.row_keys[i], t.col_keys[j], t.intent_keys[l], repr(float(t.values[i, j, l])), int(t.counts[i, j, l])))


# ---------------------------------------------------------------------------
# Bot filter and spectrum diagnostics
# ---------------------------------------------------------------------------

def row_ctr(obs: ObservationMatrix) -> np.ndarray:
    """Total clicks / total exposures per row (NaN for rows never exposed)."""
    exposures = obs.counts.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(exposures > 0, obs.clicks.sum(axis=1) / np.maximum(exposures, 1), np.nan)


def threshold_filter(obs: ObservationMatrix, tau: float = HUMAN_CTR_CEILING) -> tuple[ObservationMatrix, float]:
    """Drop user rows whose overall CTR exceeds ``tau``.

    Returns the filtered matrix and the share of exposures retained.
    """
    if not 0 < tau <= 1:
        raise DataError(f"tau must lie in (0, 1], got {tau}")
    ctr = row_ctr(obs)
    keep = ~(ctr > tau)
    if not keep.any():
        raise DataError(f"threshold {tau} removes every row")
    total = obs.counts.sum()
    out = obs.take_rows(keep)
    retention = float(out.counts.sum() / total) if total else 1.0
    return out, retention


class SpectrumRow(NamedTuple):
    tau: float
    retention: float
    singular_values: np.ndarray


def singular_spectrum(obs: ObservationMatrix, taus: Iterable[float]) -> list[SpectrumRow]:
    """Singular values of the zero-filled matrix after each threshold."""
    out = []
    for tau in sorted(set(float(t) for t in taus), reverse=True):
        kept, retention = threshold_filter(obs, tau)
        z = kept.zero_filled()
        if not z.any():
            raise DataError(f"matrix is all zero after filtering at tau={tau}")
        out.append(SpectrumRow(tau, retention, kernels.singular_values(z)))
    return out
