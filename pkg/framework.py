"""
The two reusable nearest-neighbor modules and the metrics they compose.

Distance: row-wise (or column-wise) dissimilarity between two rows, the
mask-weighted average of an entry metric over the columns both rows observe,
skipping the target column.

Average: the minimizer of the weighted sum of metric values to the observed
entries. With squared difference it is the weighted mean; for distributions
it is a barycenter (a mixture under MMD, a quantile average under W2).
"""

import logging
import math
from dataclasses import dataclass
from enum import Enum
from functools import cached_property
from typing import Literal, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.spatial.distance import cdist, pdist

from core import DistMatrix, MaskedMatrix, transpose
from errors import (
    EmptyMeasure,
    EmptySample,
    NoDefinedDistances,
    NonPositiveBandwidth,
    TooFewSamples,
    ZeroTotalWeight,
)

logger = logging.getLogger(__name__)

MEDIAN_HEURISTIC_POINTS = 1000


class Axis(str, Enum):
    ROW = "row"
    COL = "col"


# ---------------------------------------------------------------------------
# Entry metrics
# ---------------------------------------------------------------------------

def sq_diff(x: float, y: float) -> float:
    return (x - y) ** 2


def gaussian_kernel(x, y, h: float):
    if h <= 0:
        raise NonPositiveBandwidth(f"kernel bandwidth must be positive, got {h}")
    return np.exp(-((np.asarray(x) - np.asarray(y)) ** 2) / (2.0 * h * h))


def _gaussian_gram(a: np.ndarray, b: np.ndarray, h: float) -> np.ndarray:
    return np.exp(-0.5 * cdist(a[:, None], b[:, None], "sqeuclidean") / h**2)


def _canonical_pair(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # Evaluating in a fixed order makes the estimators exactly symmetric.
    if (len(a), a.tobytes()) <= (len(b), b.tobytes()):
        return a, b
    return b, a


def mmd2_ustat(a, b, bandwidth: float = 1.0) -> float:
    """Unbiased U-statistic estimate of the squared MMD under a Gaussian kernel.

    The estimate may be negative when the two samples are close.
    """
    if bandwidth <= 0:
        raise NonPositiveBandwidth(f"kernel bandwidth must be positive, got {bandwidth}")
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if len(a) < 2 or len(b) < 2:
        raise TooFewSamples(
            f"MMD U-statistic needs at least 2 samples per side, got {len(a)} and {len(b)}"
        )
    a, b = _canonical_pair(a, b)
    m, n = len(a), len(b)

    k_aa = _gaussian_gram(a, a, bandwidth)
    k_bb = _gaussian_gram(b, b, bandwidth)
    k_ab = _gaussian_gram(a, b, bandwidth)
    within_a = (k_aa.sum() - np.trace(k_aa)) / (m * (m - 1))
    within_b = (k_bb.sum() - np.trace(k_bb)) / (n * (n - 1))
    cross = k_ab.sum() / (m * n)
    return float(within_a + within_b - 2.0 * cross)


def _quantile_index(n: int, grid: int) -> np.ndarray:
    # index of Q((k - 0.5) / grid) = inf{x : F(x) >= u} among n sorted samples
    k = np.arange(1, grid + 1)
    return -((-(2 * k - 1) * n) // (2 * grid)) - 1


def w2sq_hat(a, b) -> float:
    """Squared 2-Wasserstein distance between two 1-D empirical measures."""
    a = np.sort(np.asarray(a, dtype=float).ravel())
    b = np.sort(np.asarray(b, dtype=float).ravel())
    if len(a) == 0 or len(b) == 0:
        raise EmptySample(f"W2 needs non-empty samples, got sizes {len(a)} and {len(b)}")
    if len(a) == len(b):
        return float(np.mean((a - b) ** 2))
    grid = max(len(a), len(b))
    qa = a[_quantile_index(len(a), grid)]
    qb = b[_quantile_index(len(b), grid)]
    return float(np.mean((qa - qb) ** 2))


class EntryMetric(BaseModel):
    """Entry-wise dissimilarity used by the Distance module."""

    model_config = ConfigDict(frozen=True)

    kind: Literal["squared_difference", "mmd2", "w2_squared"] = Field(
        default="squared_difference", description="Which entry metric to evaluate"
    )
    bandwidth: float | None = Field(default=None, description="Gaussian kernel bandwidth (MMD only)")

    @model_validator(mode="after")
    def _check_bandwidth(self):
        if self.kind == "mmd2" and (self.bandwidth is None or self.bandwidth <= 0):
            raise ValueError(f"mmd2 needs a positive bandwidth, got {self.bandwidth}")
        return self

    @classmethod
    def squared_difference(cls) -> "EntryMetric":
        return cls(kind="squared_difference")

    @classmethod
    def mmd2(cls, bandwidth: float) -> "EntryMetric":
        return cls(kind="mmd2", bandwidth=bandwidth)

    @classmethod
    def w2_squared(cls) -> "EntryMetric":
        return cls(kind="w2_squared")

    @property
    def is_distributional(self) -> bool:
        return self.kind != "squared_difference"

    def between(self, x, y) -> float:
        if self.kind == "mmd2":
            return mmd2_ustat(x, y, self.bandwidth)
        if self.kind == "w2_squared":
            return w2sq_hat(x, y)
        return sq_diff(float(x), float(y))


def median_heuristic_bandwidth(dm: DistMatrix) -> float:
    """Median pairwise absolute difference of the pooled observed samples."""
    pooled = np.sort(dm.pooled_samples())
    if len(pooled) > MEDIAN_HEURISTIC_POINTS:
        picks = np.linspace(0, len(pooled) - 1, MEDIAN_HEURISTIC_POINTS).round().astype(int)
        pooled = pooled[picks]
    if len(pooled) < 2:
        return 1.0
    median = float(np.median(pdist(pooled[:, None], "cityblock")))
    return median if median > 0 else 1.0


def default_metric(m: MaskedMatrix | DistMatrix) -> EntryMetric:
    if isinstance(m, DistMatrix):
        return EntryMetric.mmd2(median_heuristic_bandwidth(m))
    return EntryMetric.squared_difference()


# ---------------------------------------------------------------------------
# Distance module
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DissimilarityProfile:
    axis: Axis
    target: int
    indices: np.ndarray  # the other rows (or columns)
    values: np.ndarray  # +inf where undefined
    defined: np.ndarray

    def __len__(self) -> int:
        return len(self.indices)

    def defined_values(self) -> np.ndarray:
        return self.values[self.defined]

    @cached_property
    def sorted_defined(self) -> np.ndarray:
        return np.sort(self.defined_values())


def _entry(m: MaskedMatrix | DistMatrix, row: int, col: int):
    return m.samples[row, col] if isinstance(m, DistMatrix) else m.values[row, col]


def dissimilarity(
    m: MaskedMatrix | DistMatrix,
    axis: Axis,
    a: int,
    b: int,
    exclude: int,
    metric: EntryMetric | None = None,
) -> tuple[float, bool]:
    """Dissimilarity between rows (or columns) `a` and `b`, skipping index `exclude`.

    Returns (+inf, False) when the two share no observed index.
    """
    if a == b:
        raise ValueError(f"dissimilarity needs two distinct indices, got {a} twice")
    metric = metric or default_metric(m)
    if Axis(axis) == Axis.COL:
        m = transpose(m)

    overlap = m.mask[a] & m.mask[b]
    overlap[exclude] = False
    count = int(overlap.sum())
    if count == 0:
        return math.inf, False

    if isinstance(m, MaskedMatrix):
        total = float((((m.values[a] - m.values[b]) ** 2) * overlap).sum(where=overlap))
    else:
        total = float(sum(metric.between(m.samples[a, s], m.samples[b, s]) for s in np.flatnonzero(overlap)))
    return total / count, True


class DistanceModule:
    """
    Distance module bound to one matrix and one entry metric.

    For every (axis, target) it caches the metric totals against each other
    row over all shared columns, so the profile for any excluded column is a
    subtraction away. Profiles themselves are kept per (axis, target,
    excluded index) and are shared by every caller of the module.
    """

    def __init__(self, matrix: MaskedMatrix | DistMatrix, metric: EntryMetric | None = None):
        self.matrix = matrix
        self.metric = metric or default_metric(matrix)
        if isinstance(matrix, MaskedMatrix) and self.metric.is_distributional:
            raise ValueError(f"metric {self.metric.kind} needs a DistMatrix")
        if isinstance(matrix, DistMatrix) and not self.metric.is_distributional:
            raise ValueError("squared_difference needs a MaskedMatrix")
        self._views = {Axis.ROW: matrix}
        self._filled = {}
        self._rows = {}
        self._profiles = {}

    def view(self, axis: Axis) -> MaskedMatrix | DistMatrix:
        axis = Axis(axis)
        if axis not in self._views:
            self._views[axis] = transpose(self.matrix)
        return self._views[axis]

    def _filled_view(self, axis: Axis) -> np.ndarray:
        if axis not in self._filled:
            self._filled[axis] = self.view(axis).filled()
        return self._filled[axis]

    def _row_state(self, axis: Axis, target: int):
        key = (axis, target)
        if key in self._rows:
            return self._rows[key]

        m = self.view(axis)
        overlap = m.mask & m.mask[target]
        overlap[target] = False
        if isinstance(m, MaskedMatrix):
            filled = self._filled_view(axis)
            terms = None
            totals = np.where(overlap, (filled - filled[target]) ** 2, 0.0).sum(axis=1)
        else:
            terms = np.zeros(m.shape)
            for row, col in zip(*np.nonzero(overlap)):
                terms[row, col] = self.metric.between(m.samples[target, col], m.samples[row, col])
            totals = terms.sum(axis=1)
        state = (overlap, terms, totals, overlap.sum(axis=1))
        self._rows[key] = state
        return state

    def profile(self, axis: Axis, target: int, exclude: int) -> DissimilarityProfile:
        axis = Axis(axis)
        key = (axis, int(target), int(exclude))
        if key not in self._profiles:
            self._profiles[key] = self._build_profile(axis, int(target), int(exclude))
        return self._profiles[key]

    def _build_profile(self, axis: Axis, target: int, exclude: int) -> DissimilarityProfile:
        overlap, terms, totals, counts = self._row_state(axis, target)
        m = self.view(axis)
        others = np.delete(np.arange(m.shape[0]), target)

        excluded_overlap = overlap[others, exclude]
        if terms is None:
            filled = self._filled_view(axis)
            excluded_terms = np.where(
                excluded_overlap, (filled[others, exclude] - filled[target, exclude]) ** 2, 0.0
            )
        else:
            excluded_terms = terms[others, exclude]

        n = counts[others] - excluded_overlap
        defined = n > 0
        values = np.full(len(others), math.inf)
        values[defined] = (totals[others] - excluded_terms)[defined] / n[defined]
        return DissimilarityProfile(axis=axis, target=target, indices=others, values=values, defined=defined)


def dissimilarity_profile(
    m: MaskedMatrix | DistMatrix,
    axis: Axis,
    target: int,
    exclude: int,
    metric: EntryMetric | None = None,
) -> DissimilarityProfile:
    return DistanceModule(m, metric).profile(axis, target, exclude)


class Percentile(BaseModel):
    """Threshold given as a percentile of the target's own dissimilarities."""

    model_config = ConfigDict(frozen=True)

    q: float = Field(ge=0, le=100, description="Percentile in [0, 100], nearest-rank convention")


def percentile_to_threshold(profile: DissimilarityProfile, q: float) -> float:
    values = profile.sorted_defined
    if len(values) == 0:
        raise NoDefinedDistances(f"profile of {profile.axis.value} {profile.target} has no defined distance")
    rank = max(1, math.ceil(q * len(values) / 100.0 - 1e-9))
    return float(values[min(rank, len(values)) - 1])


def resolve_threshold(eta: float | Percentile, profile: DissimilarityProfile) -> float:
    if isinstance(eta, Percentile):
        return percentile_to_threshold(profile, eta.q)
    return float(eta)


# ---------------------------------------------------------------------------
# Average module
# ---------------------------------------------------------------------------

def weighted_scalar_average(w, m: MaskedMatrix) -> float:
    """argmin_x sum w A (x - Z)^2, i.e. the mask-weighted mean."""
    w = np.asarray(w, dtype=float)
    if w.shape != m.shape:
        raise ValueError(f"weights {w.shape} do not match matrix {m.shape}")
    if (w < 0).any():
        raise ValueError("weights must be nonnegative")
    effective = np.where(m.mask, w, 0.0)
    total = effective.sum()
    if total <= 0:
        raise ZeroTotalWeight("no positive weight falls on an observed entry")
    return float((effective * m.filled()).sum() / total)


@dataclass(frozen=True, eq=False)
class EmpiricalMeasure:
    atoms: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        atoms = np.asarray(self.atoms, dtype=float).ravel()
        weights = np.asarray(self.weights, dtype=float).ravel()
        if len(atoms) == 0:
            raise EmptyMeasure("an empirical measure needs at least one atom")
        if len(atoms) != len(weights):
            raise ValueError(f"{len(atoms)} atoms but {len(weights)} weights")
        if (weights < 0).any() or abs(weights.sum() - 1.0) > 1e-9:
            raise ValueError(f"weights must be nonnegative and sum to 1, got sum {weights.sum()}")
        object.__setattr__(self, "atoms", atoms)
        object.__setattr__(self, "weights", weights)

    @classmethod
    def from_samples(cls, samples) -> "EmpiricalMeasure":
        samples = np.asarray(samples, dtype=float).ravel()
        if len(samples) == 0:
            raise EmptyMeasure("cannot build a measure from an empty sample")
        return cls(samples, np.full(len(samples), 1.0 / len(samples)))

    def mean(self) -> float:
        return float(np.dot(self.weights, self.atoms))

    def cdf(self, x) -> np.ndarray:
        """Right-continuous CDF evaluated at `x`."""
        order = np.argsort(self.atoms, kind="stable")
        atoms = self.atoms[order]
        cumulative = np.concatenate([[0.0], np.cumsum(self.weights[order])])
        return cumulative[np.searchsorted(atoms, np.asarray(x, dtype=float), side="right")]

    def quantiles(self, grid: int) -> np.ndarray:
        """Q(u) = inf{x : F(x) >= u} at u = (k - 0.5) / grid, k = 1..grid."""
        order = np.argsort(self.atoms, kind="stable")
        atoms = self.atoms[order]
        cumulative = np.cumsum(self.weights[order])
        cumulative[-1] = 1.0
        u = (2.0 * np.arange(1, grid + 1) - 1.0) / (2.0 * grid)
        idx = np.searchsorted(cumulative, u, side="left")
        return atoms[np.minimum(idx, len(atoms) - 1)]


def _normalized(w, measures: Sequence[EmpiricalMeasure]) -> np.ndarray:
    w = np.asarray(w, dtype=float).ravel()
    if len(w) != len(measures):
        raise ValueError(f"{len(w)} weights for {len(measures)} measures")
    if (w < 0).any():
        raise ValueError("barycenter weights must be nonnegative")
    total = w.sum()
    if total <= 0:
        raise ZeroTotalWeight("barycenter weights sum to zero")
    return w / total


def mmd_barycenter(w, measures: Sequence[EmpiricalMeasure]) -> EmpiricalMeasure:
    """Weighted mixture of the measures (duplicate atoms are kept)."""
    w = _normalized(w, measures)
    keep = np.flatnonzero(w > 0)
    atoms = np.concatenate([measures[j].atoms for j in keep])
    weights = np.concatenate([w[j] * measures[j].weights for j in keep])
    return EmpiricalMeasure(atoms, weights / weights.sum())


def w2_barycenter(w, measures: Sequence[EmpiricalMeasure]) -> EmpiricalMeasure:
    """1-D Wasserstein barycenter: weighted average of quantile functions."""
    w = _normalized(w, measures)
    keep = np.flatnonzero(w > 0)
    grid = max(len(measures[j].atoms) for j in keep)
    atoms = np.zeros(grid)
    for j in keep:
        atoms += w[j] * measures[j].quantiles(grid)
    return EmpiricalMeasure(atoms, np.full(grid, 1.0 / grid))
