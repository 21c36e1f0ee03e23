"""
Entry-wise nearest-neighbor imputers.

Every thresholded estimator is the Distance module followed by the Average
module: RowNN and ColNN average over one neighborhood, TSNN over the product
of both, DRNN and AutoNN recombine those three. AWNN replaces the hard
threshold with simplex weights. KernelNN and W2NN run RowNN on
distribution-valued entries with a barycenter as the average.

All estimators accept an optional DistanceModule so a caller imputing many
entries of one matrix pays for each row's distance terms once.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from baselines import SpectralParams, soft_impute, usvt
from core import DistMatrix, EntryIndex, MaskedMatrix
from errors import MatrixCompletionError, NonPositiveVariance, NoObservedDonor
from framework import (
    Axis,
    DissimilarityProfile,
    DistanceModule,
    EmpiricalMeasure,
    EntryMetric,
    Percentile,
    median_heuristic_bandwidth,
    mmd_barycenter,
    resolve_threshold,
    w2_barycenter,
)

logger = logging.getLogger(__name__)

SIGMA2_FLOOR = 1e-12

Threshold = Union[float, Percentile]


class ScalarHyperParams(BaseModel):
    model_config = ConfigDict(frozen=True)

    eta_row: Threshold = Field(default=math.inf, description="Row threshold eta_1 (value or percentile)")
    eta_col: Threshold = Field(default=math.inf, description="Column threshold eta_2 (value or percentile)")
    alpha: float = Field(default=0.5, ge=0, le=1, description="AutoNN weight on DRNN")
    awnn_reg: Optional[float] = Field(
        default=None, gt=0, description="AWNN coefficient on ||v||^2 / sigma^2; 2 log(2N) when unset"
    )

    @field_validator("eta_row", "eta_col")
    @classmethod
    def _nonnegative(cls, value):
        if isinstance(value, float) and value < 0:
            raise ValueError(f"thresholds must be nonnegative, got {value}")
        return value


@dataclass(frozen=True)
class Estimate:
    value: Union[float, EmpiricalMeasure]
    fallback_used: bool = False
    neighbor_count: int = 0

    @property
    def scalar(self) -> float:
        """The value, or the mean of the imputed measure."""
        if isinstance(self.value, EmpiricalMeasure):
            return self.value.mean()
        return float(self.value)


@dataclass
class AwnnState:
    sigma2: float
    weights: dict[EntryIndex, np.ndarray] = field(default_factory=dict)
    iterations: int = 0
    converged: bool = False


def _module(m, distances: Optional[DistanceModule], metric: Optional[EntryMetric] = None) -> DistanceModule:
    if distances is not None:
        if distances.matrix is not m:
            raise ValueError("distance module was built for a different matrix")
        return distances
    return DistanceModule(m, metric)


def _neighborhood(profile: DissimilarityProfile, eta: Threshold) -> np.ndarray:
    """Boolean mask over profile.indices: defined and within the threshold."""
    if not profile.defined.any():
        return np.zeros(len(profile), dtype=bool)
    return profile.defined & (profile.values <= resolve_threshold(eta, profile))


def _nearest(profile: DissimilarityProfile, usable: np.ndarray) -> int:
    candidates = np.flatnonzero(usable)
    return int(profile.indices[candidates[np.argmin(profile.values[candidates])]])


def _donors(dist: DistanceModule, axis: Axis, row: int, col: int, eta: Threshold):
    """Donor rows of the view for (row, col); falls back to the nearest usable donor."""
    view = dist.view(axis)
    profile = dist.profile(axis, row, col)
    usable = profile.defined & view.mask[profile.indices, col]
    if not usable.any():
        raise NoObservedDonor(
            f"no {axis.value} with a defined distance to {axis.value} {row} observes index {col}"
        )
    chosen = usable & _neighborhood(profile, eta)
    if chosen.any():
        return profile.indices[chosen], False
    return np.array([_nearest(profile, usable)]), True


def _one_sided(dist: DistanceModule, axis: Axis, row: int, col: int, eta: Threshold) -> Estimate:
    donors, fallback = _donors(dist, axis, row, col, eta)
    values = dist.view(axis).values[donors, col]
    return Estimate(float(values.mean()), fallback, len(donors))


def impute_rownn(
    m: MaskedMatrix, target: EntryIndex, eta1: Threshold, distances: Optional[DistanceModule] = None
) -> Estimate:
    row, col = target
    return _one_sided(_module(m, distances), Axis.ROW, row, col, eta1)


def impute_colnn(
    m: MaskedMatrix, target: EntryIndex, eta2: Threshold, distances: Optional[DistanceModule] = None
) -> Estimate:
    row, col = target
    return _one_sided(_module(m, distances), Axis.COL, col, row, eta2)


def impute_tsnn(
    m: MaskedMatrix,
    target: EntryIndex,
    eta1: Threshold,
    eta2: Threshold,
    distances: Optional[DistanceModule] = None,
    allow_fallback: bool = True,
) -> Estimate:
    """Mean over the product neighborhood, which includes row i and column t but not (i, t)."""
    dist = _module(m, distances)
    row, col = target
    row_profile = dist.profile(Axis.ROW, row, col)
    col_profile = dist.profile(Axis.COL, col, row)
    rows = np.concatenate([[row], row_profile.indices[_neighborhood(row_profile, eta1)]])
    cols = np.concatenate([[col], col_profile.indices[_neighborhood(col_profile, eta2)]])

    block = m.mask[np.ix_(rows, cols)].copy()
    block[0, 0] = False
    if block.any():
        values = m.values[np.ix_(rows, cols)][block]
        return Estimate(float(values.mean()), False, int(block.sum()))

    if not allow_fallback:
        raise NoObservedDonor(f"product neighborhood of {tuple(target)} holds no observed entry")
    usable = row_profile.defined & m.mask[row_profile.indices, col]
    if usable.any():
        return Estimate(float(m.values[_nearest(row_profile, usable), col]), True, 1)
    usable = col_profile.defined & m.mask[row, col_profile.indices]
    if usable.any():
        return Estimate(float(m.values[row, _nearest(col_profile, usable)]), True, 1)
    raise NoObservedDonor(f"no row or column donor for {tuple(target)}")


def impute_drnn(
    m: MaskedMatrix,
    target: EntryIndex,
    eta1: Threshold,
    eta2: Threshold,
    distances: Optional[DistanceModule] = None,
) -> Estimate:
    """RowNN + ColNN - TSNN; 0.5 * (RowNN + ColNN) when the product neighborhood is empty."""
    dist = _module(m, distances)
    row_est = impute_rownn(m, target, eta1, dist)
    col_est = impute_colnn(m, target, eta2, dist)
    try:
        ts_est = impute_tsnn(m, target, eta1, eta2, dist, allow_fallback=False)
    except NoObservedDonor:
        return Estimate(
            0.5 * (row_est.value + col_est.value),
            True,
            row_est.neighbor_count + col_est.neighbor_count,
        )
    return Estimate(
        row_est.value + col_est.value - ts_est.value,
        row_est.fallback_used or col_est.fallback_used,
        row_est.neighbor_count + col_est.neighbor_count + ts_est.neighbor_count,
    )


def blend_autonn(dr_est: Estimate, ts_est: Estimate, alpha: float) -> Estimate:
    """alpha * DRNN + (1 - alpha) * TSNN from estimates sharing both thresholds."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    return Estimate(
        alpha * dr_est.value + (1.0 - alpha) * ts_est.value,
        dr_est.fallback_used or ts_est.fallback_used,
        max(dr_est.neighbor_count, ts_est.neighbor_count),
    )


def impute_autonn(
    m: MaskedMatrix,
    target: EntryIndex,
    eta1: Threshold,
    eta2: Threshold,
    alpha: float,
    distances: Optional[DistanceModule] = None,
) -> Estimate:
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    dist = _module(m, distances)
    dr_est = impute_drnn(m, target, eta1, eta2, dist)
    ts_est = impute_tsnn(m, target, eta1, eta2, dist)
    return blend_autonn(dr_est, ts_est, alpha)


# ---------------------------------------------------------------------------
# AWNN
# ---------------------------------------------------------------------------

def project_to_simplex(y: np.ndarray) -> np.ndarray:
    """Euclidean projection onto the probability simplex (sort and water-fill)."""
    y = np.asarray(y, dtype=float)
    u = np.sort(y)[::-1]
    cumulative = np.cumsum(u) - 1.0
    ranks = np.arange(1, len(y) + 1)
    support = u - cumulative / ranks > 0
    level = cumulative[support][-1] / ranks[support][-1]
    return np.maximum(y - level, 0.0)


def awnn_weights(
    profile: DissimilarityProfile, col_mask, sigma2: float, reg_log_term: float
) -> np.ndarray:
    """
    Minimize reg_log_term * sigma2 * sum v^2 + sum v * rho over the simplex
    restricted to candidates that observe the target column.

    The returned vector is aligned with profile.indices; unusable candidates
    get weight 0.
    """
    if sigma2 <= 0:
        raise NonPositiveVariance(f"noise variance must be positive, got {sigma2}")
    usable = profile.defined & np.asarray(col_mask, dtype=bool)
    if not usable.any():
        raise NoObservedDonor(f"no candidate for {profile.axis.value} {profile.target} observes the target")

    rho = profile.values[usable]
    scores = -(rho - rho.min()) / (2.0 * reg_log_term * sigma2)
    weights = np.zeros(len(profile))
    projected = project_to_simplex(scores)
    weights[usable] = projected / projected.sum()
    return weights


def _awnn_estimate(dist: DistanceModule, row: int, col: int, sigma2: float, reg_log_term: float):
    m = dist.view(Axis.ROW)
    profile = dist.profile(Axis.ROW, row, col)
    weights = awnn_weights(profile, m.mask[profile.indices, col], sigma2, reg_log_term)
    donors = weights > 0
    value = float(np.dot(weights[donors], m.values[profile.indices[donors], col]))
    full = np.zeros(m.n_rows)
    full[profile.indices] = weights
    return Estimate(value, False, int(donors.sum())), full


def impute_awnn(
    m: MaskedMatrix,
    targets: Iterable[EntryIndex],
    max_iter: int = 50,
    tol: float = 1e-6,
    reg_log_term: Optional[float] = None,
    distances: Optional[DistanceModule] = None,
) -> tuple[dict[EntryIndex, Union[Estimate, MatrixCompletionError]], AwnnState]:
    """
    AWNN with a fixed-point iteration on the noise variance.

    Each iteration imputes every observed entry from the other rows with the
    current variance and re-estimates the variance from those residuals. The
    requested targets are imputed once more with the final variance; a
    target without donors is recorded as its error and does not stop the
    batch.
    """
    if m.observed_count < 2:
        raise ValueError(f"AWNN needs at least 2 observed entries, got {m.observed_count}")
    dist = _module(m, distances)
    reg_log_term = reg_log_term if reg_log_term is not None else 2.0 * math.log(2 * m.n_rows)

    observed = m.observed_values()
    sigma2 = max(float(np.mean((observed - observed.mean()) ** 2)), SIGMA2_FLOOR)
    state = AwnnState(sigma2=sigma2)
    entries = m.observed_entries()

    for iteration in range(1, max_iter + 1):
        residuals = []
        for row, col in entries:
            try:
                estimate, _ = _awnn_estimate(dist, row, col, sigma2, reg_log_term)
            except NoObservedDonor:
                continue
            residuals.append(m.values[row, col] - estimate.value)
        updated = max(float(np.mean(np.square(residuals))), SIGMA2_FLOOR) if residuals else sigma2
        delta = abs(updated - sigma2)
        sigma2 = updated
        state.iterations = iteration
        logger.debug(f"AWNN iteration {iteration}: sigma2={sigma2:.6g} (change {delta:.3g})")
        if delta < tol:
            state.converged = True
            break
    state.sigma2 = sigma2

    results = {}
    for target in targets:
        target = EntryIndex(*target)
        try:
            results[target], state.weights[target] = _awnn_estimate(
                dist, target.row, target.col, sigma2, reg_log_term
            )
        except MatrixCompletionError as exc:
            logger.warning(f"AWNN could not impute {tuple(target)}: {exc}")
            results[target] = exc
    return results, state


# ---------------------------------------------------------------------------
# Distributional NN
# ---------------------------------------------------------------------------

def impute_dist_nn(
    dm: DistMatrix,
    target: EntryIndex,
    eta1: Threshold,
    metric: EntryMetric,
    axis: Axis = Axis.ROW,
    distances: Optional[DistanceModule] = None,
) -> Estimate:
    """KernelNN (metric mmd2) or W2NN (metric w2_squared), row- or column-wise."""
    if not metric.is_distributional:
        raise ValueError(f"distributional NN needs mmd2 or w2_squared, got {metric.kind}")
    dist = _module(dm, distances, metric)
    axis = Axis(axis)
    row, col = target if axis == Axis.ROW else EntryIndex(*target).transposed()

    donors, fallback = _donors(dist, axis, row, col, eta1)
    view = dist.view(axis)
    measures = [EmpiricalMeasure.from_samples(view.samples[donor, col]) for donor in donors]
    barycenter = mmd_barycenter if dist.metric.kind == "mmd2" else w2_barycenter
    return Estimate(barycenter(np.ones(len(measures)), measures), fallback, len(donors))


# ---------------------------------------------------------------------------
# Composite imputer
# ---------------------------------------------------------------------------

MethodId = Literal[
    "rownn", "colnn", "tsnn", "drnn", "autonn", "awnn",
    "kernelnn", "w2nn", "kernelnn_col", "w2nn_col",
    "usvt", "softimpute",
]

DISTRIBUTIONAL_METHODS = {"kernelnn", "w2nn", "kernelnn_col", "w2nn_col"}
SPECTRAL_METHODS = {"usvt", "softimpute"}


class EstimatorSpec(BaseModel):
    """A method id with its hyperparameters; the unit the bench tunes and runs."""

    model_config = ConfigDict(frozen=True)

    method: MethodId = Field(description="Which imputer to run")
    params: ScalarHyperParams = Field(default_factory=ScalarHyperParams)
    spectral: SpectralParams = Field(default_factory=SpectralParams)
    bandwidth: Optional[float] = Field(default=None, gt=0, description="KernelNN bandwidth; median heuristic when unset")

    @property
    def is_distributional(self) -> bool:
        return self.method in DISTRIBUTIONAL_METHODS

    def prepare(self, matrix: Union[MaskedMatrix, DistMatrix]) -> Union[MaskedMatrix, DistMatrix]:
        """The matrix this method works on; scalar methods see a DistMatrix through its entry means."""
        if self.is_distributional:
            if not isinstance(matrix, DistMatrix):
                raise ValueError(f"{self.method} needs distribution-valued entries")
            return matrix
        return matrix.entry_means() if isinstance(matrix, DistMatrix) else matrix

    def entry_metric(self, matrix: DistMatrix) -> EntryMetric:
        if self.method.startswith("kernelnn"):
            return EntryMetric.mmd2(self.bandwidth or median_heuristic_bandwidth(matrix))
        return EntryMetric.w2_squared()

    @property
    def distance_key(self) -> Optional[str]:
        """Methods with the same key can share one DistanceModule of the same prepared matrix."""
        if self.method in SPECTRAL_METHODS:
            return None
        if not self.is_distributional:
            return "squared_difference"
        return f"mmd2:{self.bandwidth}" if self.method.startswith("kernelnn") else "w2_squared"

    def distance_module(self, prepared: Union[MaskedMatrix, DistMatrix]) -> Optional[DistanceModule]:
        if self.method in SPECTRAL_METHODS:
            return None
        metric = self.entry_metric(prepared) if self.is_distributional else None
        return DistanceModule(prepared, metric)

    def impute(
        self,
        matrix: Union[MaskedMatrix, DistMatrix],
        targets: Iterable[EntryIndex],
        distances: Optional[DistanceModule] = None,
    ) -> list[Union[Estimate, MatrixCompletionError]]:
        """One Estimate or one recorded error per target, in target order.

        `distances` must come from distance_module(prepare(matrix)).
        """
        targets = [EntryIndex(*target) for target in targets]
        prepared = distances.matrix if distances is not None else self.prepare(matrix)

        if self.method in SPECTRAL_METHODS:
            completed = usvt(prepared, self.spectral) if self.method == "usvt" else soft_impute(prepared, self.spectral)
            return [Estimate(float(completed[t.row, t.col]), False, prepared.observed_count) for t in targets]

        distances = distances or self.distance_module(prepared)
        if self.method == "awnn":
            estimates, _ = impute_awnn(prepared, targets, reg_log_term=self.params.awnn_reg, distances=distances)
            return [estimates[t] for t in targets]

        results = []
        for target in targets:
            try:
                results.append(self._impute_one(prepared, target, distances))
            except MatrixCompletionError as exc:
                logger.debug(f"{self.method} failed at {tuple(target)}: {exc}")
                results.append(exc)
        return results

    def _impute_one(self, m, target: EntryIndex, distances: DistanceModule) -> Estimate:
        p = self.params
        if self.method == "rownn":
            return impute_rownn(m, target, p.eta_row, distances)
        if self.method == "colnn":
            return impute_colnn(m, target, p.eta_col, distances)
        if self.method == "tsnn":
            return impute_tsnn(m, target, p.eta_row, p.eta_col, distances)
        if self.method == "drnn":
            return impute_drnn(m, target, p.eta_row, p.eta_col, distances)
        if self.method == "autonn":
            return impute_autonn(m, target, p.eta_row, p.eta_col, p.alpha, distances)
        axis = Axis.COL if self.method.endswith("_col") else Axis.ROW
        eta = p.eta_col if axis == Axis.COL else p.eta_row
        return impute_dist_nn(m, target, eta, distances.metric, axis, distances)


class DistanceCache:
    """
    Hidden copies and DistanceModules of one dataset, shared by every method
    run on it. Entries are keyed by the source matrix's identity and hold a
    reference to it, so a key cannot be reused while the cache lives.
    """

    def __init__(self):
        self._hidden = {}
        self._modules = {}

    def hidden(self, matrix: Union[MaskedMatrix, DistMatrix], entries: Iterable[EntryIndex]):
        entries = tuple(EntryIndex(*entry) for entry in entries)
        key = (id(matrix), entries)
        if key not in self._hidden:
            self._hidden[key] = (matrix, matrix.hide(entries))
        return self._hidden[key][1]

    def module(self, spec: EstimatorSpec, matrix: Union[MaskedMatrix, DistMatrix]) -> Optional[DistanceModule]:
        if spec.distance_key is None:
            return None
        key = (id(matrix), spec.distance_key)
        if key not in self._modules:
            self._modules[key] = (matrix, spec.distance_module(spec.prepare(matrix)))
        return self._modules[key][1]
