"""
Hyperparameter selection by hiding observed entries and minimizing the
validation error over a deterministic grid.
"""

import logging
from dataclasses import dataclass, field
from typing import Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator
from sklearn.model_selection import ParameterGrid

from core import DistMatrix, EntryIndex, MaskedMatrix
from errors import AllMissing, EmptySearchSpace, MatrixCompletionError
from estimators import DistanceCache, Estimate, EstimatorSpec, MethodId, ScalarHyperParams, blend_autonn
from framework import EmpiricalMeasure, Percentile, percentile_to_threshold
from metrics import abs_error, as_measure, ks_distance

__all__ = [
    "Percentile",
    "SearchSpace",
    "TuneResult",
    "holdout_split",
    "percentile_to_threshold",
    "tune",
]

logger = logging.getLogger(__name__)

Metric = Literal["abs_error", "ks_distance"]


class SearchSpace(BaseModel):
    model_config = ConfigDict(frozen=True)

    eta_row_percentiles: list[float] = Field(default=[10, 25, 50, 75, 100], description="Row threshold percentiles")
    eta_col_percentiles: list[float] = Field(default=[10, 25, 50, 75, 100], description="Column threshold percentiles")
    alpha_grid: list[float] = Field(default=[0.0, 0.25, 0.5, 0.75, 1.0], description="AutoNN alpha candidates")
    usvt_eta_grid: list[float] = Field(default=[1.0, 1.5, 2.02, 3.0], description="USVT threshold multipliers")
    si_lambda_grid: list[float] = Field(default=[0.1, 1.0, 10.0], description="SoftImpute penalties")
    budget: int = Field(default=50, ge=1, description="Maximum number of candidates evaluated")
    seed: int = Field(default=0, description="Seed for the holdout and grid subsampling")
    holdout_fraction: float = Field(default=0.2, gt=0, le=1, description="Share of observed entries held out")
    max_holdout: int = Field(default=200, ge=1, description="Cap on held-out entries")

    @field_validator("eta_row_percentiles", "eta_col_percentiles")
    @classmethod
    def _percentiles(cls, values):
        if any(not 0 <= q <= 100 for q in values):
            raise ValueError(f"percentiles must lie in [0, 100], got {values}")
        return values

    @field_validator("alpha_grid")
    @classmethod
    def _alphas(cls, values):
        if any(not 0 <= a <= 1 for a in values):
            raise ValueError(f"alpha candidates must lie in [0, 1], got {values}")
        return values

    @field_validator("usvt_eta_grid")
    @classmethod
    def _usvt(cls, values):
        if any(v <= 0 for v in values):
            raise ValueError(f"USVT multipliers must be positive, got {values}")
        return values

    @field_validator("si_lambda_grid")
    @classmethod
    def _lambdas(cls, values):
        if any(v < 0 for v in values):
            raise ValueError(f"SoftImpute penalties must be nonnegative, got {values}")
        return values


@dataclass
class TuneResult:
    best_spec: EstimatorSpec
    best_candidate: dict
    best_score: float
    evaluations: list[tuple[dict, float]] = field(default_factory=list)
    holdout: list[EntryIndex] = field(default_factory=list)

    @property
    def best_params(self) -> ScalarHyperParams:
        return self.best_spec.params


def holdout_split(mask, fraction: float, seed: int, max_size: Optional[int] = None) -> list[EntryIndex]:
    """Seeded uniform subset of the observed entries, in row-major order."""
    mask = np.asarray(mask, dtype=bool)
    if not 0 < fraction <= 1:
        raise ValueError(f"holdout fraction must lie in (0, 1], got {fraction}")
    observed = np.flatnonzero(mask)
    if len(observed) == 0:
        raise AllMissing("cannot hold out entries of a matrix with no observed entry")

    size = max(1, round(fraction * len(observed)))
    if max_size is not None:
        size = min(size, max_size)
    picks = np.sort(np.random.default_rng(seed).choice(observed, size=size, replace=False))
    n_cols = mask.shape[1]
    return [EntryIndex(int(k) // n_cols, int(k) % n_cols) for k in picks]


def _grid(method: MethodId, space: SearchSpace) -> dict[str, list]:
    row = {"eta_row": space.eta_row_percentiles}
    col = {"eta_col": space.eta_col_percentiles}
    grids = {
        "rownn": row,
        "colnn": col,
        "tsnn": {**row, **col},
        "drnn": {**row, **col},
        "autonn": {**row, **col, "alpha": space.alpha_grid},
        "kernelnn": row,
        "w2nn": row,
        "kernelnn_col": col,
        "w2nn_col": col,
        "usvt": {"usvt_eta": space.usvt_eta_grid},
        "softimpute": {"si_lambda": space.si_lambda_grid},
        "awnn": {},
    }
    return grids[method]


def _subsample(enumerated: list[dict], space: SearchSpace) -> list[dict]:
    if len(enumerated) <= space.budget:
        return enumerated
    rng = np.random.default_rng(space.seed)
    keep = np.sort(rng.choice(len(enumerated), size=space.budget, replace=False))
    return [enumerated[k] for k in keep]


def candidates(method: MethodId, space: SearchSpace) -> list[dict]:
    """
    Grid candidates in grid order, subsampled (seeded) down to the budget.

    For AutoNN the budget bounds the threshold pairs and every alpha is kept;
    all alphas of a pair are scored from the same DRNN and TSNN estimates.
    """
    grid = _grid(method, space)
    empty = [name for name, values in grid.items() if len(values) == 0]
    if empty:
        raise EmptySearchSpace(f"{method} has an empty grid for {', '.join(empty)}")
    if method != "autonn":
        return _subsample(list(ParameterGrid(grid)), space)

    alphas = grid.pop("alpha")
    pairs = _subsample(list(ParameterGrid(grid)), space)
    return [{"alpha": alpha, **pair} for alpha in alphas for pair in pairs]


def apply_candidate(spec: EstimatorSpec, candidate: dict) -> EstimatorSpec:
    params = {}
    spectral = {}
    for name, value in candidate.items():
        if name in ("eta_row", "eta_col"):
            params[name] = Percentile(q=value)
        elif name == "alpha":
            params[name] = value
        else:
            spectral[name] = value
    return spec.model_copy(
        update={
            "params": spec.params.model_copy(update=params),
            "spectral": spec.spectral.model_copy(update=spectral),
        }
    )


def observed_truth(m: Union[MaskedMatrix, DistMatrix], entry: EntryIndex, metric: Metric):
    if isinstance(m, DistMatrix):
        samples = m.samples[entry.row, entry.col]
        return EmpiricalMeasure.from_samples(samples) if metric == "ks_distance" else float(samples.mean())
    if metric == "ks_distance":
        return as_measure(m.values[entry.row, entry.col])
    return float(m.values[entry.row, entry.col])


def failure_penalty(m: Union[MaskedMatrix, DistMatrix], metric: Metric) -> float:
    if metric == "ks_distance":
        return 1.0
    scalar = m.entry_means() if isinstance(m, DistMatrix) else m
    return scalar.value_range()


def score(result: Union[Estimate, MatrixCompletionError], truth, metric: Metric, penalty: float) -> float:
    if not isinstance(result, Estimate):
        return penalty
    if metric == "ks_distance":
        return ks_distance(as_measure(result.value), truth)
    return abs_error(result.scalar, truth)


def _autonn_results(spec: EstimatorSpec, training, holdout, distances, endpoints: dict) -> list:
    """AutoNN on the holdout, blended from DRNN and TSNN estimates cached per threshold pair."""
    p = spec.params
    key = (p.eta_row, p.eta_col)
    if key not in endpoints:
        endpoints[key] = tuple(
            spec.model_copy(update={"method": method}).impute(training, holdout, distances)
            for method in ("drnn", "tsnn")
        )
    results = []
    for dr_est, ts_est in zip(*endpoints[key]):
        if not isinstance(dr_est, Estimate):
            results.append(dr_est)
        elif not isinstance(ts_est, Estimate):
            results.append(ts_est)
        else:
            results.append(blend_autonn(dr_est, ts_est, p.alpha))
    return results


def tune(
    m: Union[MaskedMatrix, DistMatrix],
    method: Union[MethodId, EstimatorSpec],
    space: SearchSpace,
    metric: Metric = "abs_error",
    holdout: Optional[list[EntryIndex]] = None,
    cache: Optional[DistanceCache] = None,
) -> TuneResult:
    """
    Hold out observed entries, score every candidate by its mean validation
    error and keep the first best in grid order. Entries a candidate cannot
    impute cost the failure penalty. An explicit `holdout` replaces the
    seeded split; a shared `cache` lets several methods tuned on the same
    matrix and holdout reuse one training copy and its distances.
    """
    base = method if isinstance(method, EstimatorSpec) else EstimatorSpec(method=method)
    grid = candidates(base.method, space)

    if holdout is None:
        holdout = holdout_split(m.mask, space.holdout_fraction, space.seed, space.max_holdout)
    holdout = [EntryIndex(*entry) for entry in holdout]
    cache = cache or DistanceCache()
    training = cache.hidden(m, holdout)
    truths = [observed_truth(m, entry, metric) for entry in holdout]
    penalty = failure_penalty(m, metric)
    distances = cache.module(base, training)

    evaluations = []
    endpoints = {}
    best = None
    for candidate in grid:
        spec = apply_candidate(base, candidate)
        if spec.method == "autonn":
            results = _autonn_results(spec, training, holdout, distances, endpoints)
        else:
            results = spec.impute(training, holdout, distances)
        candidate_score = float(np.mean([score(r, t, metric, penalty) for r, t in zip(results, truths)]))
        evaluations.append((candidate, candidate_score))
        logger.debug(f"{base.method} candidate {candidate}: {metric}={candidate_score:.6g}")
        if best is None or candidate_score < best[2]:
            best = (spec, candidate, candidate_score)

    logger.info(f"Tuned {base.method}: {best[1]} with {metric}={best[2]:.6g} over {len(evaluations)} candidate(s)")
    return TuneResult(
        best_spec=best[0],
        best_candidate=best[1],
        best_score=best[2],
        evaluations=evaluations,
        holdout=holdout,
    )
