import json
import logging
import math
import os
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Literal, Optional, Union

import numpy as np
import pandas as pd
from dotenv import dotenv_values, load_dotenv
from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator

from core import DistMatrix, EntryIndex, MaskedMatrix
from data import (
    SyntheticSpec,
    chronological_split,
    gen_synthetic_dist,
    gen_synthetic_scalar,
    load_long_csv,
    load_movielens,
    load_samples_csv,
)
from errors import ConfigError, MatrixCompletionError
from estimators import DISTRIBUTIONAL_METHODS, DistanceCache, Estimate, EstimatorSpec, MethodId
from metrics import abs_error, as_measure, ks_distance, ks_distance_to_normal
from tuning import SearchSpace, holdout_split, observed_truth, tune

load_dotenv()

logger = logging.getLogger(__name__)

__version__ = "0.1.0"

OUTPUT_DIR = os.getenv("NNCOMPLETE_OUTPUT_DIR", "output")

Dataset = Literal["synthetic-scalar", "synthetic-dist", "long-csv", "samples-csv", "movielens"]
FILE_DATASETS = {"long-csv", "samples-csv", "movielens"}
DIST_DATASETS = {"synthetic-dist", "samples-csv"}
LIST_KEYS = {
    "estimators",
    "eval_entries",
    "eta_row_percentiles",
    "eta_col_percentiles",
    "alpha_grid",
    "usvt_eta_grid",
    "si_lambda_grid",
}


class BenchConfig(BaseModel):
    name: str = Field(default="bench", description="Run name, also the default output folder")
    dataset: Dataset = Field(default="synthetic-scalar", description="Which data source to use")
    path: Optional[str] = Field(default=None, description="Data file for long-csv, samples-csv and movielens")

    n_rows: int = Field(default=50, ge=1)
    n_cols: int = Field(default=50, ge=1)
    rank: int = Field(default=4, ge=1)
    sigma: float = Field(default=0.1, ge=0, description="Noise standard deviation of synthetic data")
    propensity: float = Field(default=0.5, gt=0, le=1)
    sample_count: int = Field(default=100, ge=2)

    estimators: list[MethodId] = Field(default=["drnn", "tsnn"], min_length=1)
    eta_row_percentiles: list[float] = Field(default=[10, 25, 50, 75, 100])
    eta_col_percentiles: list[float] = Field(default=[10, 25, 50, 75, 100])
    alpha_grid: list[float] = Field(default=[0.0, 0.25, 0.5, 0.75, 1.0])
    usvt_eta_grid: list[float] = Field(default=[1.0, 1.5, 2.02, 3.0])
    si_lambda_grid: list[float] = Field(default=[0.1, 1.0, 10.0])
    budget: int = Field(default=50, ge=1)
    holdout_fraction: float = Field(default=0.2, gt=0, le=1, description="Tuning holdout share")
    max_holdout: int = Field(default=200, ge=1)

    eval_fraction: float = Field(default=0.2, gt=0, le=1, description="Evaluation share of observed entries")
    eval_entries: Optional[list[tuple[int, int]]] = Field(default=None, description="Explicit evaluation entries")
    max_eval_entries: int = Field(default=500, ge=1)
    tune_size: int = Field(default=100, ge=1, description="MovieLens tuning sample from the early ratings")
    test_size: int = Field(default=500, ge=1, description="MovieLens test sample from the late ratings")

    metric: Literal["abs_error", "ks_distance"] = "abs_error"
    trials: int = Field(default=1, ge=1)
    seed: int = 0
    out: Optional[str] = Field(default=None, description="Output folder; <NNCOMPLETE_OUTPUT_DIR>/<name> when unset")

    @field_validator("eval_entries", mode="before")
    @classmethod
    def _parse_entries(cls, value):
        if value is None:
            return None
        parsed = []
        for item in value:
            if isinstance(item, str):
                row, _, col = item.partition(":")
                item = (row, col)
            parsed.append(tuple(item))
        return parsed

    @model_validator(mode="after")
    def _check_dataset(self):
        if self.dataset in FILE_DATASETS and not self.path:
            raise ValueError(f"dataset {self.dataset} needs a path")
        distributional = self.dataset in DIST_DATASETS
        wrong = [name for name in self.estimators if name in DISTRIBUTIONAL_METHODS and not distributional]
        if wrong:
            raise ValueError(f"{', '.join(wrong)} need a distributional dataset, got {self.dataset}")
        if self.metric == "ks_distance" and not distributional:
            raise ValueError(f"ks_distance needs a distributional dataset, got {self.dataset}")
        return self

    @property
    def output_dir(self) -> Path:
        return Path(self.out) if self.out else Path(OUTPUT_DIR) / self.name

    def search_space(self, seed: int) -> SearchSpace:
        return SearchSpace(
            eta_row_percentiles=self.eta_row_percentiles,
            eta_col_percentiles=self.eta_col_percentiles,
            alpha_grid=self.alpha_grid,
            usvt_eta_grid=self.usvt_eta_grid,
            si_lambda_grid=self.si_lambda_grid,
            budget=self.budget,
            seed=seed,
            holdout_fraction=self.holdout_fraction,
            max_holdout=self.max_holdout,
        )

    def synthetic_spec(self, seed: int) -> SyntheticSpec:
        return SyntheticSpec(
            n_rows=self.n_rows,
            n_cols=self.n_cols,
            rank=self.rank,
            noise_sd=self.sigma,
            propensity=self.propensity,
            sample_count=self.sample_count,
            seed=seed,
        )


def load_config(path: Optional[Union[str, Path]] = None, overrides: Optional[dict] = None) -> BenchConfig:
    """Read a flat KEY=value config file and apply overrides (None values are ignored)."""
    values = {}
    if path is not None:
        if not Path(path).is_file():
            raise ConfigError(f"config file {path} not found")
        for key, raw in dotenv_values(path).items():
            key = key.strip().lower()
            if key not in BenchConfig.model_fields:
                raise ConfigError(f"unknown config key {key!r} in {path}")
            if raw is None:
                raise ConfigError(f"config key {key!r} in {path} has no value")
            values[key] = [item.strip() for item in raw.split(",") if item.strip()] if key in LIST_KEYS else raw
    values.update({key: value for key, value in (overrides or {}).items() if value is not None})

    try:
        return BenchConfig(**values)
    except ValidationError as exc:
        raise ConfigError(f"invalid bench config: {exc}") from exc


# ---------------------------------------------------------------------------
# Trial data
# ---------------------------------------------------------------------------

@dataclass
class TrialData:
    training: Union[MaskedMatrix, DistMatrix]
    eval_entries: list[EntryIndex]
    truths: list  # one per eval entry: float, EmpiricalMeasure or (mean, sd)
    tune_holdout: Optional[list[EntryIndex]] = None


def _eval_split(config: BenchConfig, matrix, seed: int) -> list[EntryIndex]:
    if config.eval_entries is not None:
        entries = [EntryIndex(*entry) for entry in config.eval_entries]
        outside = [entry for entry in entries if not (0 <= entry.row < matrix.n_rows and 0 <= entry.col < matrix.n_cols)]
        if outside:
            raise ConfigError(f"eval entries {outside[:5]} lie outside the {matrix.n_rows} x {matrix.n_cols} matrix")
        unobserved = [entry for entry in entries if not matrix.mask[entry]]
        if unobserved:
            raise ConfigError(f"eval entries {unobserved[:5]} are not observed")
        return entries
    return holdout_split(matrix.mask, config.eval_fraction, seed, config.max_eval_entries)


def prepare_trial(config: BenchConfig, seed: int, loaded=None) -> TrialData:
    """Data of one trial with its evaluation entries hidden."""
    if config.dataset.startswith("synthetic"):
        generate = gen_synthetic_dist if config.dataset == "synthetic-dist" else gen_synthetic_scalar
        truth = generate(config.synthetic_spec(seed))
        entries = _eval_split(config, truth.matrix, seed)
        if config.metric == "ks_distance":
            truths = [(float(truth.theta[e.row, e.col]), truth.noise_sd) for e in entries]
        else:
            truths = [float(truth.theta[e.row, e.col]) for e in entries]
        return TrialData(truth.matrix.hide(entries), entries, truths)

    if config.dataset == "movielens":
        split = chronological_split(loaded, config.tune_size, config.test_size, seed)
        matrix = loaded.matrix
        truths = [float(matrix.values[e.row, e.col]) for e in split.test]
        return TrialData(matrix.hide(split.held_out), split.test, truths, tune_holdout=split.tune)

    matrix = loaded.matrix
    entries = _eval_split(config, matrix, seed)
    truths = [observed_truth(matrix, e, config.metric) for e in entries]
    return TrialData(matrix.hide(entries), entries, truths)


def load_dataset(config: BenchConfig):
    if config.dataset == "long-csv":
        return load_long_csv(config.path)
    if config.dataset == "samples-csv":
        return load_samples_csv(config.path)
    if config.dataset == "movielens":
        return load_movielens(config.path)
    return None


# ---------------------------------------------------------------------------
# Scoring and aggregation
# ---------------------------------------------------------------------------

def score_entry(estimate: Estimate, truth, metric: str) -> float:
    if metric == "ks_distance":
        measure = as_measure(estimate.value)
        if isinstance(truth, tuple):
            return ks_distance_to_normal(measure, *truth)
        return ks_distance(measure, truth)
    return abs_error(estimate.scalar, truth)


def mean_and_stderr(errors) -> tuple[Optional[float], Optional[float]]:
    errors = np.asarray(errors, dtype=float)
    if len(errors) == 0:
        return None, None
    if len(errors) == 1:
        return float(errors[0]), 0.0
    return float(errors.mean()), float(errors.std(ddof=1) / math.sqrt(len(errors)))


@dataclass
class BenchReport:
    document: dict
    entries: pd.DataFrame
    output_dir: Optional[Path] = None
    summary: dict = field(default_factory=dict)


def _run_estimator(
    config: BenchConfig, trial: int, seed: int, data: TrialData, method: str, cache: DistanceCache
):
    """Tune one estimator on the trial's training data and score it on the evaluation entries."""
    spec = EstimatorSpec(method=method)
    tuned = {}
    tune_score = None
    if method != "awnn":
        result = tune(
            data.training, spec, config.search_space(seed), config.metric, holdout=data.tune_holdout, cache=cache
        )
        spec, tuned, tune_score = result.best_spec, result.best_candidate, result.best_score

    outcomes = spec.impute(data.training, data.eval_entries, cache.module(spec, data.training))
    records = []
    for entry, outcome, truth in zip(data.eval_entries, outcomes, data.truths):
        record = {
            "trial": trial,
            "estimator": method,
            "row": entry.row,
            "col": entry.col,
            "estimate": None,
            "error": None,
            "fallback_used": False,
            "failure": None,
        }
        if isinstance(outcome, Estimate):
            try:
                record["error"] = score_entry(outcome, truth, config.metric)
                record["estimate"] = outcome.scalar
                record["fallback_used"] = outcome.fallback_used
            except MatrixCompletionError as exc:
                record["failure"] = f"{type(exc).__name__}: {exc}"
        else:
            record["failure"] = f"{type(outcome).__name__}: {outcome}"
        if record["failure"]:
            logger.warning(f"Trial {trial}, {method}, entry {tuple(entry)}: {record['failure']}")
        records.append(record)
    return records, tuned, tune_score


def run(config: BenchConfig, write: bool = True) -> BenchReport:
    """
    Run every estimator on every trial and write report.json and entries.csv.
    """
    started = time.perf_counter()
    logger.info(f"Starting bench {config.name}: {config.dataset}, estimators {', '.join(config.estimators)}")
    loaded = load_dataset(config)

    trials = []
    records = []
    runtimes = {}
    for trial in range(config.trials):
        seed = config.seed + trial
        logger.info(f"Trial {trial + 1}/{config.trials}: preparing {config.dataset} data (seed {seed})...")
        data = prepare_trial(config, seed, loaded)

        per_estimator = {}
        cache = DistanceCache()
        for method in config.estimators:
            logger.info(f"Trial {trial + 1}/{config.trials}: tuning and imputing with {method}...")
            clock = time.perf_counter()
            try:
                entry_records, tuned, tune_score = _run_estimator(config, trial, seed, data, method, cache)
            except MatrixCompletionError as exc:
                logger.error(f"Trial {trial + 1}, {method} failed: {exc}")
                entry_records = [
                    {
                        "trial": trial, "estimator": method, "row": e.row, "col": e.col,
                        "estimate": None, "error": None, "fallback_used": False,
                        "failure": f"{type(exc).__name__}: {exc}",
                    }
                    for e in data.eval_entries
                ]
                tuned, tune_score = {}, None
            runtimes[f"{trial}/{method}"] = time.perf_counter() - clock

            errors = [r["error"] for r in entry_records if r["error"] is not None]
            mean, stderr = mean_and_stderr(errors)
            per_estimator[method] = {
                "mean": mean,
                "stderr": stderr,
                "entries": len(entry_records),
                "failed": len(entry_records) - len(errors),
                "tuned": tuned,
                "tune_score": tune_score,
            }
            records.extend(entry_records)
            logger.info(f"Trial {trial + 1}/{config.trials}: {method} mean {config.metric} = {mean}")
        trials.append({"trial": trial, "seed": seed, "estimators": per_estimator})

    summary = {}
    for method in config.estimators:
        means = [t["estimators"][method]["mean"] for t in trials if t["estimators"][method]["mean"] is not None]
        mean, stderr = mean_and_stderr(means)
        summary[method] = {"mean": mean, "stderr": stderr, "trials": len(means)}

    document = {
        "library": {"name": "nncomplete", "version": __version__},
        "config": config.model_dump(mode="json"),
        "trials": trials,
        "summary": summary,
        "timing": {
            "timestamp": datetime.now(timezone.utc).isoformat(),
            "runtime_seconds": runtimes,
            "total_seconds": time.perf_counter() - started,
        },
    }
    report = BenchReport(document=document, entries=pd.DataFrame.from_records(records), summary=summary)
    if write:
        report.output_dir = write_report(report, config.output_dir)
    logger.info(f"Bench {config.name} finished: " + ", ".join(f"{k}={v['mean']}" for k, v in summary.items()))
    return report


def _json_safe(value):
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, dict):
        return {key: _json_safe(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_safe(item) for item in value]
    return value


def write_report(report: BenchReport, output_dir: Union[str, Path]) -> Path:
    output_dir = Path(output_dir)
    os.makedirs(output_dir, exist_ok=True)
    report_path = output_dir / "report.json"
    with open(report_path, "w") as f:
        json.dump(_json_safe(report.document), f, indent=2)
    report.entries.to_csv(output_dir / "entries.csv", index=False, lineterminator="\n")
    logger.info(f"Report saved to {report_path}")
    return output_dir
