"""
Synthetic generators with a linear factor structure, plus loaders for the
on-disk formats the bench reads: long CSV panels, per-entry samples CSV and
MovieLens ratings.dat.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field

from core import DistMatrix, EntryIndex, MaskedMatrix, build_dist_matrix, build_masked_matrix
from errors import DuplicateEntry, ParseError, RatingOutOfRange

logger = logging.getLogger(__name__)

LONG_CSV_HEADER = ["row_id", "col_id", "value"]
SAMPLES_CSV_HEADER = ["row_id", "col_id", "sample_idx", "value"]
MOVIELENS_USERS = 6040
MOVIELENS_MOVIES = 3952


class SyntheticSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    n_rows: int = Field(ge=1, description="Number of rows N")
    n_cols: int = Field(ge=1, description="Number of columns T")
    rank: int = Field(default=4, ge=1, description="Latent factor dimension")
    noise_sd: float = Field(default=0.1, ge=0, description="Noise standard deviation sigma")
    propensity: float = Field(default=0.5, gt=0, le=1, description="Probability an entry is observed")
    sample_count: int = Field(default=100, ge=2, description="Samples per observed entry (distributional)")
    seed: int = Field(default=0, description="Seed of the single random stream")
    theta_override: Optional[float] = Field(default=None, description="Replace theta by this constant")


@dataclass(frozen=True)
class GroundTruth:
    theta: np.ndarray
    matrix: Union[MaskedMatrix, DistMatrix]
    noise_sd: float = 0.0


def _draw(spec: SyntheticSpec):
    # Fixed draw order: row factors, column factors, noise, mask. Per-entry
    # samples come last, so theta never depends on sigma or p.
    rng = np.random.default_rng(spec.seed)
    u = rng.uniform(-0.5, 0.5, size=(spec.n_rows, spec.rank))
    v = rng.uniform(-0.5, 0.5, size=(spec.n_cols, spec.rank))
    theta = u @ v.T
    if spec.theta_override is not None:
        theta = np.full(theta.shape, float(spec.theta_override))
    noise = spec.noise_sd * rng.standard_normal((spec.n_rows, spec.n_cols))
    mask = rng.random((spec.n_rows, spec.n_cols)) < spec.propensity
    return rng, theta, noise, mask


def gen_synthetic_scalar(spec: SyntheticSpec) -> GroundTruth:
    _, theta, noise, mask = _draw(spec)
    matrix = build_masked_matrix(theta + noise, mask)
    return GroundTruth(theta=theta, matrix=matrix, noise_sd=spec.noise_sd)


def gen_synthetic_dist(spec: SyntheticSpec) -> GroundTruth:
    rng, theta, _, mask = _draw(spec)
    samples = [[None] * spec.n_cols for _ in range(spec.n_rows)]
    for row in range(spec.n_rows):
        for col in range(spec.n_cols):
            if mask[row, col]:
                samples[row][col] = theta[row, col] + spec.noise_sd * rng.standard_normal(spec.sample_count)
            else:
                samples[row][col] = []
    return GroundTruth(theta=theta, matrix=build_dist_matrix(samples, mask), noise_sd=spec.noise_sd)


# ---------------------------------------------------------------------------
# CSV panels
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Panel:
    """A loaded matrix with the labels its rows and columns had on disk."""

    matrix: Union[MaskedMatrix, DistMatrix]
    row_labels: list[str] = field(default_factory=list)
    col_labels: list[str] = field(default_factory=list)


def _read_csv(path: Union[str, Path], header: list[str]) -> pd.DataFrame:
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, na_values=[])
    except pd.errors.EmptyDataError:
        raise ParseError(f"{path} is empty", line=1)
    except pd.errors.ParserError as exc:
        raise ParseError(f"{path}: {exc}")
    if list(frame.columns) != header:
        raise ParseError(f"expected header {','.join(header)}, got {','.join(map(str, frame.columns))}", line=1)

    incomplete = frame.isna().any(axis=1) | (frame == "").any(axis=1)
    if incomplete.any():
        index = int(incomplete.idxmax())
        raise ParseError(f"record has a missing field: {frame.loc[index].tolist()}", line=index + 2)
    return frame


def _numeric(frame: pd.DataFrame, column: str, line_offset: int) -> pd.Series:
    values = pd.to_numeric(frame[column], errors="coerce")
    bad = values.isna()
    if bad.any():
        index = int(bad.idxmax())
        raise ParseError(f"{column} {frame.loc[index, column]!r} is not a number", line=index + line_offset)
    # float() parsing keeps written reprs exact
    return frame[column].astype(float)


def _check_duplicates(frame: pd.DataFrame, keys: list[str], line_offset: int):
    repeated = frame.duplicated(keys, keep="first")
    if not repeated.any():
        return
    later = int(repeated.idxmax())
    key = tuple(frame.loc[later, keys])
    earlier = int((frame[keys] == frame.loc[later, keys]).all(axis=1).idxmax())
    raise DuplicateEntry(key, (earlier + line_offset, later + line_offset))


def load_long_csv(path: Union[str, Path]) -> Panel:
    """Load `row_id,col_id,value` records; unmentioned cells are masked."""
    frame = _read_csv(path, LONG_CSV_HEADER)
    values = _numeric(frame, "value", 2)
    _check_duplicates(frame, ["row_id", "col_id"], 2)

    rows, row_labels = pd.factorize(frame["row_id"])
    cols, col_labels = pd.factorize(frame["col_id"])
    dense = np.zeros((len(row_labels), len(col_labels)))
    mask = np.zeros(dense.shape, dtype=bool)
    dense[rows, cols] = values.to_numpy()
    mask[rows, cols] = True
    logger.info(f"Loaded {len(frame)} entries into a {dense.shape[0]} x {dense.shape[1]} panel from {path}")
    return Panel(build_masked_matrix(dense, mask), list(row_labels), list(col_labels))


def load_samples_csv(path: Union[str, Path]) -> Panel:
    """Load `row_id,col_id,sample_idx,value` records into a distribution-valued panel."""
    frame = _read_csv(path, SAMPLES_CSV_HEADER)
    frame["value"] = _numeric(frame, "value", 2)
    frame["sample_idx"] = _numeric(frame, "sample_idx", 2)
    _check_duplicates(frame, ["row_id", "col_id", "sample_idx"], 2)

    frame["row"], row_labels = pd.factorize(frame["row_id"])
    frame["col"], col_labels = pd.factorize(frame["col_id"])
    samples = [[[] for _ in col_labels] for _ in row_labels]
    mask = np.zeros((len(row_labels), len(col_labels)), dtype=bool)
    for (row, col), group in frame.sort_values("sample_idx", kind="stable").groupby(["row", "col"]):
        samples[row][col] = group["value"].to_numpy()
        mask[row, col] = True
    logger.info(f"Loaded {len(frame)} samples over {int(mask.sum())} entries from {path}")
    return Panel(build_dist_matrix(samples, mask), list(row_labels), list(col_labels))


def _first_appearance_order(mask: np.ndarray) -> list[EntryIndex]:
    """
    Observed cells ordered so that reading them back assigns every row and
    column its current index. Rows and columns without observations drop out;
    any matrix produced by load_long_csv has such an order.
    """
    row_rank = np.cumsum(mask.any(axis=1)) - 1
    col_rank = np.cumsum(mask.any(axis=0)) - 1
    pending = [EntryIndex(int(r), int(c)) for r, c in zip(*np.nonzero(mask))]
    ordered = []
    rows_seen = cols_seen = 0
    while pending:
        deferred = []
        for cell in pending:
            r, c = row_rank[cell.row], col_rank[cell.col]
            if r <= rows_seen and c <= cols_seen:
                ordered.append(cell)
                rows_seen = max(rows_seen, r + 1)
                cols_seen = max(cols_seen, c + 1)
            else:
                deferred.append(cell)
        if len(deferred) == len(pending):
            # no order reproduces this layout; admit the next row and column anyway
            rows_seen += 1
            cols_seen += 1
        pending = deferred
    return ordered


def write_long_csv(panel: Union[Panel, MaskedMatrix], path: Union[str, Path]):
    """Write a scalar panel as `row_id,col_id,value`; load_long_csv reads it back unchanged."""
    if isinstance(panel, MaskedMatrix):
        panel = Panel(panel, [str(k) for k in range(panel.n_rows)], [str(k) for k in range(panel.n_cols)])
    m = panel.matrix
    cells = _first_appearance_order(m.mask)
    frame = pd.DataFrame(
        {
            "row_id": [panel.row_labels[cell.row] for cell in cells],
            "col_id": [panel.col_labels[cell.col] for cell in cells],
            "value": [repr(float(m.values[cell.row, cell.col])) for cell in cells],
        },
        columns=LONG_CSV_HEADER,
    )
    frame.to_csv(path, index=False, lineterminator="\n")
    logger.info(f"Wrote {len(frame)} entries to {path}")


# ---------------------------------------------------------------------------
# MovieLens
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MovieLensPanel:
    matrix: MaskedMatrix
    ratings: pd.DataFrame  # row, col, rating, timestamp, one record per observed entry


def load_movielens(
    path: Union[str, Path], n_users: int = MOVIELENS_USERS, n_movies: int = MOVIELENS_MOVIES
) -> MovieLensPanel:
    """Pivot `UserID::MovieID::Rating::Timestamp` records into a users x movies matrix."""
    names = ["user_id", "movie_id", "rating", "timestamp"]
    try:
        frame = pd.read_csv(path, sep="::", engine="python", header=None, names=names, dtype=str)
    except pd.errors.EmptyDataError:
        raise ParseError(f"{path} is empty", line=1)
    except pd.errors.ParserError as exc:
        raise ParseError(f"{path}: {exc}")

    parsed = {name: _numeric(frame, name, 1) for name in names}
    users, movies, ratings = parsed["user_id"], parsed["movie_id"], parsed["rating"]

    out_of_range = ~ratings.isin([1, 2, 3, 4, 5])
    if out_of_range.any():
        index = int(out_of_range.idxmax())
        raise RatingOutOfRange(f"line {index + 1}: rating {frame.loc[index, 'rating']} outside 1..5")
    bad_id = ~users.between(1, n_users) | ~movies.between(1, n_movies) | (users % 1 != 0) | (movies % 1 != 0)
    if bad_id.any():
        index = int(bad_id.idxmax())
        raise ParseError(
            f"ids ({frame.loc[index, 'user_id']}, {frame.loc[index, 'movie_id']}) outside 1..{n_users} x 1..{n_movies}",
            line=index + 1,
        )
    _check_duplicates(frame, ["user_id", "movie_id"], 1)

    records = pd.DataFrame(
        {
            "row": users.astype(int).to_numpy() - 1,
            "col": movies.astype(int).to_numpy() - 1,
            "rating": ratings.astype(float).to_numpy(),
            "timestamp": parsed["timestamp"].astype("int64").to_numpy(),
        }
    )
    values = np.zeros((n_users, n_movies))
    mask = np.zeros((n_users, n_movies), dtype=bool)
    values[records["row"], records["col"]] = records["rating"]
    mask[records["row"], records["col"]] = True
    logger.info(f"Loaded {len(records)} ratings ({mask.mean():.2%} observed) from {path}")
    return MovieLensPanel(build_masked_matrix(values, mask), records)


@dataclass(frozen=True)
class ChronologicalSplit:
    train: list[EntryIndex]  # earliest share of ratings by timestamp
    held_out: list[EntryIndex]  # the rest
    tune: list[EntryIndex]
    test: list[EntryIndex]


def chronological_split(
    panel: MovieLensPanel, tune_size: int = 100, test_size: int = 500, seed: int = 0, train_share: float = 0.8
) -> ChronologicalSplit:
    """Tune entries are sampled from the earliest ratings, test entries from the latest."""
    if not 0 < train_share < 1:
        raise ValueError(f"train_share must lie in (0, 1), got {train_share}")
    ordered = panel.ratings.sort_values("timestamp", kind="stable")
    cut = int(len(ordered) * train_share)
    early = [EntryIndex(int(r), int(c)) for r, c in zip(ordered["row"][:cut], ordered["col"][:cut])]
    late = [EntryIndex(int(r), int(c)) for r, c in zip(ordered["row"][cut:], ordered["col"][cut:])]

    rng = np.random.default_rng(seed)

    def sample(entries, size):
        picks = rng.choice(len(entries), size=min(size, len(entries)), replace=False)
        return sorted(entries[k] for k in picks)

    return ChronologicalSplit(train=early, held_out=late, tune=sample(early, tune_size), test=sample(late, test_size))
