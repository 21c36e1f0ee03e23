"""
Masked-matrix data model shared by every estimator.

A MaskedMatrix holds an N x T array of reals plus a boolean observation
mask. A DistMatrix holds, per entry, a 1-D array of samples. Both are
immutable once built: their arrays are flagged read-only.

Unobserved scalar values are stored as NaN. Code must branch on the mask and
never on the NaN itself; the sentinel only exists so that an accidental read
of a masked entry poisons the result and shows up in tests.
"""

from dataclasses import dataclass
from typing import Iterable, NamedTuple

import numpy as np

from errors import AllMissing, DimensionMismatch, TooFewSamples

MASKED_SENTINEL = np.nan


class EntryIndex(NamedTuple):
    row: int
    col: int

    def transposed(self) -> "EntryIndex":
        return EntryIndex(self.col, self.row)


def _frozen(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class MaskedMatrix:
    values: np.ndarray
    mask: np.ndarray

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def n_cols(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def observed_count(self) -> int:
        return int(self.mask.sum())

    def filled(self, fill: float = 0.0) -> np.ndarray:
        """Values with every unobserved entry replaced by `fill`."""
        return np.where(self.mask, np.nan_to_num(self.values, nan=fill), fill)

    def observed_values(self) -> np.ndarray:
        return self.values[self.mask]

    def observed_entries(self) -> list[EntryIndex]:
        rows, cols = np.nonzero(self.mask)
        return [EntryIndex(int(r), int(c)) for r, c in zip(rows, cols)]

    def value_range(self) -> float:
        observed = self.observed_values()
        return float(observed.max() - observed.min())

    def hide(self, entries: Iterable[EntryIndex]) -> "MaskedMatrix":
        """Copy of the matrix with `entries` marked unobserved."""
        mask = self.mask.copy()
        for row, col in entries:
            mask[row, col] = False
        return build_masked_matrix(self.values, mask)

    def transpose(self) -> "MaskedMatrix":
        return transpose(self)

    def __eq__(self, other) -> bool:
        if not isinstance(other, MaskedMatrix):
            return NotImplemented
        return (
            self.shape == other.shape
            and np.array_equal(self.mask, other.mask)
            and np.array_equal(self.values[self.mask], other.values[other.mask])
        )


@dataclass(frozen=True, eq=False)
class DistMatrix:
    """N x T matrix whose observed entries are 1-D sample arrays."""

    samples: np.ndarray  # object array of float arrays
    mask: np.ndarray

    @property
    def n_rows(self) -> int:
        return self.mask.shape[0]

    @property
    def n_cols(self) -> int:
        return self.mask.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.mask.shape

    @property
    def observed_count(self) -> int:
        return int(self.mask.sum())

    def sample_count(self, row: int, col: int) -> int:
        return len(self.samples[row, col])

    def observed_entries(self) -> list[EntryIndex]:
        rows, cols = np.nonzero(self.mask)
        return [EntryIndex(int(r), int(c)) for r, c in zip(rows, cols)]

    def entry_means(self) -> MaskedMatrix:
        """Scalar view: the sample mean of every observed entry."""
        means = np.zeros(self.shape)
        for row, col in self.observed_entries():
            means[row, col] = self.samples[row, col].mean()
        return build_masked_matrix(means, self.mask)

    def pooled_samples(self) -> np.ndarray:
        return np.concatenate([self.samples[r, c] for r, c in self.observed_entries()])

    def hide(self, entries: Iterable[EntryIndex]) -> "DistMatrix":
        mask = self.mask.copy()
        for row, col in entries:
            mask[row, col] = False
        return build_dist_matrix(self.samples, mask)

    def transpose(self) -> "DistMatrix":
        return transpose(self)


def build_masked_matrix(values, mask) -> MaskedMatrix:
    values = np.array(values, dtype=float)
    mask = np.array(mask).astype(bool)
    if values.ndim != 2 or mask.ndim != 2:
        raise DimensionMismatch(
            f"expected 2-D values and mask, got {values.ndim}-D and {mask.ndim}-D"
        )
    if values.shape != mask.shape:
        raise DimensionMismatch(f"values {values.shape} do not match mask {mask.shape}")
    if values.shape[0] < 1 or values.shape[1] < 1:
        raise DimensionMismatch(f"matrix must be at least 1 x 1, got {values.shape}")
    if not mask.any():
        raise AllMissing(f"no observed entry in {values.shape[0]} x {values.shape[1]} matrix")

    values[~mask] = MASKED_SENTINEL
    return MaskedMatrix(values=_frozen(values), mask=_frozen(mask))


def build_dist_matrix(samples, mask) -> DistMatrix:
    mask = np.array(mask).astype(bool)
    if mask.ndim != 2 or mask.shape[0] < 1 or mask.shape[1] < 1:
        raise DimensionMismatch(f"mask must be a non-empty 2-D array, got shape {mask.shape}")
    if len(samples) != mask.shape[0] or any(len(row) != mask.shape[1] for row in samples):
        raise DimensionMismatch(f"samples do not match mask shape {mask.shape}")
    if not mask.any():
        raise AllMissing(f"no observed entry in {mask.shape[0]} x {mask.shape[1]} matrix")

    cells = np.empty(mask.shape, dtype=object)
    for row in range(mask.shape[0]):
        for col in range(mask.shape[1]):
            if mask[row, col]:
                entry = np.array(samples[row][col], dtype=float).ravel()
                if len(entry) < 2:
                    raise TooFewSamples(
                        f"entry ({row}, {col}) holds {len(entry)} sample(s), need at least 2"
                    )
                cells[row, col] = _frozen(entry)
            else:
                cells[row, col] = _frozen(np.empty(0))
    return DistMatrix(samples=_frozen(cells), mask=_frozen(mask))


def transpose(m: MaskedMatrix | DistMatrix) -> MaskedMatrix | DistMatrix:
    if isinstance(m, DistMatrix):
        return DistMatrix(samples=_frozen(m.samples.T.copy()), mask=_frozen(m.mask.T.copy()))
    return MaskedMatrix(values=_frozen(m.values.T.copy()), mask=_frozen(m.mask.T.copy()))
