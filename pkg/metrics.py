import numpy as np
from scipy.stats import norm

from errors import EmptyMeasure
from framework import EmpiricalMeasure


def abs_error(estimate: float, truth: float) -> float:
    return abs(float(estimate) - float(truth))


def _check(*measures: EmpiricalMeasure):
    for measure in measures:
        if measure is None or len(measure.atoms) == 0:
            raise EmptyMeasure("KS distance needs non-empty measures")


def ks_distance(a: EmpiricalMeasure, b: EmpiricalMeasure) -> float:
    """sup |F_a - F_b| over the union of atoms (right-continuous CDFs)."""
    _check(a, b)
    grid = np.union1d(a.atoms, b.atoms)
    return float(np.max(np.abs(a.cdf(grid) - b.cdf(grid))))


def ks_distance_to_normal(a: EmpiricalMeasure, mean: float, sd: float) -> float:
    """KS distance from an empirical measure to Normal(mean, sd^2); sd = 0 is a point mass."""
    _check(a)
    if sd <= 0:
        return ks_distance(a, EmpiricalMeasure(np.array([mean]), np.array([1.0])))
    atoms = np.unique(a.atoms)
    truth = norm.cdf(atoms, loc=mean, scale=sd)
    right = a.cdf(atoms)
    left = right - np.array([a.weights[a.atoms == x].sum() for x in atoms])
    return float(max(np.max(np.abs(right - truth)), np.max(np.abs(left - truth))))


def as_measure(value) -> EmpiricalMeasure:
    """An imputed measure as is; a scalar estimate as a point mass."""
    if isinstance(value, EmpiricalMeasure):
        return value
    return EmpiricalMeasure(np.array([float(value)]), np.array([1.0]))
