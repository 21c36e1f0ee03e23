import math

import numpy as np
import pytest
from pytest import approx

from core import EntryIndex, build_dist_matrix, build_masked_matrix, transpose
from errors import NonPositiveVariance, NoObservedDonor
from estimators import (
    Estimate,
    EstimatorSpec,
    ScalarHyperParams,
    awnn_weights,
    impute_autonn,
    impute_awnn,
    impute_colnn,
    impute_dist_nn,
    impute_drnn,
    impute_rownn,
    impute_tsnn,
    project_to_simplex,
)
from framework import Axis, DissimilarityProfile, EmpiricalMeasure, EntryMetric, Percentile
from metrics import ks_distance

nan = np.nan


# ---------------------------------------------------------------------------
# Explicit neighborhood constructions used as oracles
# ---------------------------------------------------------------------------

def row_distance(values, mask, a, b, exclude):
    cols = [s for s in range(values.shape[1]) if s != exclude and mask[a, s] and mask[b, s]]
    if not cols:
        return math.inf
    return sum((values[a, s] - values[b, s]) ** 2 for s in cols) / len(cols)


def oracle_rownn(values, mask, i, t, eta):
    donors = []
    for j in range(values.shape[0]):
        if j == i or not mask[j, t]:
            continue
        d = row_distance(values, mask, i, j, t)
        if d < math.inf and d <= eta:
            donors.append(values[j, t])
    return sum(donors) / len(donors) if donors else None


def oracle_tsnn(values, mask, i, t, eta1, eta2):
    rows = [i] + [j for j in range(values.shape[0]) if j != i and row_distance(values, mask, i, j, t) <= eta1]
    cols = [t] + [s for s in range(values.shape[1]) if s != t and row_distance(values.T, mask.T, t, s, i) <= eta2]
    picked = [values[j, s] for j in rows for s in cols if mask[j, s] and (j, s) != (i, t)]
    return sum(picked) / len(picked) if picked else None


def random_instance(seed, n_rows=10, n_cols=12, p=0.6):
    rng = np.random.default_rng(seed)
    values = rng.uniform(size=(n_rows, n_cols))
    mask = rng.random((n_rows, n_cols)) < p
    return values, mask, build_masked_matrix(values, mask)


# ---------------------------------------------------------------------------
# RowNN / ColNN
# ---------------------------------------------------------------------------

def test_rownn_zero_distance_donor():
    m = build_masked_matrix([[1, 2, nan], [1, 2, 7], [5, 9, 4]], [[1, 1, 0], [1, 1, 1], [1, 1, 1]])
    for eta in (0.0, 1.0):
        estimate = impute_rownn(m, EntryIndex(0, 2), eta)
        assert estimate.value == 7.0
        assert not estimate.fallback_used
        assert estimate.neighbor_count == 1


def test_rownn_two_point_mean():
    m = build_masked_matrix([[0, 0, nan], [1, 1, 2], [-1, -1, 6]], [[1, 1, 0], [1, 1, 1], [1, 1, 1]])
    assert impute_rownn(m, (0, 2), 1.0).value == 4.0


def test_rownn_falls_back_to_nearest_donor():
    m = build_masked_matrix([[0, 0, nan], [1, 1, 2], [-1, -1, 6]], [[1, 1, 0], [1, 1, 1], [1, 1, 1]])
    estimate = impute_rownn(m, (0, 2), 0.5)
    # rows 1 and 2 tie at distance 1; the lower index wins
    assert estimate.value == 2.0
    assert estimate.fallback_used
    assert estimate.neighbor_count == 1


def test_rownn_without_donor():
    m = build_masked_matrix([[1, nan], [3, nan], [nan, 5]], [[1, 0], [1, 0], [0, 1]])
    with pytest.raises(NoObservedDonor):
        impute_rownn(m, (0, 1), math.inf)


@pytest.mark.parametrize("seed", range(50))
def test_rownn_and_colnn_match_explicit_construction(seed):
    values, mask, m = random_instance(seed)
    eta = 0.15
    for i in range(10):
        for t in range(12):
            expected = oracle_rownn(values, mask, i, t, eta)
            if expected is not None:
                assert impute_rownn(m, (i, t), eta).value == approx(expected, abs=1e-12)
            expected = oracle_rownn(values.T, mask.T, t, i, eta)
            if expected is not None:
                assert impute_colnn(m, (i, t), eta).value == approx(expected, abs=1e-12)


def test_colnn_is_rownn_on_transpose():
    _, _, m = random_instance(7)
    mt = transpose(m)
    for i, t in [(0, 0), (3, 5), (9, 11)]:
        assert impute_colnn(m, (i, t), 0.2).value == impute_rownn(mt, (t, i), 0.2).value


def test_colnn_zero_distance_column():
    m = build_masked_matrix([[1, 1, 8], [2, 2, 0], [nan, 3, 5]], [[1, 1, 1], [1, 1, 1], [0, 1, 1]])
    assert impute_colnn(m, (2, 0), 0.0).value == 3.0


def test_percentile_thresholds_resolve_per_target():
    values, mask, m = random_instance(11)
    estimate = impute_rownn(m, (2, 3), Percentile(q=100))
    assert estimate.value == approx(oracle_rownn(values, mask, 2, 3, math.inf), abs=1e-12)


# ---------------------------------------------------------------------------
# TSNN / DRNN / AutoNN
# ---------------------------------------------------------------------------

def test_tsnn_full_window_mean():
    values = np.arange(9.0).reshape(3, 3)
    m = build_masked_matrix(values, np.ones((3, 3)))
    expected = (values.sum() - values[1, 2]) / 8
    assert impute_tsnn(m, (1, 2), math.inf, math.inf).value == approx(expected)


def test_tsnn_with_zero_column_threshold_reduces_to_rownn():
    _, _, m = random_instance(5)
    for i, t in [(0, 1), (4, 4), (8, 10)]:
        assert impute_tsnn(m, (i, t), 0.2, 0.0).value == approx(impute_rownn(m, (i, t), 0.2).value, abs=1e-12)


@pytest.mark.parametrize("seed", range(20))
def test_tsnn_matches_explicit_construction(seed):
    values, mask, m = random_instance(100 + seed, 8, 8)
    for i in range(8):
        for t in range(8):
            expected = oracle_tsnn(values, mask, i, t, 0.12, 0.12)
            if expected is not None:
                assert impute_tsnn(m, (i, t), 0.12, 0.12).value == approx(expected, abs=1e-12)


def test_drnn_on_additive_matrix():
    # theta = [[0, 1], [1, 2]] with the (0, 0) entry missing
    m = build_masked_matrix([[nan, 1.0], [1.0, 2.0]], [[0, 1], [1, 1]])
    assert impute_rownn(m, (0, 0), math.inf).value == 1.0
    assert impute_colnn(m, (0, 0), math.inf).value == 1.0
    assert impute_tsnn(m, (0, 0), math.inf, math.inf).value == approx(4 / 3)
    assert impute_drnn(m, (0, 0), math.inf, math.inf).value == approx(2 / 3)


def test_drnn_is_row_plus_col_minus_ts():
    _, _, m = random_instance(21)
    for i, t in [(0, 0), (5, 6), (9, 2)]:
        dr = impute_drnn(m, (i, t), 0.2, 0.2)
        ts = impute_tsnn(m, (i, t), 0.2, 0.2)
        if ts.fallback_used:
            continue
        row = impute_rownn(m, (i, t), 0.2)
        col = impute_colnn(m, (i, t), 0.2)
        assert dr.value == row.value + col.value - ts.value


def test_drnn_degrades_when_product_neighborhood_is_empty():
    m = build_masked_matrix([[nan, 1.0], [1.0, 2.0]], [[0, 1], [1, 1]])
    # both one-sided estimates fall back, so the product neighborhood is just the target
    estimate = impute_drnn(m, (0, 0), 0.0, 0.0)
    assert estimate.value == 1.0
    assert estimate.fallback_used


def test_drnn_propagates_missing_donor():
    m = build_masked_matrix([[1.0, nan], [nan, 4.0]], [[1, 0], [0, 1]])
    with pytest.raises(NoObservedDonor):
        impute_drnn(m, (0, 1), math.inf, math.inf)


def test_autonn_endpoints_and_linearity():
    _, _, m = random_instance(33)
    target = (4, 7)
    dr = impute_drnn(m, target, 0.2, 0.2).value
    ts = impute_tsnn(m, target, 0.2, 0.2).value
    assert impute_autonn(m, target, 0.2, 0.2, 1.0).value == dr
    assert impute_autonn(m, target, 0.2, 0.2, 0.0).value == ts
    assert impute_autonn(m, target, 0.2, 0.2, 0.5).value == approx(0.5 * dr + 0.5 * ts, abs=1e-15)


def test_shift_equivariance():
    values, mask, m = random_instance(41)
    shifted = build_masked_matrix(values + 2.0, mask)
    for impute in (
        lambda x: impute_rownn(x, (3, 3), 0.2),
        lambda x: impute_tsnn(x, (3, 3), 0.2, 0.2),
        lambda x: impute_drnn(x, (3, 3), 0.2, 0.2),
    ):
        assert impute(shifted).value == approx(impute(m).value + 2.0, abs=1e-9)


def test_scale_equivariance():
    values, mask, m = random_instance(42)
    scaled = build_masked_matrix(values * 2.0, mask)
    base = impute_drnn(m, (6, 1), 0.2, 0.2)
    assert impute_drnn(scaled, (6, 1), 0.8, 0.8).value == approx(2.0 * base.value, abs=1e-9)
    assert impute_rownn(scaled, (6, 1), 0.8).neighbor_count == impute_rownn(m, (6, 1), 0.2).neighbor_count


# ---------------------------------------------------------------------------
# AWNN
# ---------------------------------------------------------------------------

def profile_of(rho):
    rho = np.asarray(rho, dtype=float)
    return DissimilarityProfile(Axis.ROW, 0, np.arange(1, len(rho) + 1), rho, np.ones(len(rho), dtype=bool))


def bisection_projection(y):
    lo, hi = y.min() - 1.0, y.max()
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if np.maximum(y - mid, 0).sum() > 1:
            lo = mid
        else:
            hi = mid
    return np.maximum(y - 0.5 * (lo + hi), 0)


def projected_gradient(rho, c, sigma2):
    v = np.full(len(rho), 1.0 / len(rho))
    step = 0.5 / (2 * c * sigma2)
    for _ in range(500):
        v = bisection_projection(v - step * (2 * c * sigma2 * v + rho))
    return v


def test_awnn_equal_distances_split_evenly():
    weights = awnn_weights(profile_of([0.3, 0.3]), [True, True], 1.0, 1.0)
    assert weights.tolist() == approx([0.5, 0.5])


def test_awnn_small_variance_picks_closest():
    weights = awnn_weights(profile_of([0.2, 0.1, 0.5]), [True, True, True], 1e-12, 1.0)
    assert weights.tolist() == approx([0.0, 1.0, 0.0])


def test_awnn_ignores_unobserved_candidates():
    weights = awnn_weights(profile_of([0.0, 0.4, 0.4]), [False, True, True], 1.0, 1.0)
    assert weights[0] == 0.0
    assert weights.sum() == approx(1.0, abs=1e-9)


def test_awnn_errors():
    with pytest.raises(NonPositiveVariance):
        awnn_weights(profile_of([0.1]), [True], 0.0, 1.0)
    with pytest.raises(NoObservedDonor):
        awnn_weights(profile_of([0.1]), [False], 1.0, 1.0)


def test_awnn_weights_match_projected_gradient():
    rng = np.random.default_rng(8)
    c = 2 * math.log(40)
    for _ in range(100):
        n = int(rng.integers(2, 20))
        rho = rng.uniform(0, 2, size=n)
        observed = rng.random(n) < 0.7
        observed[rng.integers(n)] = True
        sigma2 = rng.uniform(0.05, 1.0)
        weights = awnn_weights(profile_of(rho), observed, sigma2, c)

        expected = projected_gradient(rho[observed], c, sigma2)
        assert weights[observed] == approx(expected, abs=1e-6)
        assert (weights >= 0).all()
        assert weights.sum() == approx(1.0, abs=1e-9)
        order = np.argsort(rho[observed])
        assert (np.diff(weights[observed][order]) <= 1e-12).all()

        def objective(v):
            return c * sigma2 * np.sum(v**2) + np.dot(v, rho[observed])

        uniform = np.full(observed.sum(), 1.0 / observed.sum())
        assert objective(weights[observed]) <= objective(uniform) + 1e-12


def test_simplex_projection_of_a_simplex_point():
    point = np.array([0.2, 0.3, 0.5])
    assert project_to_simplex(point) == approx(point)


def test_awnn_constant_matrix():
    mask = np.ones((4, 4), dtype=bool)
    mask[0, 0] = False
    m = build_masked_matrix(np.full((4, 4), 5.0), mask)
    estimates, state = impute_awnn(m, [EntryIndex(0, 0)])
    assert estimates[EntryIndex(0, 0)].value == approx(5.0)
    assert state.converged
    assert state.iterations <= 2
    assert state.sigma2 == approx(1e-12)


def test_awnn_single_donor():
    m = build_masked_matrix([[1, 2, 3, nan], [1, 2, 3, 4]], [[1, 1, 1, 0], [1, 1, 1, 1]])
    estimates, state = impute_awnn(m, [(0, 3)])
    assert estimates[EntryIndex(0, 3)].value == approx(4.0, abs=1e-6)
    assert state.weights[EntryIndex(0, 3)].tolist() == approx([0.0, 1.0])


def test_awnn_noise_fixed_point():
    rng = np.random.default_rng(7)
    sigma = 0.1
    groups = np.repeat([0.0, 1.0], 5)
    theta = groups[:, None] + rng.uniform(-0.5, 0.5, size=10)[None, :]
    values = theta + sigma * rng.standard_normal((10, 10))
    m = build_masked_matrix(values, np.ones((10, 10)))
    _, state = impute_awnn(m, [], max_iter=50)
    assert state.converged
    assert 0.5 * sigma**2 <= state.sigma2 <= 2 * sigma**2


def test_awnn_records_failures_per_target():
    m = build_masked_matrix([[1, nan], [3, nan], [nan, 5]], [[1, 0], [1, 0], [0, 1]])
    estimates, state = impute_awnn(m, [(0, 1)])
    assert isinstance(estimates[EntryIndex(0, 1)], NoObservedDonor)
    assert EntryIndex(0, 1) not in state.weights


# ---------------------------------------------------------------------------
# Distributional NN
# ---------------------------------------------------------------------------

def test_identical_donors_reproduce_the_measure():
    samples = [[[0.0, 1.0, 2.0]] * 3 for _ in range(3)]
    mask = np.ones((3, 3), dtype=bool)
    mask[0, 0] = False
    dm = build_dist_matrix(samples, mask)
    truth = EmpiricalMeasure.from_samples([0.0, 1.0, 2.0])
    for metric in (EntryMetric.w2_squared(), EntryMetric.mmd2(1.0)):
        estimate = impute_dist_nn(dm, (0, 0), math.inf, metric)
        assert ks_distance(estimate.value, truth) == approx(0.0, abs=1e-12)


def test_single_donor_is_returned_as_is():
    rng = np.random.default_rng(12)
    near = [rng.normal(size=6) for _ in range(3)]
    far = [rng.normal(50.0, 1.0, size=6) for _ in range(3)]
    samples = [near, near, far]
    mask = np.ones((3, 3), dtype=bool)
    mask[0, 2] = False
    dm = build_dist_matrix(samples, mask)
    estimate = impute_dist_nn(dm, (0, 2), 0.01, EntryMetric.w2_squared())
    assert estimate.neighbor_count == 1
    assert estimate.value.atoms.tolist() == approx(sorted(near[2].tolist()))


def test_kernelnn_support_comes_from_donors():
    rng = np.random.default_rng(13)
    samples = [[rng.normal(size=4) for _ in range(3)] for _ in range(4)]
    mask = np.ones((4, 3), dtype=bool)
    mask[0, 1] = False
    dm = build_dist_matrix(samples, mask)
    estimate = impute_dist_nn(dm, (0, 1), math.inf, EntryMetric.mmd2(1.0))
    donor_atoms = np.concatenate([samples[j][1] for j in range(1, 4)])
    assert set(estimate.value.atoms.tolist()) <= set(donor_atoms.tolist())


def test_column_variant_runs_on_transpose():
    rng = np.random.default_rng(14)
    samples = [[rng.normal(size=5) for _ in range(4)] for _ in range(3)]
    mask = np.ones((3, 4), dtype=bool)
    mask[1, 2] = False
    dm = build_dist_matrix(samples, mask)
    metric = EntryMetric.w2_squared()
    by_col = impute_dist_nn(dm, (1, 2), math.inf, metric, axis=Axis.COL)
    by_row = impute_dist_nn(transpose(dm), (2, 1), math.inf, metric)
    assert by_col.value.atoms.tolist() == approx(by_row.value.atoms.tolist())


@pytest.mark.parametrize("metric", [EntryMetric.w2_squared(), EntryMetric.mmd2(1.0)])
def test_dist_nn_recovers_row_type_means(metric):
    rng = np.random.default_rng(3)
    sigma, n = 0.5, 50
    offsets = np.repeat([0.0, 3.0], 6)
    mask = rng.random((12, 12)) < 0.7
    samples = [[offsets[r] + sigma * rng.standard_normal(n) for _ in range(12)] for r in range(12)]
    dm = build_dist_matrix(samples, mask)
    hits = []
    for r, c in zip(*np.nonzero(~mask)):
        estimate = impute_dist_nn(dm, (int(r), int(c)), 1.0, metric)
        hits.append(abs(estimate.value.mean() - offsets[r]) <= 4 * sigma / math.sqrt(n))
    assert np.mean(hits) >= 0.9


# ---------------------------------------------------------------------------
# EstimatorSpec
# ---------------------------------------------------------------------------

def test_spec_records_failures_and_keeps_order():
    m = build_masked_matrix([[1, 2, nan], [1, 2, 6], [nan, nan, 4]], [[1, 1, 0], [1, 1, 1], [0, 0, 1]])
    results = EstimatorSpec(method="rownn").impute(m, [(0, 2), (2, 0)])
    assert [r.value for r in results] == [6.0, 1.0]

    isolated = build_masked_matrix([[1, nan], [3, nan], [nan, 5]], [[1, 0], [1, 0], [0, 1]])
    results = EstimatorSpec(method="rownn").impute(isolated, [(0, 1)])
    assert isinstance(results[0], NoObservedDonor)


def test_spec_runs_every_scalar_method():
    _, _, m = random_instance(50)
    targets = [EntryIndex(0, 0), EntryIndex(3, 4)]
    for method in ("rownn", "colnn", "tsnn", "drnn", "autonn", "awnn", "usvt", "softimpute"):
        results = EstimatorSpec(method=method).impute(m, targets)
        assert len(results) == 2
        assert all(isinstance(r, Estimate) for r in results)


def test_spec_scalar_methods_see_entry_means_of_distributions():
    samples = [[[1.0, 3.0], [0.0, 2.0]], [[1.0, 3.0], [5.0, 7.0]]]
    dm = build_dist_matrix(samples, [[1, 0], [1, 1]])
    result = EstimatorSpec(method="rownn").impute(dm, [(0, 1)])[0]
    assert result.value == 6.0


def test_spec_rejects_distributional_method_on_scalars():
    _, _, m = random_instance(51)
    with pytest.raises(ValueError):
        EstimatorSpec(method="kernelnn").impute(m, [(0, 0)])


def test_hyperparams_validation():
    with pytest.raises(ValueError):
        ScalarHyperParams(alpha=1.5)
    with pytest.raises(ValueError):
        ScalarHyperParams(eta_row=-1.0)
    assert ScalarHyperParams(eta_row={"q": 50}).eta_row == Percentile(q=50)
