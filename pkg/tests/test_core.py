import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import frozen
import oracles
from combassign.core import (
    LOG_2PI,
    BatchAssignment,
    ClusterModel,
    ContractError,
    CostMatrix,
    Prior,
    as_batch,
    batch_objective,
    cost_matrix,
    log_factorial,
    point_cost,
)


def iso_model(centroids, sigma=1.0, prior=None):
    centroids = np.asarray(centroids, dtype=float)
    prior = Prior.uniform(centroids.shape[0]) if prior is None else prior
    return ClusterModel(centroids, prior, sigma)


def random_spd(rng, d):
    a = rng.standard_normal((d, d))
    return a @ a.T + d * np.eye(d)


# -- Prior / model validation -------------------------------------------------


def test_prior_uniform_and_logs():
    p = Prior.uniform(4)
    np.testing.assert_allclose(p.probs, 0.25)
    np.testing.assert_allclose(p.log_probs, np.log(0.25))


def test_prior_zero_entry_has_neg_inf_log():
    p = Prior([0.5, 0.5, 0.0])
    assert np.isneginf(p.log_probs[2])
    assert p.log_probs[0] == math.log(0.5)


@pytest.mark.parametrize("bad", [[0.5, 0.6], [1.2, -0.2], [np.nan, 1.0], []])
def test_prior_rejects_invalid(bad):
    with pytest.raises(ContractError):
        Prior(bad)


def test_prior_sum_tolerance():
    Prior([0.5, 0.5 + 5e-10])
    with pytest.raises(ContractError):
        Prior([0.5, 0.5 + 5e-9])


def test_prior_permuted():
    p = Prior([0.5, 0.3, 0.2]).permuted([2, 0, 1])
    np.testing.assert_array_equal(p.probs, [0.2, 0.5, 0.3])


def test_model_requires_two_clusters_and_positive_sigma():
    with pytest.raises(ContractError):
        iso_model([[0.0, 0.0]])
    with pytest.raises(ContractError):
        iso_model(np.zeros((2, 2)), sigma=0.0)


def test_model_rejects_non_spd_inverse():
    mu = np.zeros((2, 2))
    bad = np.array([np.eye(2), [[1.0, 2.0], [2.0, 1.0]]])
    with pytest.raises(ContractError):
        ClusterModel(mu, Prior.uniform(2), None, bad)
    asym = np.array([np.eye(2), [[1.0, 0.1], [0.0, 1.0]]])
    with pytest.raises(ContractError):
        ClusterModel(mu, Prior.uniform(2), None, asym)


def test_as_batch_promotes_vector_and_rejects_nan():
    assert as_batch([1.0, 2.0]).shape == (1, 2)
    with pytest.raises(ContractError):
        as_batch([[1.0, np.inf]])
    with pytest.raises(ContractError):
        as_batch(np.zeros((3, 2)), d=3)


# -- point_cost -----------------------------------------------------------------


def test_point_cost_at_centroid_is_constant():
    model = iso_model([[1.0, 2.0], [5.0, 5.0]], sigma=1.0)
    assert point_cost(np.array([1.0, 2.0]), 0, model) == pytest.approx(LOG_2PI, abs=1e-15)
    assert LOG_2PI == pytest.approx(1.8379, abs=1e-4)


def test_point_cost_quadratic_term_sigma_100():
    model = iso_model([[0.0, 0.0], [9.0, 9.0]], sigma=100.0)
    const = 0.5 * 2 * math.log(2 * math.pi * 100.0)
    assert point_cost(np.array([2.0, 0.0]), 0, model) - const == pytest.approx(0.02, abs=1e-15)


def test_point_cost_full_covariance_matches_loop_oracle():
    rng = np.random.default_rng(3)
    for d in (1, 3, 5):
        covs = np.array([random_spd(rng, d) for _ in range(3)])
        inv = np.linalg.inv(covs)
        inv = 0.5 * (inv + np.swapaxes(inv, 1, 2))
        mu = rng.standard_normal((3, d))
        model = ClusterModel(mu, Prior.uniform(3), None, inv)
        for _ in range(5):
            z = rng.standard_normal(d) * 3
            for j in range(3):
                got = point_cost(z, j, model)
                want = oracles.gaussian_nll(z, mu[j], covs[j])
                assert abs(got - want) <= 1e-10


def test_point_cost_errors():
    model = iso_model(np.zeros((2, 3)))
    with pytest.raises(ContractError):
        point_cost(np.zeros(2), 0, model)
    with pytest.raises(ContractError):
        point_cost(np.zeros(3), 2, model)
    with pytest.raises(ContractError):
        point_cost(np.array([0.0, np.nan, 0.0]), 0, model)


# -- cost_matrix ----------------------------------------------------------------


def test_cost_matrix_single_entry():
    # a ClusterModel needs K >= 2, so a 1x1 table is the first column of a 1x2 one
    model = iso_model([[0.5, -1.0], [3.0, 3.0]], sigma=2.0)
    z = np.array([[1.0, 1.0]])
    c = cost_matrix(z, model)
    assert c.values[0, 0] == point_cost(z[0], 0, model)


def test_cost_matrix_identical_points_give_identical_rows():
    model = iso_model(np.random.default_rng(0).standard_normal((4, 3)))
    c = cost_matrix(np.tile([0.3, -0.2, 1.0], (5, 1)), model)
    assert np.all(c.values == c.values[0])


@pytest.mark.parametrize("full", [False, True])
def test_cost_matrix_matches_point_cost_loop(full):
    rng = np.random.default_rng(11)
    mu = rng.standard_normal((3, 4))
    if full:
        inv = np.array([np.linalg.inv(random_spd(rng, 4)) for _ in range(3)])
        model = ClusterModel(mu, Prior.uniform(3), None, 0.5 * (inv + np.swapaxes(inv, 1, 2)))
    else:
        model = iso_model(mu, sigma=3.0)
    z = rng.standard_normal((4, 4))
    c = cost_matrix(z, model)
    loop = np.array([[point_cost(z[i], j, model) for j in range(3)] for i in range(4)])
    np.testing.assert_allclose(c.values, loop, rtol=0, atol=1e-12)


def test_cost_matrix_dimension_mismatch():
    with pytest.raises(ContractError):
        cost_matrix(np.zeros((2, 3)), iso_model(np.zeros((2, 2))))


def test_isotropic_constant_is_shared_and_omittable():
    rng = np.random.default_rng(1)
    model = iso_model(rng.standard_normal((5, 3)), sigma=7.0)
    z = rng.standard_normal((20, 3))
    with_c = cost_matrix(z, model)
    without = cost_matrix(z, model, include_constant=False)
    diff = with_c.values - without.values
    np.testing.assert_allclose(diff, diff[0, 0], rtol=0, atol=1e-12)
    np.testing.assert_array_equal(np.argmin(with_c.values, 1), np.argmin(without.values, 1))
    np.testing.assert_allclose(with_c.sqdist / (2 * 7.0), without.values, rtol=1e-14)


@settings(max_examples=60, deadline=None)
@given(
    z=arrays(np.float64, 3, elements=st.floats(-50, 50)),
    mu=arrays(np.float64, (4, 3), elements=st.floats(-50, 50)),
    sigma=st.floats(0.01, 1000),
)
def test_isotropic_cost_difference_is_scaled_distance_difference(z, mu, sigma):
    model = iso_model(mu, sigma)
    for j, jp in itertools.combinations(range(4), 2):
        lhs = point_cost(z, j, model) - point_cost(z, jp, model)
        rhs = (np.sum((z - mu[j]) ** 2) - np.sum((z - mu[jp]) ** 2)) / (2 * sigma)
        scale = max(1.0, abs(point_cost(z, j, model)), abs(point_cost(z, jp, model)))
        assert abs(lhs - rhs) <= 1e-12 * scale


# -- log_factorial / batch_objective -----------------------------------------------


def test_log_factorial_matches_lgamma():
    n = np.array([0, 1, 2, 5, 10, 171, 1000, 10**6])
    np.testing.assert_allclose(log_factorial(n), [math.lgamma(v + 1) for v in n], rtol=1e-12)


def test_batch_objective_single_point():
    costs = CostMatrix.from_values([[1.0, 3.0]])
    assert batch_objective(np.array([0]), costs, Prior.uniform(2)) == pytest.approx(1.0 + math.log(2), abs=1e-15)


def test_batch_objective_all_in_one_cluster():
    rng = np.random.default_rng(2)
    n, k = 7, 4
    costs = CostMatrix.from_values(rng.uniform(0, 2, (n, k)))
    got = batch_objective(np.full(n, 2), costs, Prior.uniform(k))
    want = costs.values[:, 2].sum() + n * math.log(k) + math.lgamma(n + 1)
    assert got == pytest.approx(want, abs=1e-12)


def test_batch_objective_matrix_form_frozen():
    costs = CostMatrix.from_values(frozen.OBJ_COSTS)
    prior = Prior(np.array(frozen.OBJ_PRIOR))
    got = batch_objective(np.array(frozen.OBJ_LABELS), costs, prior)
    live = oracles.objective_matrix_form(frozen.OBJ_LABELS, frozen.OBJ_COSTS, frozen.OBJ_PRIOR)
    assert abs(got - live) <= 1e-10
    assert abs(got - frozen.OBJ_VALUE) <= 1e-10


def test_batch_objective_random_matches_matrix_form():
    rng = np.random.default_rng(5)
    for _ in range(50):
        q = rng.uniform(-2, 3, (5, 3))
        p = rng.dirichlet(np.ones(3))
        labels = rng.integers(0, 3, 5)
        got = batch_objective(labels, CostMatrix.from_values(q), Prior(p / p.sum()))
        assert abs(got - oracles.objective_matrix_form(labels, q.tolist(), (p / p.sum()).tolist())) <= 1e-10


def test_batch_objective_zero_prior_is_infinite():
    costs = CostMatrix.from_values([[0.0, 0.0], [0.0, 0.0]])
    assert batch_objective(np.array([0, 1]), costs, Prior([1.0, 0.0])) == math.inf
    assert math.isfinite(batch_objective(np.array([0, 0]), costs, Prior([1.0, 0.0])))


def test_batch_objective_shape_errors():
    costs = CostMatrix.from_values(np.zeros((3, 2)))
    with pytest.raises(ContractError):
        batch_objective(np.array([0, 1]), costs, Prior.uniform(2))
    with pytest.raises(ContractError):
        batch_objective(np.array([0, 1, 2]), costs, Prior.uniform(2))


def test_batch_assignment_one_hot_rows_sum_to_one():
    costs = CostMatrix.from_values(np.arange(12.0).reshape(4, 3))
    a = BatchAssignment.from_labels([2, 0, 0, 1], costs)
    q = a.one_hot()
    np.testing.assert_array_equal(q.sum(axis=1), 1.0)
    np.testing.assert_array_equal(a.counts, [2, 1, 1])
    assert a.loss == pytest.approx(np.mean([2.0, 3.0, 6.0, 10.0]))


def test_objective_count_term_depends_only_on_counts():
    rng = np.random.default_rng(9)
    costs = CostMatrix.from_values(np.zeros((6, 3)))
    labels = np.array([0, 0, 1, 2, 2, 2])
    base = batch_objective(labels, costs, Prior.uniform(3))
    for _ in range(10):
        assert batch_objective(rng.permutation(labels), costs, Prior.uniform(3)) == pytest.approx(base, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(
    values=arrays(np.float64, (5, 3), elements=st.floats(-5, 5)),
    shift=st.floats(-100, 100),
)
def test_constant_shift_moves_objective_by_n_c_and_keeps_argmin(values, shift):
    prior = Prior.uniform(3)
    grid = [np.array(l) for l in itertools.product(range(3), repeat=5)]
    base = CostMatrix.from_values(values)
    moved = CostMatrix.from_values(values + shift)
    objs = np.array([batch_objective(l, base, prior) for l in grid])
    objs_moved = np.array([batch_objective(l, moved, prior) for l in grid])
    np.testing.assert_allclose(objs_moved - objs, 5 * shift, atol=1e-9)
    assert np.isclose(objs[np.argmin(objs_moved)], objs.min(), atol=1e-9)
