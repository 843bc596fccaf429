import math

import numpy as np
import pytest

from mfdynkin.errors import InvalidGrid, InvalidIntensity, SingularRegression
from mfdynkin.lattice import (JumpSpec, State, TimeGrid, build_tree, joint_tree, polynomial_features,
                              sample_paths)


def test_time_grid_hits_horizon_exactly():
    g = TimeGrid(0.3, 7)
    assert g.time(7) == 0.3
    assert g.times[0] == 0.0 and len(g.times) == 8


@pytest.mark.parametrize("horizon,steps", [(1.0, 0), (1.0, 2.5), (0.0, 3), (-1.0, 3), (math.inf, 2)])
def test_time_grid_rejects_bad_input(horizon, steps):
    with pytest.raises(InvalidGrid):
        TimeGrid(horizon, steps)


def test_intensity_validation():
    with pytest.raises(InvalidIntensity):
        JumpSpec((1.0,), (-0.1,))
    with pytest.raises(InvalidIntensity):
        JumpSpec((1.0, 2.0), (0.1,))
    with pytest.raises(InvalidIntensity):
        JumpSpec((1.0,), (4.0,)).jump_probabilities(TimeGrid(1.0, 4))


def test_tree_weights_and_branching():
    tree = build_tree(TimeGrid(1.0, 3), JumpSpec((0.5, -1.0), (0.4, 0.2)))
    assert tree.branching == 6
    for m in range(4):
        assert tree.size(m) == 6 ** m
        assert math.isclose(tree.weights(m).sum(), 1.0, rel_tol=1e-14)


def test_tree_martingales_and_loadings_are_exact():
    jumps = JumpSpec((0.7,), (0.6,))
    tree = build_tree(TimeGrid(2.0, 3), jumps)
    p = tree.mark_prob[0]
    for m in range(3):
        b_next = tree.state(m + 1).brownian
        np.testing.assert_allclose(tree.conditional_expectation(b_next, m), tree.state(m).brownian,
                                   atol=1e-14)
        mean, z, u = tree.loadings(b_next, m)
        np.testing.assert_allclose(z, 1.0, atol=1e-13)
        np.testing.assert_allclose(u, 0.0, atol=1e-13)
        counts_next = tree.state(m + 1).counts[:, 0]
        mean, z, u = tree.loadings(counts_next, m)
        np.testing.assert_allclose(mean, tree.state(m).counts[:, 0] + p, atol=1e-13)
        np.testing.assert_allclose(u[..., 0], 1.0, atol=1e-13)
        np.testing.assert_allclose(z, 0.0, atol=1e-13)


def test_martingale_residual_vanishes_on_representable_increments():
    tree = build_tree(TimeGrid(1.0, 2), JumpSpec((1.0, 2.0), (0.5, 0.3)))
    m = 1
    db = np.tile(tree.branch_db, tree.size(m))
    marks = np.tile(tree.branch_mark, tree.size(m))
    v = 0.3 + 2.0 * db + 0.7 * (marks == 1) - 0.4 * (marks == 2)
    assert np.max(tree.martingale_residual(v, m)) < 1e-13
    # an interaction of dB with the jumps lies outside the span of (dB, jump indicators)
    w = np.where(marks > 0, db, 0.0)
    assert np.max(tree.martingale_residual(w, m)) > 1e-3


def test_binary_tree_has_no_martingale_defect():
    tree = build_tree(TimeGrid(1.0, 3))
    rng = np.random.default_rng(0)
    for m in range(3):
        assert np.max(tree.martingale_residual(rng.normal(size=tree.size(m + 1)), m)) < 1e-12


def test_paths_are_seeded_and_well_formed():
    g, j = TimeGrid(1.0, 5), JumpSpec((1.0,), (0.8,))
    a = sample_paths(g, j, 500, 42)
    b = sample_paths(g, j, 500, 42)
    c = sample_paths(g, j, 500, 43)
    assert np.array_equal(a.db, b.db) and np.array_equal(a.jump_idx, b.jump_idx)
    assert not np.array_equal(a.db, c.db)
    np.testing.assert_allclose(np.abs(a.db), math.sqrt(g.dt))
    assert set(np.unique(a.jump_idx)) <= {0, 1}
    freq = a.jump_idx.mean()
    assert abs(freq - 0.8 * g.dt) < 4 * math.sqrt(0.16 * 0.84 / a.jump_idx.size)


def test_path_regression_reproduces_polynomials():
    ens = sample_paths(TimeGrid(1.0, 4), JumpSpec((1.0,), (0.5,)), 4000, 1)
    m = 2
    st = ens.state(m)
    target = 0.5 + st.brownian - 0.3 * st.brownian ** 2 + 0.2 * st.counts[:, 0]
    np.testing.assert_allclose(ens.conditional_expectation(target, m), target, atol=1e-10)


def test_path_loadings_recover_brownian_and_jump_coefficients():
    ens = sample_paths(TimeGrid(1.0, 3), JumpSpec((1.0,), (0.9,)), 20000, 3)
    m = 1
    nxt = ens.state(m + 1)
    mean, z, u = ens.loadings(2.0 * nxt.brownian + 0.5 * nxt.counts[:, 0], m, 2)
    # exact in conditional mean; individual fits carry regression noise
    assert abs(np.mean(z) - 2.0) < 0.05
    assert abs(np.mean(u[:, 0]) - 0.5) < 0.05


def test_polynomial_features_respect_support():
    st = State(np.array([-1.0, 1.0, -1.0, 1.0]), np.zeros((4, 1)), np.array([1.0]))
    f = polynomial_features(st, 3)
    assert f.shape == (4, 2)
    with pytest.raises(SingularRegression):
        from mfdynkin.lattice import _fit
        _fit(np.ones((3, 2)), np.ones((3, 1)))


def test_joint_tree_views_have_single_particle_marginals():
    g, j = TimeGrid(1.0, 2), JumpSpec((1.0,), (0.5,))
    single = build_tree(g, j)
    for particle in (0, 1):
        view = joint_tree(g, j, 2, particle)
        assert view.branching == single.branching ** 2
        for m in range(3):
            b, w = view.state(m).brownian, view.weights(m)
            for level in np.unique(single.state(m).brownian):
                p_single = single.weights(m)[single.state(m).brownian == level].sum()
                assert math.isclose(w[b == level].sum(), p_single, rel_tol=1e-12)
    v0, v1 = joint_tree(g, j, 2, 0), joint_tree(g, j, 2, 1)
    # particles are independent under the product weights
    w = v0.weights(2)
    e_prod = np.sum(w * v0.state(2).brownian * v1.state(2).brownian)
    assert abs(e_prod) < 1e-14
