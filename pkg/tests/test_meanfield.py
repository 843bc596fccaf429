import math
import warnings

import numpy as np
import pytest

from mfdynkin.errors import InvalidParam, NoConvergence
from mfdynkin.lattice import JumpSpec, TimeGrid, build_tree, sample_paths
from mfdynkin.meanfield import (FixedPointConfig, check_chaos_condition, check_contraction_condition,
                                fixed_point, mean_field_value_and_saddle, observed_ratios,
                                window_bounds)
from mfdynkin.scenarios import make_scenario


def test_contraction_threshold_at_p2():
    lhs, thr, ok = check_contraction_condition(0.1, 0.2, 0.3, 0.1)
    assert thr == 0.25 and math.isclose(lhs, 0.15) and ok
    assert not check_contraction_condition(0.5, 0.0, 0.0, 0.0)[2]  # strict inequality
    assert check_contraction_condition(0, 0, 0, 0, p=4)[1] == 2.0 ** -7
    with pytest.raises(InvalidParam):
        check_contraction_condition(0.1, 0.1, 0.1, 0.1, p=1.5)


def test_chaos_condition_formula():
    lhs, ok = check_chaos_condition(0.1, 0.1, 0.1, 0.1, p=2)
    assert math.isclose(lhs, 7 * 0.04) and ok


def test_config_validation():
    for bad in (dict(tol=0), dict(max_iter=0), dict(mode="x"), dict(mode="windowed"),
                dict(damping=0.0), dict(damping=1.5)):
        with pytest.raises(InvalidParam):
            FixedPointConfig(**bad)


def test_mean_ode_matches_implicit_recursion_and_exponential():
    steps = 64
    c = make_scenario("mean_ode", level=1.0)
    mf = fixed_point(sample_paths(TimeGrid(1.0, steps), None, 16, 0), c)
    dt = 1.0 / steps
    assert abs(mf.root_value - (1 - dt) ** -steps) < 1e-8
    assert abs(mf.root_value - math.e) < 2 * dt * math.e


def test_coupled_binding_lower_has_closed_form():
    c = make_scenario("binding_lower", level=0.5, coupling=0.1)
    mf = fixed_point(build_tree(TimeGrid(1.0, 1)), c)
    assert abs(mf.root_value - 5 / 9) < 1e-10
    assert all(r < 1 for r in observed_ratios(mf.residuals) if np.isfinite(r))


def test_windowed_and_global_agree_and_initialisation_does_not_matter():
    lat = build_tree(TimeGrid(1.0, 4), JumpSpec((1.0,), (0.5,)))
    c = make_scenario("chaos_meanfield")
    a = fixed_point(lat, c)
    b = fixed_point(lat, c, FixedPointConfig(mode="windowed", window=0.5))
    d = fixed_point(lat, c, FixedPointConfig(init=3.0, damping=0.7))
    assert len(b.windows) == 2
    assert abs(a.root_value - b.root_value) < 1e-8
    assert abs(a.root_value - d.root_value) < 1e-8
    assert a.flow.distance(b.flow) < 1e-8


def test_window_bounds_cover_the_grid():
    assert window_bounds(5, 0.2, 0.4) == [(3, 5), (1, 3), (0, 1)]


def test_no_convergence_carries_residuals():
    c = make_scenario("chaos_meanfield")
    with pytest.raises(NoConvergence) as exc:
        fixed_point(build_tree(TimeGrid(1.0, 3)), c, FixedPointConfig(max_iter=2))
    assert len(exc.value.residuals) == 2


def test_law_independent_coefficients_take_one_pass():
    mf = fixed_point(build_tree(TimeGrid(1.0, 3)), make_scenario("trivial"))
    assert mf.iterations == 1 and mf.residuals == [0.0]


def test_contraction_failure_warns():
    c = make_scenario("binding_lower", level=0.5, coupling=0.6)
    with warnings.catch_warnings(record=True) as rec:
        warnings.simplefilter("always")
        fixed_point(build_tree(TimeGrid(1.0, 1)), c)
    assert any("contraction" in str(w.message) for w in rec)


def test_value_and_saddle_report_on_tree():
    lat = build_tree(TimeGrid(1.0, 3))
    mf, tau, sigma, rep = mean_field_value_and_saddle(lat, make_scenario("insurance"))
    assert rep["saddle"]["passed"]
    assert rep["brute_force"]["gap_to_solution"] < 1e-10


def test_flow_csv(tmp_path):
    mf = fixed_point(build_tree(TimeGrid(1.0, 2)), make_scenario("trivial"))
    mf.flows_to_csv(tmp_path / "f.csv")
    lines = (tmp_path / "f.csv").read_text().splitlines()
    assert len(lines) == 4 and lines[0].startswith("step,mean,q0.00")
