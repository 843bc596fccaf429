import numpy as np
import pytest

from mfdynkin.coefficients import (CoefficientSet, InsuranceScenario, Lipschitz, constant_core,
                                   constant_process, make_insurance_scenario, validate_assumptions)
from mfdynkin.errors import InvalidParam
from mfdynkin.lattice import TimeGrid, build_tree
from mfdynkin.meanfield import check_contraction_condition, fixed_point
from mfdynkin.measures import Measure


@pytest.fixture(scope="module")
def tree():
    return build_tree(TimeGrid(1.0, 4))


def test_insurance_defaults_pass_the_audit(tree):
    c = make_insurance_scenario()
    rep = validate_assumptions(c, tree)
    assert rep.passed, rep.failures()
    assert check_contraction_condition(*c.lipschitz.obstacle_constants)[2]


def test_insurance_defaults_activate_the_lower_reflection():
    mf = fixed_point(build_tree(TimeGrid(1.0, 6)), make_insurance_scenario())
    s = mf.sol.summary()
    assert s["expected_K1_T"] > 0.01


def test_insurance_rejects_bonus_outside_unit_interval():
    with pytest.raises(InvalidParam):
        make_insurance_scenario(InsuranceScenario(bonus=1.2))


def test_obstacle_composition():
    c = CoefficientSet(lower_core=constant_core(2.0), upper_core=constant_core(-1.0),
                       floor=constant_process(0.5), cap=constant_process(1.5))
    st = build_tree(TimeGrid(1.0, 1)).state(1)
    mu = Measure([0.0])
    y = np.zeros(2)
    np.testing.assert_array_equal(c.lower(0.0, y, mu, st), 0.5)
    np.testing.assert_array_equal(c.upper(0.0, y, mu, st), 1.5)


def test_understated_lipschitz_constant_is_flagged(tree):
    c = CoefficientSet(driver=lambda t, y, z, u, mu: 3.0 * np.asarray(y),
                       lipschitz=Lipschitz(driver=1.0), floor=constant_process(-1.0),
                       cap=constant_process(1.0), lower_core=constant_core(-1.0),
                       upper_core=constant_core(1.0))
    rep = validate_assumptions(c, tree)
    assert not rep.passed
    assert any("lipschitz" in name for name in rep.failures())


def test_crossed_floor_and_cap_are_flagged(tree):
    c = CoefficientSet(floor=constant_process(1.0), cap=constant_process(0.0),
                       lower_core=constant_core(-1.0), upper_core=constant_core(1.0))
    rep = validate_assumptions(c, tree)
    assert "floor_below_cap" in rep.failures()


def test_terminal_outside_obstacles_is_flagged(tree):
    c = CoefficientSet(floor=constant_process(-0.1), cap=constant_process(0.1),
                       lower_core=constant_core(-0.1), upper_core=constant_core(0.1),
                       terminal=lambda s: 5.0 + 0.0 * s.brownian)
    assert "terminal_sandwich" in validate_assumptions(c, tree).failures()


def test_with_updates_keeps_other_fields():
    c = make_insurance_scenario()
    d = c.with_updates(name="other")
    assert d.name == "other" and d.driver is c.driver
