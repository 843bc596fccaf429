"""Shared builders for randomised admissible instances."""
import numpy as np

from mfdynkin.coefficients import CoefficientSet, Lipschitz
from mfdynkin.lattice import JumpSpec, TimeGrid, build_tree
from mfdynkin.measures import Measure, MeasureFlow


def random_instance(rng, steps: int, marks: int, y_dependent: bool = True):
    """Tree, coefficients and a frozen flow with a nonlinear driver and coupled obstacles.

    The floor and cap are affine in the driver state, the obstacle cores
    are smooth in ``(y, mean)`` with small slopes, and the driver slope in
    ``y`` is scaled so that ``|slope| dt <= 0.5``.
    """
    signs = rng.choice([-1.0, 1.0], size=marks)
    jumps = JumpSpec(tuple(signs * rng.uniform(0.2, 1.0, size=marks)),
                     tuple(rng.uniform(0.1, 0.8, size=marks) * 0.5 / max(marks, 1)))
    lat = build_tree(TimeGrid(float(rng.uniform(0.5, 2.0)), steps), jumps)
    a, b = rng.uniform(-0.5, 0.5), rng.uniform(-0.8, 0.8) * min(1.0, 0.5 / lat.grid.dt)
    g1, k1 = (rng.uniform(0, 0.4), rng.uniform(0, 0.4)) if y_dependent else (0.0, 0.0)
    g2 = rng.uniform(0, 0.5)
    zc, uc = rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5)
    l0, u0, s0, sp = rng.uniform(-0.6, 0.2), rng.uniform(-0.2, 0.6), rng.uniform(-0.5, 0.5), rng.uniform(0, 0.6)
    sv = rng.uniform(-0.5, 0.5)

    def floor(t, s):
        return s0 + sv * s.brownian + 0.2 * s.jump_level

    def cap(t, s):
        return floor(t, s) + sp

    c = CoefficientSet(
        driver=lambda t, y, z, u, mu: a + b * y + zc * np.tanh(z) + uc * np.tanh(u) + 0.3 * mu.mean(),
        lower_core=lambda t, y, mu: l0 + g1 * np.sin(y) + g2 * mu.mean() + 0 * y,
        upper_core=lambda t, y, mu: u0 + k1 * np.cos(y) - g2 * mu.mean() + 0 * y,
        floor=floor, cap=cap,
        terminal=lambda s: np.clip(np.sin(2 * s.brownian) + 0.3 * s.jump_level,
                                   floor(0, s), cap(0, s)),
        lipschitz=Lipschitz(abs(b) + abs(zc) + abs(uc) + 0.3, g1, g2, k1, g2))
    flow = MeasureFlow([Measure(rng.normal(size=3)) for _ in range(steps + 1)])
    return lat, c, flow


# (steps, marks) shapes whose stopping-rule pairs fit the enumeration cap
ENUMERABLE_SHAPES = [(1, 0), (2, 0), (3, 0), (4, 0), (1, 1), (2, 1), (1, 2), (2, 2)]
