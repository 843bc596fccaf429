"""Game data: driver, obstacles with floor/cap processes, terminal map, and audits."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .measures import Measure, wasserstein_p
from .errors import InvalidParam


@dataclass(frozen=True)
class Lipschitz:
    """Declared Lipschitz constants.

    ``driver`` bounds ``f`` in ``(y, z, u, mu)``; ``gamma`` bounds the lower
    obstacle core in ``(y, mu)`` and ``kappa`` the upper one.
    """

    driver: float = 0.0
    gamma1: float = 0.0
    gamma2: float = 0.0
    kappa1: float = 0.0
    kappa2: float = 0.0

    def __post_init__(self):
        for name in ("driver", "gamma1", "gamma2", "kappa1", "kappa2"):
            if getattr(self, name) < 0:
                raise InvalidParam(f"Lipschitz constant {name} must be >= 0")

    @property
    def obstacle_constants(self):
        return self.gamma1, self.gamma2, self.kappa1, self.kappa2


def _zero_driver(t, y, z, u, mu):
    return np.zeros(np.broadcast_shapes(np.shape(y), np.shape(z)))


def constant_process(value: float) -> Callable:
    """Floor/cap process equal to ``value`` at every node."""
    return lambda t, state: np.full(np.shape(state.brownian), float(value))


def constant_core(value: float) -> Callable:
    """Obstacle core independent of ``(y, mu)``."""
    return lambda t, y, mu: np.full(np.shape(y), float(value))


@dataclass(frozen=True)
class CoefficientSet:
    """Driver, obstacles ``h1 = lower_core ^ floor``, ``h2 = upper_core v cap``, terminal.

    Callables
    ---------
    driver(t, y, z, u, mu)
        ``u`` is the weighted aggregate of the jump loadings (or the per-mark
        array when ``full_u`` is set); ``mu`` is a :class:`Measure`.
    lower_core(t, y, mu), upper_core(t, y, mu)
        Obstacle cores before the floor/cap.
    floor(t, state), cap(t, state)
        Deterministic functions of time and driver state, ``floor <= cap``.
    terminal(state)
        Terminal condition evaluated on the terminal state.

    All callables must broadcast ``y`` against the batch shape of ``mu``.
    """

    driver: Callable = _zero_driver
    lower_core: Callable = constant_core(-1e9)
    upper_core: Callable = constant_core(1e9)
    floor: Callable = constant_process(0.0)
    cap: Callable = constant_process(0.0)
    terminal: Callable = lambda state: np.zeros(np.shape(state.brownian))
    lipschitz: Lipschitz = field(default_factory=Lipschitz)
    p: float = 2.0
    comparison_ok: bool = True
    law_dependent: bool = True
    u_weights: Optional[tuple] = None
    full_u: bool = False
    name: str = "custom"

    def __post_init__(self):
        if self.p < 2:
            raise InvalidParam("moment order p must be >= 2")

    @property
    def obstacles_depend_on_y(self) -> bool:
        return self.lipschitz.gamma1 > 0 or self.lipschitz.kappa1 > 0

    def lower(self, t, y, mu, state):
        return np.minimum(self.lower_core(t, y, mu), self.floor(t, state))

    def upper(self, t, y, mu, state):
        return np.maximum(self.upper_core(t, y, mu), self.cap(t, state))

    def aggregate_u(self, u, jumps):
        """Collapse per-mark loadings (trailing axis) to the driver argument."""
        if self.full_u:
            return u
        if u.shape[-1] == 0:
            return np.zeros(u.shape[:-1])
        w = np.asarray(self.u_weights if self.u_weights is not None else jumps.intensities)
        return u @ w

    def with_updates(self, **changes) -> "CoefficientSet":
        from dataclasses import replace

        return replace(self, **changes)


@dataclass
class CheckResult:
    passed: bool
    measured: float
    bound: float
    witness: dict = field(default_factory=dict)


@dataclass
class ValidationReport:
    checks: dict
    contraction: tuple = ()

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks.values())

    def failures(self):
        return [k for k, c in self.checks.items() if not c.passed]

    def to_dict(self):
        return {
            "passed": self.passed,
            "checks": {
                k: {"passed": c.passed, "measured": c.measured, "bound": c.bound,
                    "witness": c.witness}
                for k, c in self.checks.items()
            },
        }


def _random_measure(rng, scale, n=5):
    return Measure(rng.normal(0.0, scale, size=n))


def validate_assumptions(c: CoefficientSet, lattice, probe_count: int = 200, seed: int = 0,
                         y_scale: float = 2.0) -> ValidationReport:
    """Audit the standing assumptions on randomised probes.

    Checks floor <= cap on every lattice node, the sandwich
    ``h1 <= floor <= cap <= h2``, empirical Lipschitz ratios against the
    declared constants (1% slack), and the terminal sandwich under the law
    of the terminal condition.
    """
    if probe_count < 1:
        raise ValueError("probe_count must be >= 1")
    rng = np.random.default_rng(seed)
    grid = lattice.grid
    lip = c.lipschitz
    checks = {}
    slack = 1.01

    worst, witness = -np.inf, {}
    for m in range(grid.steps + 1):
        st = lattice.state(m)
        gap = c.floor(grid.time(m), st) - c.cap(grid.time(m), st)
        j = int(np.argmax(gap))
        if gap[j] > worst:
            worst, witness = float(gap[j]), {"step": m, "index": j}
    checks["floor_below_cap"] = CheckResult(worst <= 0, worst, 0.0, witness)

    ratios = {k: (0.0, {}) for k in ("lower_y", "lower_mu", "upper_y", "upper_mu",
                                      "driver_y", "driver_z", "driver_u", "driver_mu")}
    sandwich, sandwich_w = -np.inf, {}

    for _ in range(probe_count):
        m = int(rng.integers(0, grid.steps + 1))
        t = grid.time(m)
        st = lattice.state(m)
        j = int(rng.integers(0, st.brownian.shape[0]))
        node = type(st)(st.brownian[j:j + 1], st.counts[j:j + 1], st.marks)
        y1, y2 = rng.normal(0.0, y_scale, size=2)
        mu1, mu2 = _random_measure(rng, y_scale), _random_measure(rng, y_scale)
        dmu = float(wasserstein_p(mu1, mu2, c.p))
        wit = {"t": t, "y": [float(y1), float(y2)], "mu_means": [float(mu1.mean()), float(mu2.mean())]}

        h1 = float(c.lower(t, np.array([y1]), mu1, node)[0])
        h2 = float(c.upper(t, np.array([y1]), mu1, node)[0])
        s_lo = float(c.floor(t, node)[0])
        s_hi = float(c.cap(t, node)[0])
        viol = max(h1 - s_lo, s_lo - s_hi, s_hi - h2)
        if viol > sandwich:
            sandwich, sandwich_w = viol, dict(wit, step=m, node=j)

        lc, uc = c.lower_core, c.upper_core
        _ratio(ratios, "lower_y", lc(t, y1, mu1) - lc(t, y2, mu1), abs(y1 - y2), wit)
        _ratio(ratios, "lower_mu", lc(t, y1, mu1) - lc(t, y1, mu2), dmu, wit)
        _ratio(ratios, "upper_y", uc(t, y1, mu1) - uc(t, y2, mu1), abs(y1 - y2), wit)
        _ratio(ratios, "upper_mu", uc(t, y1, mu1) - uc(t, y1, mu2), dmu, wit)
        if m < grid.steps:
            z1, z2, u1, u2 = rng.normal(0.0, y_scale, size=4)
            if c.full_u:
                u1 = rng.normal(0.0, y_scale, size=max(lattice.n_marks, 1))
                u2 = rng.normal(0.0, y_scale, size=max(lattice.n_marks, 1))
                du = float(np.sqrt(np.sum((u1 - u2) ** 2)))
            else:
                du = abs(u1 - u2)
            f = c.driver
            _ratio(ratios, "driver_y", f(t, y1, z1, u1, mu1) - f(t, y2, z1, u1, mu1), abs(y1 - y2), wit)
            _ratio(ratios, "driver_z", f(t, y1, z1, u1, mu1) - f(t, y1, z2, u1, mu1), abs(z1 - z2), wit)
            _ratio(ratios, "driver_u", f(t, y1, z1, u1, mu1) - f(t, y1, z1, u2, mu1), du, wit)
            _ratio(ratios, "driver_mu", f(t, y1, z1, u1, mu1) - f(t, y1, z1, u1, mu2), dmu, wit)

    checks["mokobodzki_sandwich"] = CheckResult(sandwich <= 1e-12, sandwich, 0.0, sandwich_w)
    bounds = {"lower_y": lip.gamma1, "lower_mu": lip.gamma2, "upper_y": lip.kappa1,
              "upper_mu": lip.kappa2, "driver_y": lip.driver, "driver_z": lip.driver,
              "driver_u": lip.driver, "driver_mu": lip.driver}
    for key, (r, wit) in ratios.items():
        checks[f"lipschitz_{key}"] = CheckResult(r <= bounds[key] * slack + 1e-12, r, bounds[key], wit)

    st = lattice.state(grid.steps)
    xi = np.asarray(c.terminal(st), dtype=float)
    law = Measure(xi, lattice.weights(grid.steps))
    T = grid.horizon
    gap = np.maximum(c.lower(T, xi, law, st) - xi, xi - c.upper(T, xi, law, st))
    j = int(np.argmax(gap))
    checks["terminal_sandwich"] = CheckResult(bool(gap[j] <= 1e-12), float(gap[j]), 0.0, {"node": j})

    from .meanfield import check_contraction_condition

    return ValidationReport(checks, check_contraction_condition(*lip.obstacle_constants, c.p))


def _ratio(ratios, key, num, den, wit):
    num = float(np.abs(np.asarray(num)).max())
    if den > 1e-9:
        r = num / den
        if r > ratios[key][0]:
            ratios[key] = (r, wit)


def _as_fn(v):
    return v if callable(v) else (lambda t, _v=float(v): _v)


@dataclass(frozen=True)
class InsuranceScenario:
    """Participating life-insurance contract with mean-field bonus.

    Rates may be floats or functions of time. Fee and bonus maps are affine:
    ``c_i(x) = level_i + slope_i * x``. The benchmark is
    ``S_t = s0 + s_drift t + s_vol * B_t + s_jump * jump_level_t`` and ``S'_t = S_t + spread``;
    the terminal reserve is ``xi0 + xi_vol * B_T + xi_jump * jump_level_T``
    clipped to ``[S_T, S'_T]``.
    """

    horizon: float = 1.0
    alpha: object = 0.02
    delta: object = 0.05
    beta: object = 0.1
    theta: object = 0.0
    guarantee: float = 1.0
    bonus: float = 0.3
    c1_level: float = 0.0
    c1_slope: float = 0.01
    c2_level: float = 0.6
    c2_slope: float = 0.1
    c3_level: float = 0.6
    c3_slope: float = 0.1
    s0: float = 1.1
    s_vol: float = 0.2
    s_drift: float = -0.3
    s_jump: float = 0.0
    spread: float = 0.2
    xi0: float = 1.0
    xi_vol: float = 0.4
    xi_jump: float = 0.0


def make_insurance_scenario(params: InsuranceScenario = InsuranceScenario()) -> CoefficientSet:
    """Coefficients of the reserve-pricing game with mean-field bonus.

    ``f = alpha - delta y + beta max(theta, y - mean)``, lower core
    ``u - c1(y) + bonus (mean - u)^+``, upper core ``c2(y) + c3(mean)``.
    """
    if not 0 < params.bonus < 1:
        raise InvalidParam(f"bonus fraction must lie in (0, 1), got {params.bonus}")
    alpha, delta, beta, theta = (_as_fn(v) for v in
                                 (params.alpha, params.delta, params.beta, params.theta))
    u = params.guarantee
    pr = params

    def driver(t, y, z, ua, mu):
        return alpha(t) - delta(t) * y + beta(t) * np.maximum(theta(t), y - mu.mean())

    def lower_core(t, y, mu):
        return u - (pr.c1_level + pr.c1_slope * y) + pr.bonus * np.maximum(mu.mean() - u, 0.0)

    def upper_core(t, y, mu):
        return (pr.c2_level + pr.c2_slope * y) + (pr.c3_level + pr.c3_slope * mu.mean())

    def floor(t, state):
        return pr.s0 + pr.s_drift * t + pr.s_vol * state.brownian + pr.s_jump * state.jump_level

    def cap(t, state):
        return floor(t, state) + pr.spread

    def terminal(state):
        raw = pr.xi0 + pr.xi_vol * state.brownian + pr.xi_jump * state.jump_level
        T = pr.horizon
        return np.clip(raw, floor(T, state), cap(T, state))

    ts = np.linspace(0.0, pr.horizon, 101)
    c_f = 2.0 * max(abs(delta(t)) + abs(beta(t)) for t in ts)
    lip = Lipschitz(driver=c_f, gamma1=abs(pr.c1_slope), gamma2=pr.bonus,
                    kappa1=abs(pr.c2_slope), kappa2=abs(pr.c3_slope))
    return CoefficientSet(driver=driver, lower_core=lower_core, upper_core=upper_core,
                          floor=floor, cap=cap, terminal=terminal, lipschitz=lip,
                          name="insurance")
