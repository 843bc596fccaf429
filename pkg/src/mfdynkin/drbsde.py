"""Backward induction for doubly reflected BSDEs with jumps on a frozen law flow.

One step of the scheme at time index ``m``::

    cont = E[Y_{m+1} | F_m] + f(t_m, cont, Z_m, U_m, mu_m) dt      (implicit in y)
    Y_m  = median(h1(t_m, Y_m, mu_m), cont, h2(t_m, Y_m, mu_m))    (implicit clamp)
    dK1  = (Y_m - cont)^+,  dK2 = (cont - Y_m)^+

so Skorokhod flatness and mutual singularity hold by construction.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import BackendUnsupported, ImplicitDiverge, InvalidParam, ObstacleCross, SingularRegression
from .measures import Measure, MeasureFlow

CLAMP_TOL = 1e-12
CLAMP_MAX_ITER = 200
DRIVER_MAX_ITER = 200
CROSS_TOL = 1e-12


def implicit_driver(mean, t, z, u, mu, c, dt, max_iter: int = DRIVER_MAX_ITER):
    """Solve ``x = mean + f(t, x, z, u, mu) dt`` by fixed-point iteration."""
    mean = np.asarray(mean, dtype=float)
    x = mean + c.driver(t, mean, z, u, mu) * dt
    for _ in range(max_iter):
        x_new = mean + c.driver(t, x, z, u, mu) * dt
        step = np.max(np.abs(x_new - x), initial=0.0)
        x = x_new
        if step <= 1e-15 * max(1.0, np.max(np.abs(x), initial=0.0)):
            return x
    if step > 1e-10 * max(1.0, np.max(np.abs(x), initial=0.0)) or not np.all(np.isfinite(x)):
        raise ImplicitDiverge(f"driver fixed point did not settle (last step {step:.3e}); "
                              "driver Lipschitz constant times dt must be < 1")
    return x


def clamp_implicit(cont, t, mu, c, state, tol: float = CLAMP_TOL,
                   max_iter: int = CLAMP_MAX_ITER, damping: float = 1.0):
    """Solve ``y = median(h1(t, y, mu), cont, h2(t, y, mu))``.

    Returns ``(y, dk1, dk2)`` with ``dk1 = (y - cont)^+`` and
    ``dk2 = (cont - y)^+``.
    """
    cont = np.asarray(cont, dtype=float)
    y = cont
    for it in range(max_iter):
        lo = c.lower(t, y, mu, state)
        hi = c.upper(t, y, mu, state)
        if np.any(lo > hi + CROSS_TOL):
            raise ObstacleCross(f"h1 > h2 by {np.max(lo - hi):.3e} at t={t}")
        target = np.minimum(np.maximum(cont, lo), hi)
        y_new = y + damping * (target - y)
        step = np.max(np.abs(y_new - y), initial=0.0)
        y = y_new
        if step <= tol:
            break
    else:
        raise ImplicitDiverge(f"clamp did not converge in {max_iter} iterations "
                              f"(last step {step:.3e}); need gamma1, kappa1 < 1")
    lo = c.lower(t, y, mu, state)
    hi = c.upper(t, y, mu, state)
    y = np.minimum(np.maximum(cont, lo), hi)
    return y, np.maximum(y - cont, 0.0), np.maximum(cont - y, 0.0)


def loadings_with_fallback(lattice, values, m, degree):
    """``lattice.loadings`` retrying with lower regression degree when singular."""
    for d in range(degree, -1, -1):
        try:
            return lattice.loadings(values, m, d), d
        except SingularRegression:
            if d == 0:
                raise
    raise AssertionError("unreachable")


@dataclass
class DRBSDESolution:
    """Per-step arrays (node or path axis last) of the discrete solution.

    ``Y``, ``lower`` and ``upper`` have ``M + 1`` entries; ``Z``, ``U``,
    ``dK1``, ``dK2``, ``cont`` and ``driver_values`` have ``M``.
    """

    lattice: object
    Y: list
    Z: list
    U: list
    dK1: list
    dK2: list
    cont: list
    driver_values: list
    lower: list
    upper: list
    flow: MeasureFlow
    reflect: bool = True
    degrees: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def steps(self) -> int:
        return len(self.Y) - 1

    @property
    def root_value(self) -> float:
        y0 = np.asarray(self.Y[0])
        return float(np.mean(y0)) if y0.ndim else float(y0)

    def _cumulate(self, inc):
        out = [np.zeros_like(np.asarray(self.Y[0], dtype=float))]
        for m, d in enumerate(inc):
            out.append(self.lattice.expand(out[-1] + d, m))
        return out

    @property
    def K1(self):
        return self._cumulate(self.dK1)

    @property
    def K2(self):
        return self._cumulate(self.dK2)

    @property
    def W(self):
        return [a - b for a, b in zip(self.K1, self.K2)]

    def expected(self, values, m) -> float:
        return float(np.sum(np.asarray(values) * self.lattice.weights(m), axis=-1).mean())

    def residuals(self) -> dict:
        """Largest node-wise violation of each structural identity."""
        M = self.steps
        out = {"sandwich": 0.0, "skorokhod_lower": 0.0, "skorokhod_upper": 0.0,
               "mutual_singularity": 0.0, "negative_increment": 0.0, "one_step": 0.0}
        for m in range(M):
            y, lo, hi = self.Y[m], self.lower[m], self.upper[m]
            d1, d2 = self.dK1[m], self.dK2[m]
            out["sandwich"] = max(out["sandwich"], float(np.max(np.maximum(lo - y, y - hi))))
            out["skorokhod_lower"] = max(out["skorokhod_lower"], float(np.max(np.abs(d1 * (y - lo)))))
            out["skorokhod_upper"] = max(out["skorokhod_upper"], float(np.max(np.abs(d2 * (hi - y)))))
            out["mutual_singularity"] = max(out["mutual_singularity"], float(np.max(np.minimum(d1, d2))))
            out["negative_increment"] = max(out["negative_increment"], float(-min(np.min(d1), np.min(d2), 0.0)))
            one = y - (self.cont[m] + d1 - d2)
            out["one_step"] = max(out["one_step"], float(np.max(np.abs(one))))
        if self.lattice.backend == "tree":
            out["one_step"] = max(out["one_step"], self._tree_one_step())
        out["sandwich"] = max(out["sandwich"], 0.0)
        lo, hi = self.lower[M], self.upper[M]
        out["terminal_sandwich"] = max(0.0, float(np.max(np.maximum(lo - self.Y[M], self.Y[M] - hi))))
        return out

    def _tree_one_step(self) -> float:
        worst = 0.0
        dt = self.lattice.dt
        for m in range(self.steps):
            mean = self.lattice.conditional_expectation(self.Y[m + 1], m)
            r = self.Y[m] - (mean + self.driver_values[m] * dt + self.dK1[m] - self.dK2[m])
            worst = max(worst, float(np.max(np.abs(r))))
        return worst

    def martingale_residual(self) -> float:
        """Largest conditional L2 defect of the ``(Z, U)`` representation (tree)."""
        if self.lattice.backend != "tree":
            raise BackendUnsupported("martingale residual is exact on trees only")
        return max(float(np.max(self.lattice.martingale_residual(self.Y[m + 1], m)))
                   for m in range(self.steps))

    def summary(self) -> dict:
        M = self.steps
        w = self.lattice.weights(M)
        k1, k2 = self.K1[M], self.K2[M]
        res = self.residuals()
        return {
            "root_value": self.root_value,
            "expected_K1_T": float(np.sum(k1 * w, axis=-1).mean()),
            "expected_K2_T": float(np.sum(k2 * w, axis=-1).mean()),
            "backend": self.lattice.backend,
            "steps": M,
            "reflect": self.reflect,
            "jump_marks": [float(x) for x in self.lattice.jumps.marks],
            "jump_intensities": [float(x) for x in self.lattice.jumps.intensities],
            "regression_degrees": list(self.degrees),
            "residuals": res,
            **{k: v for k, v in self.meta.items() if isinstance(v, (int, float, str))},
        }

    def to_csv(self, path):
        """One row per node (tree) or path (ensemble) and time step."""
        lat = self.lattice
        n_k = lat.n_marks
        K1, K2 = self.K1, self.K2
        header = (["m", "index", "brownian"] + [f"count_{k + 1}" for k in range(n_k)]
                  + ["Y", "Z"] + [f"U_{k + 1}" for k in range(n_k)] + ["K1", "K2"])
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for m in range(self.steps + 1):
                st = lat.state(m)
                y = np.broadcast_to(self.Y[m], (lat.size(m),))
                for j in range(lat.size(m)):
                    row = [m, j, repr(float(st.brownian[j]))]
                    row += [int(st.counts[j, k]) for k in range(n_k)]
                    row.append(repr(float(y[j])))
                    if m < self.steps:
                        row.append(repr(float(self.Z[m][j])))
                        row += [repr(float(self.U[m][j, k])) for k in range(n_k)]
                    else:
                        row += [""] * (1 + n_k)
                    row += [repr(float(K1[m][j])), repr(float(K2[m][j]))]
                    w.writerow(row)


def backward(lattice, c, flow, terminal=None, *, reflect: bool = True, degree: int = 2,
             start: int | None = None, stop: int = 0) -> DRBSDESolution:
    """Run the scheme from step ``start`` (default ``M``) down to ``stop``.

    ``terminal`` gives the values at ``start``; it defaults to the terminal
    map when ``start == M``. Entries outside ``[stop, start]`` stay ``None``.
    """
    grid = lattice.grid
    M = grid.steps
    start = M if start is None else start
    dt = grid.dt
    if terminal is None:
        if start != M:
            raise ValueError("terminal values are required when start < M")
        terminal = c.terminal(lattice.state(M))
    n = M + 1
    Y, lower, upper = [None] * n, [None] * n, [None] * n
    Z, U, dK1, dK2, cont_l, drv = ([None] * M for _ in range(6))
    degrees = [None] * M
    Y[start] = np.asarray(terminal, dtype=float)
    t_s = grid.time(start)
    st_s = lattice.state(start)
    lower[start] = c.lower(t_s, Y[start], flow[start], st_s)
    upper[start] = c.upper(t_s, Y[start], flow[start], st_s)
    for m in range(start - 1, stop - 1, -1):
        t = grid.time(m)
        mu = flow[m]
        st = lattice.state(m)
        (mean, z, u), degrees[m] = loadings_with_fallback(lattice, Y[m + 1], m, degree)
        ua = c.aggregate_u(u, lattice.jumps)
        cont = implicit_driver(mean, t, z, ua, mu, c, dt)
        if reflect:
            y, d1, d2 = clamp_implicit(cont, t, mu, c, st)
        else:
            y, d1, d2 = cont, np.zeros_like(cont), np.zeros_like(cont)
        Y[m], Z[m], U[m], dK1[m], dK2[m], cont_l[m] = y, z, u, d1, d2, cont
        drv[m] = np.asarray(c.driver(t, cont, z, ua, mu), dtype=float) * np.ones_like(cont)
        lower[m] = c.lower(t, y, mu, st)
        upper[m] = c.upper(t, y, mu, st)
    sol = DRBSDESolution(lattice, Y, Z, U, dK1, dK2, cont_l, drv, lower, upper, flow,
                         reflect=reflect, degrees=degrees)
    if lattice.backend == "paths" and stop == 0 and start > 0:
        # realised path-wise value: its sample mean reproduces the root value
        realised = Y[start] + sum(drv[m] * dt + dK1[m] - dK2[m] for m in range(start))
        sol.meta["root_se"] = float(np.std(realised, axis=-1).max() / math.sqrt(realised.shape[-1]))
    return sol


def solve_frozen(lattice, c, flow: MeasureFlow, *, reflect: bool = True, degree: int = 2,
                 terminal=None) -> DRBSDESolution:
    """Doubly reflected BSDE with the law argument frozen to ``flow``."""
    if len(flow) != lattice.steps + 1:
        raise ValueError(f"flow has {len(flow)} slices, expected {lattice.steps + 1}")
    return backward(lattice, c, flow, terminal, reflect=reflect, degree=degree)


def f_expectation(lattice, c, flow, stop, payoff, degree: int = 2):
    """Conditional f-expectation of a payoff paid at a stopping boundary.

    ``stop[m]`` (boolean, broadcastable to ``(..., size(m))``; ``None`` means
    never) marks the boundary and ``payoff[m]`` the amount paid there. The
    terminal step always pays ``payoff[M]``. Leading batch axes are carried
    through, so many (rule, rule) pairs are evaluated at once. Returns the
    list of per-step values.
    """
    grid = lattice.grid
    M = grid.steps
    X = [None] * (M + 1)
    X[M] = np.asarray(payoff[M], dtype=float)
    for m in range(M - 1, -1, -1):
        t = grid.time(m)
        (mean, z, u), _ = loadings_with_fallback(lattice, X[m + 1], m, degree)
        ua = c.aggregate_u(u, lattice.jumps)
        cont = implicit_driver(mean, t, z, ua, flow[m], c, grid.dt)
        X[m] = cont if stop[m] is None else np.where(stop[m], payoff[m], cont)
    return X


@dataclass(frozen=True)
class EstimateParams:
    """Discount ``beta`` and constant ``eta`` of the a priori estimate."""

    beta: float
    eta: float
    p: float = 2.0

    def check(self, driver_lipschitz: float):
        cf = driver_lipschitz
        if cf > 0 and self.eta > 1.0 / cf ** 2 * (1 + 1e-12):
            raise InvalidParam(f"eta={self.eta} exceeds 1/C^2={1.0 / cf ** 2}")
        if self.beta < 2 * cf + 3.0 / self.eta - 1e-12:
            raise InvalidParam(f"beta={self.beta} below 2C + 3/eta={2 * cf + 3.0 / self.eta}")

    @classmethod
    def for_lipschitz(cls, driver_lipschitz: float, p: float = 2.0) -> "EstimateParams":
        eta = 1.0 / driver_lipschitz ** 2 if driver_lipschitz > 0 else 1.0
        return cls(beta=2 * driver_lipschitz + 3.0 / eta, eta=eta, p=p)


@dataclass
class EstimateReport:
    max_violation: float
    slack_constant: float
    lhs: list
    rhs: list
    margin: float = 0.0
    details: dict = field(default_factory=dict)

    @property
    def holds(self) -> bool:
        return self.max_violation <= 0.0


def _require_tree(lattice):
    if lattice.backend != "tree":
        raise BackendUnsupported("exact estimate checks need the tree backend")


def _future_sum_expectation(lattice, increments, m_from):
    """``E[sum_{k >= m_from} increments[k] | F_{m_from}]`` by backward recursion."""
    M = lattice.steps
    acc = np.zeros(lattice.size(M))
    for k in range(M - 1, m_from - 1, -1):
        acc = lattice.conditional_expectation(acc, k) + increments[k]
    return acc


def check_apriori_estimate(sol1: DRBSDESolution, sol2: DRBSDESolution, c1, c2,
                           ep: EstimateParams) -> EstimateReport:
    """Evaluate both sides of the Lp a priori estimate for unreflected solutions.

    ``delta f_s = f1(s, Y2, Z2, U2) - f2(s, Y2, Z2, U2)``; the quadratic
    variation integral is the left Riemann sum over the grid. Returns the
    largest node-wise excess of the left side together with
    ``slack_constant = max(excess, 0) / dt``.
    """
    lat = sol1.lattice
    _require_tree(lat)
    if sol2.lattice is not lat:
        raise ValueError("solutions must live on the same lattice")
    grid = lat.grid
    M, dt, p, beta, eta = grid.steps, grid.dt, ep.p, ep.beta, ep.eta
    times = grid.times
    df = []
    for m in range(M):
        t = times[m]
        ua = c2.aggregate_u(sol2.U[m], lat.jumps)
        args = (t, sol2.cont[m], sol2.Z[m], ua, sol2.flow[m])
        df.append(np.asarray(c1.driver(*args) - c2.driver(*args)) * np.ones(lat.size(m)))
    dxi = sol1.Y[M] - sol2.Y[M]
    term = np.abs(math.exp(beta * grid.horizon) * dxi) ** p
    const = 2.0 ** (p / 2 - 1)
    lhs, rhs = [], []
    worst = -np.inf
    for m in range(M + 1):
        left = np.abs(math.exp(beta * times[m]) * (sol1.Y[m] - sol2.Y[m])) ** p
        # (sum_{k >= m} e^{2 beta t_k} df_k^2 dt)^{p/2}, path by path, then conditioned
        tail = np.zeros(lat.size(m))
        for k in range(m, M):
            tail = lat.expand(tail + math.exp(2 * beta * times[k]) * df[k] ** 2 * dt, k)
        e_term, e_qv = term, tail ** (p / 2)
        for k in range(M - 1, m - 1, -1):
            e_term = lat.conditional_expectation(e_term, k)
            e_qv = lat.conditional_expectation(e_qv, k)
        right = const * (e_term + eta ** p * e_qv)
        lhs.append(left)
        rhs.append(right)
        worst = max(worst, float(np.max(left - right)))
    return EstimateReport(worst, max(worst, 0.0) / dt, lhs, rhs,
                          margin=float(min(np.min(r - l) for l, r in zip(lhs, rhs))))


def obstacle_supermartingales(lattice, cap_values):
    """Nonnegative supermartingales ``theta1, theta2`` with ``theta1 - theta2 = cap``.

    Built from the Doob-type decomposition of the cap process: with drift
    increments ``D_k = E[X_{k+1} | F_k] - X_k``,
    ``theta1_m = E[X_M^+ + sum_{k >= m} D_k^- | F_m]`` and
    ``theta2_m = E[X_M^- + sum_{k >= m} D_k^+ | F_m]``.
    """
    M = lattice.steps
    th1, th2 = [None] * (M + 1), [None] * (M + 1)
    th1[M] = np.maximum(cap_values[M], 0.0)
    th2[M] = np.maximum(-cap_values[M], 0.0)
    for m in range(M - 1, -1, -1):
        drift = lattice.conditional_expectation(cap_values[m + 1], m) - cap_values[m]
        th1[m] = lattice.conditional_expectation(th1[m + 1], m) + np.maximum(-drift, 0.0)
        th2[m] = lattice.conditional_expectation(th2[m + 1], m) + np.maximum(drift, 0.0)
    return th1, th2


def check_k_bound(sol: DRBSDESolution, c, flow=None) -> EstimateReport:
    """Compare ``E[(K^i_T)^p]`` with ``p^p E[sup_t Theta_i^p]`` on the tree.

    ``Theta_1 = (theta1 + E[xi^- | F_t]) 1{t < T} + E[sum_{s >= t} f_s^- dt | F_t]``
    and symmetrically for ``Theta_2`` with ``theta2``, ``xi^+`` and ``f^+``,
    where ``f_s`` is the realised driver along the solution.
    """
    lat = sol.lattice
    _require_tree(lat)
    grid = lat.grid
    M, dt, p = grid.steps, grid.dt, c.p
    cap = [np.asarray(c.cap(grid.time(m), lat.state(m)), dtype=float) for m in range(M + 1)]
    th1, th2 = obstacle_supermartingales(lat, cap)
    xi = sol.Y[M]
    out = {}
    for label, th, xi_part, f_part, k_T in (
        ("K1", th1, np.maximum(-xi, 0.0), [np.maximum(-f, 0.0) * dt for f in sol.driver_values], sol.K1[M]),
        ("K2", th2, np.maximum(xi, 0.0), [np.maximum(f, 0.0) * dt for f in sol.driver_values], sol.K2[M]),
    ):
        running = None
        for m in range(M + 1):
            e_xi = xi_part
            for k in range(M - 1, m - 1, -1):
                e_xi = lat.conditional_expectation(e_xi, k)
            theta = (th[m] + e_xi if m < M else 0.0) + _future_sum_expectation(lat, f_part, m)
            theta = np.asarray(theta) * np.ones(lat.size(m))
            running = theta if running is None else np.maximum(lat.expand(running, m - 1), theta)
        lhs = lat.leaf_expectation(np.abs(k_T) ** p)
        rhs = p ** p * lat.leaf_expectation(np.abs(running) ** p)
        out[label] = (lhs, rhs)
    margin = min(r - l for l, r in out.values())
    return EstimateReport(max(l - r for l, r in out.values()), 0.0,
                          [out["K1"][0], out["K2"][0]], [out["K1"][1], out["K2"][1]],
                          margin=margin, details={"theta_nonnegative": bool(
                              min(float(np.min(a)) for a in th1 + th2) >= -1e-14)})
