"""Mean-field fixed point: solve the frozen-law DRBSDE, update the law, repeat."""
from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .drbsde import backward, solve_frozen
from .errors import InvalidParam, NoConvergence
from .measures import MeasureFlow


def check_contraction_condition(gamma1, gamma2, kappa1, kappa2, p=2.0):
    """Existence condition on the obstacle Lipschitz constants.

    Returns ``(lhs, threshold, ok)`` with ``lhs = sum of p-th powers``,
    ``threshold = 2^(3 - 5p/2)`` and strict comparison.
    """
    consts = (gamma1, gamma2, kappa1, kappa2)
    if min(consts) < 0 or p < 2:
        raise InvalidParam("constants must be >= 0 and p >= 2")
    lhs = float(sum(x ** p for x in consts))
    threshold = 2.0 ** (3.0 - 2.5 * p)
    return lhs, threshold, lhs < threshold


def check_chaos_condition(gamma1, gamma2, kappa1, kappa2, p=2.0):
    """Smallness condition for propagation of chaos: ``2^(p/2-1) 7^(p-1) sum < 1``."""
    consts = (gamma1, gamma2, kappa1, kappa2)
    if min(consts) < 0 or p < 2:
        raise InvalidParam("constants must be >= 0 and p >= 2")
    lhs = 2.0 ** (p / 2 - 1) * 7.0 ** (p - 1) * sum(x ** p for x in consts)
    return float(lhs), lhs < 1.0


@dataclass(frozen=True)
class FixedPointConfig:
    tol: float = 1e-10
    max_iter: int = 200
    mode: str = "global"
    window: float | None = None
    damping: float = 1.0
    degree: int = 2
    init: float = 0.0

    def __post_init__(self):
        if not self.tol > 0:
            raise InvalidParam("tol must be positive")
        if self.max_iter < 1:
            raise InvalidParam("max_iter must be >= 1")
        if self.mode not in ("global", "windowed"):
            raise InvalidParam(f"unknown mode {self.mode!r}")
        if self.mode == "windowed" and not (self.window and self.window > 0):
            raise InvalidParam("windowed mode needs a positive window")
        if not 0 < self.damping <= 1:
            raise InvalidParam("damping must lie in (0, 1]")


@dataclass
class MeanFieldSolution:
    flow: MeasureFlow
    sol: object
    iterations: int
    residuals: list
    mode: str = "global"
    damping: float = 1.0
    windows: list = field(default_factory=list)

    @property
    def root_value(self) -> float:
        return self.sol.root_value

    @property
    def final_residual(self) -> float:
        return self.residuals[-1] if self.residuals else 0.0

    def to_dict(self) -> dict:
        out = {
            "root_value": self.root_value,
            "iterations": self.iterations,
            "residuals": list(map(float, self.residuals)),
            "mode": self.mode,
            "damping": self.damping,
            "damped": self.damping < 1.0,
            "windows": self.windows,
            "flow_means": self.flow.means().tolist(),
            "solution": self.sol.summary(),
        }
        return out

    def to_json(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    def flows_to_csv(self, path, quantiles=None):
        """Quantile grid of each flow slice, one row per step."""
        q = np.linspace(0.0, 1.0, 11) if quantiles is None else np.asarray(quantiles)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "mean"] + [f"q{x:.2f}" for x in q])
            for m, s in enumerate(self.flow):
                w.writerow([m, repr(float(np.mean(s.mean())))] + [repr(float(v)) for v in s.quantile(q)])


def apply_psi(lattice, c, flow_in: MeasureFlow, degree: int = 2):
    """One application of the law-update map; returns ``(flow_out, solution)``."""
    sol = solve_frozen(lattice, c, flow_in, degree=degree)
    return MeasureFlow.from_values(lattice, sol.Y), sol


def _initial_values(lattice, init):
    return [np.full(lattice.size(m), float(init)) for m in range(lattice.steps + 1)]


def _damp(old, new, d):
    return new if d == 1.0 else (1.0 - d) * old + d * new


def fixed_point(lattice, c, cfg: FixedPointConfig = FixedPointConfig()) -> MeanFieldSolution:
    """Picard iteration on the law flow, globally or window by window.

    The iterate is a value process on the lattice; its marginal laws form the
    flow fed to the frozen solver. The residual is ``max_m W_p`` between
    consecutive flows.
    """
    lhs, thr, ok = check_contraction_condition(*c.lipschitz.obstacle_constants, c.p)
    if not ok:
        warnings.warn(f"contraction condition fails ({lhs:.4g} >= {thr:.4g}); "
                      "convergence is not guaranteed", RuntimeWarning)
    if not c.law_dependent:
        flow0 = MeasureFlow.from_values(lattice, _initial_values(lattice, cfg.init))
        sol = solve_frozen(lattice, c, flow0, degree=cfg.degree)
        flow = MeasureFlow.from_values(lattice, sol.Y)
        sol.flow = flow
        return MeanFieldSolution(flow, sol, 1, [0.0], cfg.mode, cfg.damping)
    if cfg.mode == "global":
        return _global(lattice, c, cfg)
    return _windowed(lattice, c, cfg)


def _global(lattice, c, cfg):
    V = _initial_values(lattice, cfg.init)
    flow = MeasureFlow.from_values(lattice, V)
    residuals = []
    for k in range(1, cfg.max_iter + 1):
        sol = solve_frozen(lattice, c, flow, degree=cfg.degree)
        V = [_damp(v, y, cfg.damping) for v, y in zip(V, sol.Y)]
        new_flow = MeasureFlow.from_values(lattice, V)
        r = new_flow.distance(flow, c.p)
        residuals.append(r)
        if r <= cfg.tol:
            return MeanFieldSolution(flow, sol, k, residuals, "global", cfg.damping)
        flow = new_flow
    raise NoConvergence(f"no convergence in {cfg.max_iter} iterations "
                        f"(last residual {residuals[-1]:.3e})", residuals)


def window_bounds(steps: int, dt: float, window: float):
    """Windows ``[a, e]`` in step units, last one first."""
    w = max(1, int(round(window / dt)))
    out, e = [], steps
    while e > 0:
        out.append((max(0, e - w), e))
        e -= w
    return out


def _windowed(lattice, c, cfg):
    M = lattice.steps
    V = _initial_values(lattice, cfg.init)
    residuals, windows = [], []
    xi = np.asarray(c.terminal(lattice.state(M)), dtype=float)
    for a, e in window_bounds(M, lattice.dt, cfg.window):
        terminal = xi if e == M else V[e]
        flow = MeasureFlow.from_values(lattice, V)
        for k in range(1, cfg.max_iter + 1):
            part = backward(lattice, c, flow, terminal, start=e, stop=a, degree=cfg.degree)
            for m in range(a, e + 1):
                V[m] = _damp(V[m], part.Y[m], cfg.damping)
            new_flow = MeasureFlow.from_values(lattice, V)
            r = new_flow.distance(flow, c.p, steps=range(a, e + 1))
            residuals.append(r)
            flow = new_flow
            if r <= cfg.tol:
                windows.append({"start": a, "end": e, "iterations": k})
                break
        else:
            raise NoConvergence(f"window [{a}, {e}] did not converge "
                                f"(last residual {residuals[-1]:.3e})", residuals)
    flow = MeasureFlow.from_values(lattice, V)
    sol = solve_frozen(lattice, c, flow, degree=cfg.degree)
    return MeanFieldSolution(flow, sol, sum(w["iterations"] for w in windows), residuals,
                             "windowed", cfg.damping, windows)


def observed_ratios(residuals, last: int = 5):
    """Consecutive residual ratios over the final ``last`` iterations."""
    r = np.asarray(residuals[-(last + 1):], dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        return r[1:] / r[:-1]


def mean_field_value_and_saddle(lattice, c, cfg: FixedPointConfig = FixedPointConfig(),
                                n_samples: int = 256, seed: int = 0):
    """Converged solution, hitting-time saddle rules and their verification.

    On trees the saddle is verified exhaustively when the stopping rules can
    be enumerated (sampled deviations otherwise) and the report carries the
    brute-force upper/lower values at the converged flow when the tree is
    small enough. On path ensembles deviations are sampled and judged
    against Monte Carlo standard errors.
    """
    from .errors import TooLarge
    from .game import brute_force_values, extract_saddle, verify_saddle, verify_saddle_paths

    mf = fixed_point(lattice, c, cfg)
    tau, sigma = extract_saddle(mf.sol, c, mf.flow)
    report = {"root_value": mf.root_value, "iterations": mf.iterations,
              "final_residual": mf.final_residual}
    if lattice.backend == "tree":
        rep = verify_saddle(tau, sigma, c, mf.flow, lattice, value=mf.sol.Y,
                            n_samples=n_samples, seed=seed)
        report["saddle"] = rep.to_dict()
        try:
            g = brute_force_values(c, mf.flow, lattice)
            report["brute_force"] = {"upper": g.upper_value, "lower": g.lower_value,
                                     "gap_to_solution": abs(g.upper_value - mf.root_value),
                                     "picard_iterations": g.picard_iterations}
        except TooLarge as exc:
            report["brute_force"] = {"skipped": str(exc)}
    else:
        rep = verify_saddle_paths(mf.sol, c, mf.flow, lattice, n_samples=n_samples, seed=seed)
        report["saddle"] = rep.to_dict()
    return mf, tau, sigma, report
