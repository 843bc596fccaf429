"""Interacting n-particle system coupled through its empirical measure.

Each particle is driven by its own independent noise copy, drawn on a path
ensemble. Scenario ``k`` of every particle's ensemble is read jointly, so the
empirical measure ``L_n`` at step ``m`` is a batch of measures, one per
scenario, built from the ``n`` particle values on that scenario.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .drbsde import DRBSDESolution, clamp_implicit, implicit_driver, solve_frozen
from .errors import InvalidParam, InvalidTerminal, NoConvergence, TooLarge
from .lattice import JumpSpec, TimeGrid, joint_tree, sample_paths
from .measures import Measure, MeasureFlow
from .meanfield import FixedPointConfig

SANDWICH_TOL = 1e-12


def particle_noise(grid: TimeGrid, jumps: JumpSpec | None, n_paths: int, seed: int, i: int):
    """Noise copy of particle ``i``: its own child of the root seed sequence."""
    return sample_paths(grid, jumps, n_paths, np.random.SeedSequence(int(seed), spawn_key=(int(i),)))


def empirical_flow(values_per_particle, steps: int) -> MeasureFlow:
    """Scenario-wise ``L_n``: slice ``m`` has batch shape ``(n_paths,)`` and ``n`` atoms."""
    return MeasureFlow(Measure(np.stack([np.broadcast_to(v[m], np.shape(values_per_particle[0][-1]))
                                         for v in values_per_particle], axis=-1))
                       for m in range(steps + 1))


@dataclass
class ParticleSystemSolution:
    """Per-particle DRBSDE solutions against the converged empirical flow."""

    n: int
    solutions: list
    flow: MeasureFlow
    noises: list
    terminals: list
    iterations: int
    residuals: list
    seed: int | None = None
    meta: dict = field(default_factory=dict)

    @property
    def Y(self):
        return [s.Y for s in self.solutions]

    @property
    def root_values(self) -> np.ndarray:
        return np.array([s.root_value for s in self.solutions])

    def root_standard_errors(self) -> np.ndarray:
        return np.array([s.meta.get("root_se", 0.0) for s in self.solutions])

    def residual_summary(self) -> dict:
        """Worst structural residual over particles."""
        out = {}
        for s in self.solutions:
            for k, v in s.residuals().items():
                out[k] = max(out.get(k, 0.0), v)
        return out

    def to_dict(self) -> dict:
        M = self.solutions[0].steps
        return {
            "n": self.n,
            "iterations": self.iterations,
            "residuals": list(map(float, self.residuals)),
            "root_values": self.root_values.tolist(),
            "root_standard_errors": self.root_standard_errors().tolist(),
            "expected_K1_T": [float(np.mean(s.K1[M])) for s in self.solutions],
            "expected_K2_T": [float(np.mean(s.K2[M])) for s in self.solutions],
            "invariant_residuals": self.residual_summary(),
            "seed": self.seed,
            **self.meta,
        }

    def to_json(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    def to_csv(self, path):
        """One row per particle: root value, its standard error and K totals."""
        M = self.solutions[0].steps
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["particle", "Y0", "Y0_se", "K1_T", "K2_T"])
            for i, s in enumerate(self.solutions):
                w.writerow([i, repr(s.root_value), repr(float(s.meta.get("root_se", 0.0))),
                            repr(float(np.mean(s.K1[M]))), repr(float(np.mean(s.K2[M])))])


def _check_terminals(c, noises, terminals, grid):
    M = grid.steps
    T = grid.time(M)
    mu = Measure(np.stack(terminals, axis=-1))
    for i, (ens, xi) in enumerate(zip(noises, terminals)):
        st = ens.state(M)
        lo = c.lower(T, xi, mu, st)
        hi = c.upper(T, xi, mu, st)
        bad = float(np.max(np.maximum(lo - xi, xi - hi)))
        if bad > SANDWICH_TOL:
            raise InvalidTerminal(f"terminal of particle {i} leaves [h1, h2] by {bad:.3e}")


def solve_particle_system(n: int, grid: TimeGrid, jumps: JumpSpec | None, c, terminal_sampler=None,
                          seed: int = 0, cfg: FixedPointConfig = FixedPointConfig(),
                          n_paths: int = 256, degree: int | None = None, noises=None,
                          terminals=None, conditioning: str = "own") -> ParticleSystemSolution:
    """Outer Picard iteration on the scenario-wise empirical flow.

    The flow is frozen, every particle solves its own DRBSDE by regression on
    its own path state, and the flow is rebuilt from the new values. Particles
    are independent given the flow, so the result does not depend on the order
    in which they are solved.

    Parameters
    ----------
    terminal_sampler
        ``terminal_sampler(i, ensemble) -> values``; defaults to the terminal
        map of ``c`` on particle ``i``'s own noise.
    noises, terminals
        Explicit noise ensembles and terminal values (used for relabelling
        checks and for coupling with other experiments).
    conditioning
        ``"own"`` regresses on the particle's own path state; ``"joint"``
        also uses the other particles' states (exact in the limit of many
        paths, but the basis grows quickly with ``n``).
    """
    if int(n) != n or n < 1:
        raise InvalidParam(f"particle count must be a positive integer, got {n}")
    jumps = jumps or JumpSpec()
    degree = cfg.degree if degree is None else degree
    M = grid.steps
    if noises is None:
        noises = [particle_noise(grid, jumps, n_paths, seed, i) for i in range(n)]
    if len(noises) != n:
        raise InvalidParam(f"{len(noises)} noise copies for {n} particles")
    if terminals is None:
        sampler = terminal_sampler or (lambda i, ens: c.terminal(ens.state(M)))
        terminals = [np.asarray(sampler(i, ens), dtype=float) for i, ens in enumerate(noises)]
    terminals = [np.asarray(x, dtype=float) for x in terminals]
    _check_terminals(c, noises, terminals, grid)
    if conditioning == "joint":
        views = [ens.conditioned_on([o for j, o in enumerate(noises) if j != i])
                 for i, ens in enumerate(noises)]
    elif conditioning == "own":
        views = noises
    else:
        raise InvalidParam(f"unknown conditioning {conditioning!r}")
    N = noises[0].size(0)
    V = [[np.full(N, float(cfg.init)) for _ in range(M)] + [xi] for xi in terminals]
    flow = empirical_flow(V, M)
    residuals = []
    max_iter = cfg.max_iter if c.law_dependent else 1
    for k in range(1, max_iter + 1):
        sols = [solve_frozen(ens, c, flow, degree=degree, terminal=xi)
                for ens, xi in zip(views, terminals)]
        if not c.law_dependent:
            residuals.append(0.0)
            break
        V = [[cfg.damping * y + (1.0 - cfg.damping) * v if cfg.damping < 1.0 else y
              for v, y in zip(vs, s.Y)] for vs, s in zip(V, sols)]
        new_flow = empirical_flow(V, M)
        r = new_flow.distance(flow, c.p)
        residuals.append(r)
        if r <= cfg.tol:
            break
        flow = new_flow
    else:
        raise NoConvergence(f"particle system did not converge in {cfg.max_iter} iterations "
                            f"(last residual {residuals[-1]:.3e})", residuals)
    return ParticleSystemSolution(n, sols, flow, noises, terminals, len(residuals), residuals, seed,
                                  meta={"conditioning": conditioning, "degree": degree})


@dataclass
class ExchangeabilityReport:
    permutation: list
    exact: bool
    max_abs_diff: float

    def to_dict(self) -> dict:
        return {"permutation": self.permutation, "exact": self.exact, "max_abs_diff": self.max_abs_diff}


def _fields(sol: DRBSDESolution):
    return [sol.Y, sol.Z, sol.U, sol.dK1, sol.dK2]


def exchangeability_check(n: int, grid, jumps, c, permutation, seed: int = 0,
                          cfg: FixedPointConfig = FixedPointConfig(), n_paths: int = 256,
                          terminal_sampler=None, base: ParticleSystemSolution | None = None
                          ) -> ExchangeabilityReport:
    """Solve with relabelled noise copies and terminals and compare bit for bit.

    Particle ``i`` of the relabelled run receives the inputs of particle
    ``permutation[i]``; its solution must equal that particle's solution in
    the base run exactly.
    """
    perm = [int(j) for j in permutation]
    if sorted(perm) != list(range(n)):
        raise InvalidParam(f"{perm} is not a permutation of range({n})")
    if base is None:
        base = solve_particle_system(n, grid, jumps, c, terminal_sampler, seed, cfg, n_paths)
    other = solve_particle_system(n, grid, jumps, c, seed=seed, cfg=cfg, n_paths=n_paths,
                                  noises=[base.noises[j] for j in perm],
                                  terminals=[base.terminals[j] for j in perm])
    exact, worst = True, 0.0
    for i, j in enumerate(perm):
        for a_list, b_list in zip(_fields(other.solutions[i]), _fields(base.solutions[j])):
            for a, b in zip(a_list, b_list):
                a, b = np.asarray(a), np.asarray(b)
                if not np.array_equal(a, b):
                    exact = False
                    worst = max(worst, float(np.max(np.abs(a - b))))
    return ExchangeabilityReport(perm, exact, worst)


def particle_saddles(sol: ParticleSystemSolution, c, n_samples: int = 64, seed: int = 0,
                     se_multiple: float = 2.0):
    """Hitting-time rules per particle and their sampled-deviation reports.

    Obstacles are evaluated at ``(Y^i, L_n)``. Returns ``(rules, reports)``
    where ``rules[i] = (tau_i, sigma_i)``.
    """
    from .game import extract_saddle, verify_saddle_paths

    rules, reports = [], []
    for i, (s, ens) in enumerate(zip(sol.solutions, sol.noises)):
        rules.append(extract_saddle(s))
        reports.append(verify_saddle_paths(s, c, sol.flow, ens, n_samples=n_samples,
                                           seed=seed + 2 * i, se_multiple=se_multiple))
    return rules, reports


@dataclass
class JointTreeResult:
    """Exact coupled solution on the product tree of the particles' noises."""

    views: list
    Y: list
    flow: MeasureFlow
    solutions: list
    node_iterations: int
    games: list = field(default_factory=list)
    saddles: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def root_values(self) -> np.ndarray:
        return np.array([float(y[0][0]) for y in self.Y])

    def to_dict(self) -> dict:
        out = {"root_values": self.root_values.tolist(), "node_iterations": self.node_iterations,
               **self.meta}
        out["games"] = [g.to_dict() if hasattr(g, "to_dict") else g for g in self.games]
        out["saddles"] = [s.to_dict() for s in self.saddles]
        return out


def joint_tree_oracle(n: int, grid: TimeGrid, jumps: JumpSpec | None, c, terminal_map=None,
                      damping: float = 0.5, tol: float = 1e-14, max_iter: int = 10_000,
                      game: bool = True) -> JointTreeResult:
    """Exact backward induction of the interacting system on the product tree.

    At every joint node the ``n`` particle values solve a coupled system (each
    particle's implicit driver and clamp see the empirical measure of all
    current values), found by a damped fixed point. With ``game`` set, each
    particle's Dynkin game against the converged empirical flow is enumerated
    over all stopping times of the joint filtration (depth 2 at most for two
    particles) and its hitting-time saddle is checked exhaustively.
    """
    if n < 1 or n > 2:
        raise TooLarge("the joint-tree oracle handles at most two particles")
    if grid.steps > 3:
        raise TooLarge("the joint-tree oracle handles at most three steps")
    if not 0 < damping <= 1:
        raise InvalidParam("damping must lie in (0, 1]")
    jumps = jumps or JumpSpec()
    if terminal_map is not None:
        c = c.with_updates(terminal=terminal_map)
    views = [joint_tree(grid, jumps, n, i) for i in range(n)]
    M = grid.steps
    Y = [[None] * (M + 1) for _ in range(n)]
    for i, v in enumerate(views):
        Y[i][M] = np.asarray(c.terminal(v.state(M)), dtype=float)
    slices = [None] * (M + 1)
    slices[M] = Measure(np.stack([Y[i][M] for i in range(n)], axis=-1))
    worst_iter = 0
    for m in range(M - 1, -1, -1):
        t = grid.time(m)
        loads = []
        for i, v in enumerate(views):
            mean, z, u = v.loadings(Y[i][m + 1], m)
            loads.append((mean, z, c.aggregate_u(u, jumps), v.state(m)))
        y = [ld[0].copy() for ld in loads]
        for it in range(1, max_iter + 1):
            mu = Measure(np.stack(y, axis=-1))
            new = []
            for mean, z, ua, st in loads:
                cont = implicit_driver(mean, t, z, ua, mu, c, grid.dt)
                new.append(clamp_implicit(cont, t, mu, c, st)[0])
            step = max(float(np.max(np.abs(a - b))) for a, b in zip(new, y))
            y = [b + damping * (a - b) for a, b in zip(new, y)]
            if step <= tol:
                break
        else:
            raise NoConvergence(f"joint node system at step {m} did not settle (step {step:.3e})")
        worst_iter = max(worst_iter, it)
        for i in range(n):
            Y[i][m] = y[i]
        slices[m] = Measure(np.stack(y, axis=-1))
    flow = MeasureFlow(slices)
    sols = [solve_frozen(v, c, flow, terminal=Y[i][M]) for i, v in enumerate(views)]
    consistency = max(float(np.max(np.abs(a - b))) for i, s in enumerate(sols)
                      for a, b in zip(s.Y, Y[i]))
    result = JointTreeResult(views, Y, flow, sols, worst_iter,
                             meta={"frozen_consistency": consistency, "n": n, "steps": M})
    if game:
        from .game import brute_force_values, extract_saddle, verify_saddle

        for i, (v, s) in enumerate(zip(views, sols)):
            try:
                g = brute_force_values(c, flow, v)
            except TooLarge as exc:
                result.games.append({"skipped": str(exc)})
                continue
            result.games.append(g)
            tau, sigma = extract_saddle(s)
            result.saddles.append(verify_saddle(tau, sigma, c, flow, v, value=s.Y, mode="exhaustive"))
        gaps = [max(abs(g.upper_value - y0), abs(g.lower_value - y0))
                for g, y0 in zip(result.games, result.root_values) if not isinstance(g, dict)]
        result.meta["game_gap"] = max(gaps) if gaps else None
    return result
