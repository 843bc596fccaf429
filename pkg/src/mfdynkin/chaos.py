"""Propagation-of-chaos experiments.

The interacting particles are compared with i.i.d. copies of the mean-field
solution driven by the same noise: each copy solves the frozen-law DRBSDE
against a reference mean-field flow computed on a much larger ensemble.
"""
from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.stats import ks_2samp

from .drbsde import backward
from .errors import InvalidParam
from .lattice import JumpSpec, TimeGrid, sample_paths
from .measures import Measure, wasserstein_pp
from .meanfield import FixedPointConfig, MeanFieldSolution, check_chaos_condition, fixed_point
from .particles import empirical_flow, solve_particle_system

METRICS = ("G", "W_iid", "W_particles", "W_component")


def reference_solution(c, grid: TimeGrid, jumps: JumpSpec | None, n_ref: int, ref_seed: int,
                       cfg: FixedPointConfig = FixedPointConfig()) -> MeanFieldSolution:
    """Mean-field fixed point on an ensemble of ``n_ref`` paths (the reference law)."""
    return fixed_point(sample_paths(grid, jumps, n_ref, ref_seed), c, cfg)


def iid_copies(mean_field: MeanFieldSolution, noises, c, terminals=None, degree: int = 2):
    """Frozen-law solutions against the mean-field flow, one per noise copy.

    ``noises[i]`` is the ensemble used by particle ``i`` in the interacting
    run, so copy ``i`` and particle ``i`` share their driving noise.
    """
    M = noises[0].steps
    if terminals is None:
        terminals = [c.terminal(ens.state(M)) for ens in noises]
    return [backward(ens, c, mean_field.flow, np.asarray(xi, dtype=float), degree=degree)
            for ens, xi in zip(noises, terminals)]


def _full(v, n_paths):
    return np.broadcast_to(np.asarray(v, dtype=float), (n_paths,))


def lln_experiment(mean_field: MeanFieldSolution, n_grid, seeds, p: float = 2.0):
    """Seed-averaged ``max_m W_p^p(L_n, reference slice)`` for ``n`` reference draws.

    Copies are drawn without replacement from the reference ensemble (with
    replacement once ``n`` exceeds it). Returns rows
    ``{"n", "estimate", "se", "per_seed"}``.
    """
    sol = mean_field.sol
    M = sol.steps
    n_ref = mean_field.flow[M].size
    values = np.stack([_full(y, n_ref) for y in sol.Y])
    rows = []
    for n in n_grid:
        per_seed = []
        for s in seeds:
            rng = np.random.default_rng(np.random.SeedSequence(int(s), spawn_key=(int(n),)))
            idx = rng.choice(n_ref, size=int(n), replace=int(n) > n_ref)
            per_seed.append(max(float(wasserstein_pp(Measure(values[m, idx]), mean_field.flow[m], p))
                                for m in range(M + 1)))
        per_seed = np.array(per_seed)
        se = float(per_seed.std(ddof=1) / math.sqrt(len(per_seed))) if len(per_seed) > 1 else 0.0
        rows.append({"n": int(n), "estimate": float(per_seed.mean()), "se": se,
                     "per_seed": per_seed.tolist()})
    return rows


def joint_w2(a1, a2, b1, b2) -> float:
    """``W_2`` between two equal-size 2-D empirical measures by optimal assignment."""
    P = np.stack([a1, a2], axis=1)
    Q = np.stack([b1, b2], axis=1)
    cost = ((P[:, None, :] - Q[None, :, :]) ** 2).sum(axis=-1)
    r, k = linear_sum_assignment(cost)
    return float(math.sqrt(cost[r, k].mean()))


@dataclass
class ChaosReport:
    n_grid: list
    seeds: list
    n_paths: int
    n_ref: int
    degree: int
    p: float
    rows: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def series(self, metric: str):
        """``(values, standard errors)`` of a metric along the n-grid."""
        v = np.array([self.summary[n][metric] for n in self.n_grid])
        se = np.array([self.summary[n][metric + "_se"] for n in self.n_grid])
        return v, se

    def trend(self, metric: str, se_multiple: float = 2.0, final_ratio: float = 0.5) -> dict:
        """Non-increasing up to ``se_multiple`` SE, and final <= ``final_ratio`` * initial."""
        v, se = self.series(metric)
        slack = se_multiple * np.sqrt(se[1:] ** 2 + se[:-1] ** 2)
        monotone = bool(np.all(v[1:] <= v[:-1] + slack))
        decay = bool(v[-1] <= final_ratio * v[0])
        return {"metric": metric, "values": v.tolist(), "se": se.tolist(),
                "non_increasing": monotone, "final_ratio": float(v[-1] / v[0]) if v[0] else 0.0,
                "decays": decay, "passed": monotone and decay}

    def to_dict(self) -> dict:
        return {"n_grid": self.n_grid, "seeds": self.seeds, "n_paths": self.n_paths,
                "n_ref": self.n_ref, "degree": self.degree, "p": self.p,
                "summary": {str(n): v for n, v in self.summary.items()},
                "trends": {m: self.trend(m) for m in ("G", "W_iid", "W_particles")},
                **self.meta}

    def to_json(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    def to_csv(self, path):
        """Long format ``n, seed, step, metric, value``; ``step = max`` holds the maximum over steps."""
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["n", "seed", "step", "metric", "value"])
            for r in self.rows:
                w.writerow([r[0], r[1], r[2], r[3], repr(float(r[4]))])

    def plot_csv(self, path):
        """Seed-averaged metrics against ``n`` with log10 columns for log-log plots."""
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["n", "metric", "value", "se", "log10_n", "log10_value"])
            for n in self.n_grid:
                for m in METRICS + ("joint_W2",):
                    v = self.summary[n][m]
                    if v is None:
                        continue
                    lv = math.log10(v) if v > 0 else float("-inf")
                    w.writerow([n, m, repr(float(v)), repr(float(self.summary[n][m + "_se"])),
                                repr(math.log10(n)), repr(lv)])


def _se(samples_per_seed):
    """Standard error of a seed average, pooling the samples within each seed."""
    S = len(samples_per_seed)
    var = sum(float(np.var(x)) / x.size for x in samples_per_seed)
    return math.sqrt(var) / S


def chaos_gap_experiment(n_grid, c, grid: TimeGrid, jumps: JumpSpec | None = None,
                         cfg: FixedPointConfig = FixedPointConfig(), seeds=(0,), n_paths: int = 256,
                         n_ref: int | None = None, ref_seed: int = 10_000, degree: int | None = None,
                         mean_field: MeanFieldSolution | None = None) -> ChaosReport:
    """Particle system versus i.i.d. mean-field copies on shared noise, for each ``n``.

    Metrics per ``(n, seed)``, each maximised over grid steps:

    * ``G``: mean over particles and scenarios of ``|Y^{i,n} - Y^i|^p``;
    * ``W_iid``: scenario mean of ``max_m W_p^p`` between the empirical law
      of the copies and the reference flow (``W_particles`` uses the
      interacting particles instead);
    * ``W_component``: mean ``|W^{i,n} - W^i|^p`` with ``W = K1 - K2``;
    * ``joint_W2``: ``W_2`` between the scenario samples of
      ``(Y^{1,n}, Y^{2,n})`` and ``(Y^1, Y^2)`` over steps ``>= 1``.
    """
    n_grid = [int(n) for n in n_grid]
    seeds = [int(s) for s in seeds]
    if not n_grid or min(n_grid) < 1:
        raise InvalidParam("n_grid must hold positive particle counts")
    p = c.p
    degree = cfg.degree if degree is None else degree
    n_ref = 8 * max(n_grid) if n_ref is None else int(n_ref)
    if n_ref < 8 * max(n_grid):
        raise InvalidParam(f"reference size {n_ref} must be at least 8 x max n = {8 * max(n_grid)}")
    lhs, ok = check_chaos_condition(*c.lipschitz.obstacle_constants, p)
    if not ok:
        warnings.warn(f"chaos smallness condition fails ({lhs:.4g} >= 1); results are exploratory",
                      RuntimeWarning)
    if mean_field is None:
        mean_field = reference_solution(c, grid, jumps, n_ref, ref_seed, cfg)
    M = grid.steps
    rows, summary = [], {}
    for n in n_grid:
        acc = {m: [] for m in METRICS}
        samples = {m: [] for m in METRICS}
        j2, ks, iters = [], [], []
        for s in seeds:
            ps = solve_particle_system(n, grid, jumps, c, seed=s, cfg=cfg, n_paths=n_paths,
                                       degree=degree)
            iters.append(ps.iterations)
            copies = iid_copies(mean_field, ps.noises, c, ps.terminals, degree)
            N = ps.noises[0].size(0)
            Yp = np.stack([[_full(y, N) for y in sol.Y] for sol in ps.solutions])  # (n, M+1, N)
            Yi = np.stack([[_full(y, N) for y in sol.Y] for sol in copies])
            Wp = np.stack([np.stack(sol.W) for sol in ps.solutions])
            Wi = np.stack([np.stack(sol.W) for sol in copies])
            dy = np.abs(Yp - Yi) ** p
            dw = np.abs(Wp - Wi) ** p
            fl_p = empirical_flow([list(y) for y in Yp], M)
            fl_i = empirical_flow([list(y) for y in Yi], M)
            w_i = np.stack([wasserstein_pp(fl_i[m], mean_field.flow[m], p) for m in range(M + 1)])
            w_p = np.stack([wasserstein_pp(fl_p[m], mean_field.flow[m], p) for m in range(M + 1)])
            per_step = {"G": dy.mean(axis=(0, 2)), "W_component": dw.mean(axis=(0, 2)),
                        "W_iid": w_i.mean(axis=1), "W_particles": w_p.mean(axis=1)}
            for metric, vals in per_step.items():
                for m in range(M + 1):
                    rows.append((n, s, m, metric, vals[m]))
            sup_i, sup_p = w_i.max(axis=0), w_p.max(axis=0)
            stat = {"G": float(per_step["G"].max()), "W_component": float(per_step["W_component"].max()),
                    "W_iid": float(sup_i.mean()), "W_particles": float(sup_p.mean())}
            samples["G"].append(dy[:, int(np.argmax(per_step["G"]))].ravel())
            samples["W_component"].append(dw[:, int(np.argmax(per_step["W_component"]))].ravel())
            samples["W_iid"].append(sup_i)
            samples["W_particles"].append(sup_p)
            for metric, v in stat.items():
                acc[metric].append(v)
                rows.append((n, s, "max", metric, v))
            if n >= 2:
                d = max(joint_w2(Yp[0, m], Yp[1, m], Yi[0, m], Yi[1, m]) for m in range(1, M + 1))
                j2.append(d)
                rows.append((n, s, "max", "joint_W2", d))
            if n >= 8:
                roots = Yi[:, 0, 0]
                ks.append(float(ks_2samp(roots[: n // 2], roots[n // 2:]).pvalue))
        entry = {}
        for metric in METRICS:
            entry[metric] = float(np.mean(acc[metric]))
            entry[metric + "_se"] = _se(samples[metric])
        entry["joint_W2"] = float(np.mean(j2)) if j2 else None
        entry["joint_W2_se"] = (float(np.std(j2, ddof=1) / math.sqrt(len(j2)))
                                if len(j2) > 1 else 0.0)
        entry["ks_pvalue_min"] = min(ks) if ks else None
        entry["outer_iterations"] = iters
        summary[n] = entry
    meta = {"chaos_condition": {"lhs": lhs, "holds": ok}, "exploratory": not ok,
            "reference_iterations": mean_field.iterations, "reference_seed": ref_seed}
    return ChaosReport(n_grid, seeds, n_paths, n_ref, degree, p, rows, summary, meta)
