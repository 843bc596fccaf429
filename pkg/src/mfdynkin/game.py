"""Exhaustive zero-sum Dynkin games on small event trees.

The maximiser chooses ``tau`` and receives the lower obstacle ``h1`` when it
stops first or together with the minimiser before the horizon; the minimiser
chooses ``sigma`` and pays ``h2`` when it stops strictly first; the terminal
condition is paid if neither stops before the horizon. Payoffs are valued
with the nonlinear conditional expectation induced by the driver.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .drbsde import f_expectation, implicit_driver, solve_frozen
from .errors import BackendUnsupported, TooLarge

MAX_NONTERMINAL = 24
MAX_PAIRS = 500_000
CHUNK_ELEMENTS = 4_000_000
SADDLE_TOL = 1e-9
PICARD_TOL = 1e-13


def _require_tree(lattice):
    if lattice.backend != "tree":
        raise BackendUnsupported("stopping games are enumerated on trees only")


@dataclass
class StoppingRule:
    """Per-node stop decisions; the horizon is always a stop."""

    stop: list

    @classmethod
    def never(cls, lattice) -> "StoppingRule":
        M = lattice.steps
        return cls([np.zeros(lattice.size(m), bool) for m in range(M)] + [np.ones(lattice.size(M), bool)])

    @classmethod
    def at_step(cls, lattice, k: int) -> "StoppingRule":
        M = lattice.steps
        return cls([np.full(lattice.size(m), m == k or m == M) for m in range(M + 1)])

    @classmethod
    def from_mask(cls, lattice, mask) -> "StoppingRule":
        levels = _split(np.asarray(mask, bool)[None, :], lattice)
        return cls([lv[0] for lv in levels] + [np.ones(lattice.size(lattice.steps), bool)])

    @property
    def mask(self) -> np.ndarray:
        return np.concatenate(self.stop[:-1])

    def canonical(self, lattice) -> "StoppingRule":
        """Clear decisions below a stop node (they can never be reached)."""
        out, reached = [], np.zeros(1, bool)
        for m, s in enumerate(self.stop):
            if m:
                reached = lattice.expand(reached | out[-1], m - 1).astype(bool)
            out.append(s & ~reached)
        out[-1] = np.ones_like(out[-1])
        return StoppingRule(out)

    def stop_nodes(self):
        return [(m, int(j)) for m, s in enumerate(self.stop) for j in np.flatnonzero(s)]

    def to_csv(self, path, lattice=None):
        """Node list of stop decisions (reachable ones when a lattice is given)."""
        rule = self.canonical(lattice) if lattice is not None else self
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["m", "node"])
            w.writerows(rule.stop_nodes())


def _split(masks, lattice):
    out, pos = [], 0
    for m in range(lattice.steps):
        n = lattice.size(m)
        out.append(masks[:, pos:pos + n])
        pos += n
    return out


def count_rules(lattice) -> int:
    """Number of distinct stopping times (stop regions up to unreachable nodes)."""
    s = 1
    for _ in range(lattice.steps):
        s = 1 + s ** lattice.branching
    return s


def enumerate_rules(lattice, max_rules: int = MAX_PAIRS) -> np.ndarray:
    """All distinct stopping times as boolean masks over non-terminal nodes.

    A rule either stops at a node or continues and combines independent rules
    on each child subtree, so the count obeys ``s(d) = 1 + s(d-1)^b``.
    """
    _require_tree(lattice)
    total = count_rules(lattice)
    if total > max_rules:
        raise TooLarge(f"{total} stopping rules exceed the cap {max_rules}")
    M, b = lattice.steps, lattice.branching
    offsets = np.cumsum([0] + [lattice.size(m) for m in range(M)])
    width = int(offsets[-1])

    def rec(m, j):
        if m == M:
            return np.zeros((1, width), bool)
        here = np.zeros((1, width), bool)
        here[0, offsets[m] + j] = True
        rows = None
        for r in range(b):
            child = rec(m + 1, j * b + r)
            rows = child if rows is None else (rows[:, None, :] | child[None, :, :]).reshape(-1, width)
        return np.concatenate([here, rows])

    return rec(0, 0)


def obstacle_processes(lattice, c, flow, value=None):
    """Obstacle values per step at a reference value process (zeros if ``None``)."""
    grid = lattice.grid
    h1, h2 = [], []
    for m in range(grid.steps + 1):
        st = lattice.state(m)
        v = np.zeros(lattice.size(m)) if value is None else np.asarray(value[m], dtype=float)
        v = np.broadcast_to(v, (lattice.size(m),))
        h1.append(c.lower(grid.time(m), v, flow[m], st))
        h2.append(c.upper(grid.time(m), v, flow[m], st))
    return h1, h2


def pair_values(lattice, c, flow, h1, h2, xi, tau_levels, sigma_levels):
    """f-expectation of the stopped payoff for all rule pairs.

    ``tau_levels[m]`` has shape ``(R_tau, size(m))`` and ``sigma_levels[m]``
    shape ``(R_sigma, size(m))``; returns per-step arrays of shape
    ``(R_tau, R_sigma, size(m))``.
    """
    M = lattice.steps
    stop, pay = [], []
    for m in range(M):
        t = tau_levels[m][:, None, :]
        s = sigma_levels[m][None, :, :]
        stop.append(t | s)
        pay.append(np.where(t, h1[m], h2[m]))
    stop.append(None)
    pay.append(np.asarray(xi, dtype=float))
    return f_expectation(lattice, c, flow, stop, pay)


def _as_levels(rule: StoppingRule, M):
    return [rule.stop[m][None, :] for m in range(M)]


def payoff(tau: StoppingRule, sigma: StoppingRule, c, flow, lattice, value=None,
           nodewise: bool = False):
    """Root f-expectation of the stopped payoff (all steps if ``nodewise``).

    Obstacles are evaluated at ``value`` (the game's value process); when it
    is omitted and the obstacles depend on ``y``, the frozen DRBSDE solution
    supplies it.
    """
    _require_tree(lattice)
    M = lattice.steps
    if value is None and c.obstacles_depend_on_y:
        value = solve_frozen(lattice, c, flow).Y
    h1, h2 = obstacle_processes(lattice, c, flow, value)
    xi = c.terminal(lattice.state(M))
    X = pair_values(lattice, c, flow, h1, h2, xi, _as_levels(tau, M), _as_levels(sigma, M))
    if nodewise:
        return [np.broadcast_to(x, (1, 1, lattice.size(m)))[0, 0] for m, x in enumerate(X)]
    return float(np.broadcast_to(X[0], (1, 1, 1))[0, 0, 0])


@dataclass
class GameResult:
    upper: list
    lower: list
    n_rules: int
    picard_iterations: int = 1
    tau_star: StoppingRule | None = None
    sigma_star: StoppingRule | None = None
    convention: dict = field(default_factory=lambda: {
        "maximiser": "tau, receives h1 on {tau <= sigma < T}",
        "minimiser": "sigma, pays h2 on {sigma < tau}",
        "terminal": "xi on {tau ^ sigma = T}",
    })

    @property
    def upper_value(self) -> float:
        return float(self.upper[0][0])

    @property
    def lower_value(self) -> float:
        return float(self.lower[0][0])

    @property
    def gap(self) -> float:
        return max(float(np.max(np.abs(u - l))) for u, l in zip(self.upper, self.lower))

    def to_dict(self) -> dict:
        return {
            "upper_value": self.upper_value,
            "lower_value": self.lower_value,
            "max_nodewise_gap": self.gap,
            "n_rules": self.n_rules,
            "picard_iterations": self.picard_iterations,
            "upper": [u.tolist() for u in self.upper],
            "lower": [l.tolist() for l in self.lower],
            "convention": self.convention,
        }

    def to_json(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)


def game_values_by_pairs(lattice, c, flow, h1, h2, xi, rules=None):
    """Node-wise ``min_sigma max_tau`` / ``max_tau min_sigma`` over global rule pairs.

    Straightforward but memory hungry; :func:`game_values` gives the same
    numbers through per-subtree tables.
    """
    _require_tree(lattice)
    M = lattice.steps
    if rules is None:
        rules = enumerate_rules(lattice)
    R = rules.shape[0]
    if R * R > MAX_PAIRS:
        raise TooLarge(f"{R * R} rule pairs exceed the cap {MAX_PAIRS}")
    levels = _split(rules, lattice)
    n_max = max(lattice.size(m) for m in range(M))
    chunk = max(1, CHUNK_ELEMENTS // max(1, R * n_max))
    upper = [np.full(lattice.size(m), np.inf) for m in range(M)]
    inner_min = [np.full((R, lattice.size(m)), np.inf) for m in range(M)]
    for lo in range(0, R, chunk):
        sig = [lv[lo:lo + chunk] for lv in levels]
        X = pair_values(lattice, c, flow, h1, h2, xi, levels, sig)
        for m in range(M):
            x = np.broadcast_to(X[m], (R, sig[m].shape[0], lattice.size(m)))
            upper[m] = np.minimum(upper[m], x.max(axis=0).min(axis=0))
            inner_min[m] = np.minimum(inner_min[m], x.min(axis=1))
    lower = [im.max(axis=0) for im in inner_min]
    xi = np.asarray(xi, dtype=float)
    return upper + [xi], lower + [xi]


def pair_tables(lattice, c, flow, h1, h2, xi):
    """Payoff of every pair of subtree stopping rules, level by level.

    At a node with ``d`` remaining steps a rule is either "stop here"
    (pattern 0) or a tuple of child-subtree rules (pattern ``1 + mixed radix
    index``), so there are ``s(d) = 1 + s(d-1)^b`` patterns. Entry
    ``[j, a, e]`` of the level-``m`` table is the f-expectation at node ``j``
    when the maximiser follows pattern ``a`` and the minimiser pattern ``e``.
    Every global pair of stopping times restricts to one entry per node, so
    the tables enumerate all pairs exhaustively.
    """
    _require_tree(lattice)
    grid = lattice.grid
    M, b = grid.steps, lattice.branching
    if count_rules(lattice) ** 2 > MAX_PAIRS:
        raise TooLarge(f"{count_rules(lattice) ** 2} rule pairs exceed the cap {MAX_PAIRS}")
    tables = [None] * (M + 1)
    tables[M] = np.asarray(xi, dtype=float).reshape(-1, 1, 1)
    s_child = 1
    for m in range(M - 1, -1, -1):
        n_m = lattice.size(m)
        n_pat = 1 + s_child ** b
        digits = np.arange(n_pat - 1)
        cid = [(digits // s_child ** (b - 1 - r)) % s_child for r in range(b)]
        child = tables[m + 1].reshape(n_m, b, s_child, s_child)
        # gathered children values, arranged (tau pattern, sigma pattern, node, branch)
        V = np.stack([child[:, r][:, cid[r][:, None], cid[r][None, :]] for r in range(b)], axis=-1)
        V = np.moveaxis(V, 0, 2).reshape(n_pat - 1, n_pat - 1, n_m * b)
        mean, z, u = lattice.loadings(V, m)
        ua = c.aggregate_u(u, lattice.jumps)
        cont = implicit_driver(mean, grid.time(m), z, ua, flow[m], c, grid.dt)
        table = np.empty((n_pat, n_pat, n_m))
        table[0] = h1[m]
        table[1:, 0] = h2[m]
        table[1:, 1:] = cont
        tables[m] = np.moveaxis(table, 2, 0)
        s_child = n_pat
    return tables


def game_values(lattice, c, flow, h1, h2, xi, rules=None):
    """Node-wise upper (``min_sigma max_tau``) and lower (``max_tau min_sigma``) values."""
    tables = pair_tables(lattice, c, flow, h1, h2, xi)
    upper = [t.max(axis=1).min(axis=1) for t in tables]
    lower = [t.min(axis=2).max(axis=1) for t in tables]
    return upper, lower


def brute_force_values(c, flow, lattice, depth_cap: int = 4, max_picard: int = 500) -> GameResult:
    """Upper and lower game values by exhaustive enumeration of stopping pairs.

    When the obstacles depend on the value itself, the game operator is
    iterated (Picard, from the zero process) until the value process is
    reproduced; each iterate is an exhaustive enumeration.
    """
    _require_tree(lattice)
    if lattice.steps > depth_cap:
        raise TooLarge(f"depth {lattice.steps} exceeds cap {depth_cap}")
    if lattice.nonterminal_nodes() > MAX_NONTERMINAL:
        raise TooLarge(f"{lattice.nonterminal_nodes()} non-terminal nodes exceed {MAX_NONTERMINAL}")
    n_rules = count_rules(lattice)
    xi = c.terminal(lattice.state(lattice.steps))
    value, it = None, 0
    while True:
        it += 1
        h1, h2 = obstacle_processes(lattice, c, flow, value)
        upper, lower = game_values(lattice, c, flow, h1, h2, xi)
        if not c.obstacles_depend_on_y:
            break
        if value is not None:
            step = max(float(np.max(np.abs(u - v))) for u, v in zip(upper, value))
            if step <= PICARD_TOL:
                break
        if it >= max_picard:
            break
        value = upper
    return GameResult(upper, lower, n_rules, picard_iterations=it)


def extract_saddle(sol, c=None, flow=None, tol: float = SADDLE_TOL):
    """Hitting rules of the value process on ``h1`` (tau) and ``h2`` (sigma)."""
    M = sol.steps
    tau, sigma = [], []
    for m in range(M):
        tau.append(np.abs(sol.Y[m] - sol.lower[m]) <= tol)
        sigma.append(np.abs(sol.Y[m] - sol.upper[m]) <= tol)
    last = np.ones(np.shape(sol.Y[M]), bool)
    return StoppingRule(tau + [last]), StoppingRule(sigma + [last])


@dataclass
class SaddleReport:
    """Worst unilateral gains against a candidate saddle.

    ``tau_gain`` is the largest improvement the maximiser obtains by
    deviating, ``sigma_gain`` the minimiser's. ``excess`` subtracts
    ``se_multiple`` Monte Carlo standard errors per deviation (zero on trees).
    """

    value: float
    tau_gain: float
    sigma_gain: float
    n_tau_deviations: int
    n_sigma_deviations: int
    mode: str
    tol: float = SADDLE_TOL
    excess: float | None = None
    se_multiple: float = 0.0
    worst_se: float = 0.0

    def __post_init__(self):
        if self.excess is None:
            self.excess = max(self.tau_gain, self.sigma_gain)

    @property
    def margin(self) -> float:
        return -max(self.tau_gain, self.sigma_gain)

    @property
    def passed(self) -> bool:
        return self.excess <= self.tol

    def to_dict(self) -> dict:
        return {"value": self.value, "tau_gain": self.tau_gain, "sigma_gain": self.sigma_gain,
                "margin": self.margin, "excess": self.excess, "passed": self.passed,
                "mode": self.mode, "se_multiple": self.se_multiple, "worst_se": self.worst_se,
                "n_tau_deviations": self.n_tau_deviations,
                "n_sigma_deviations": self.n_sigma_deviations}


def sampled_rules(lattice, n_samples: int, seed: int, around=None) -> np.ndarray:
    """Random stop regions, deterministic-time rules and one-node flips of ``around``."""
    rng = np.random.default_rng(seed)
    M = lattice.steps
    width = lattice.nonterminal_nodes()
    rows = []
    for k in range(M):
        rows.append(np.concatenate([np.full(lattice.size(m), m == k) for m in range(M)]))
    rows.append(np.zeros(width, bool))
    if around is not None:
        base = around.mask
        for j in rng.choice(width, size=min(width, n_samples // 2), replace=False):
            r = base.copy()
            r[j] = ~r[j]
            rows.append(r)
    while len(rows) < n_samples:
        q = rng.choice([0.05, 0.2, 0.5])
        rows.append(rng.random(width) < q)
    return np.array(rows[:max(n_samples, M + 1)])


def verify_saddle(tau, sigma, c, flow, lattice, value=None, mode: str = "auto",
                  n_samples: int = 256, seed: int = 0, tol: float = SADDLE_TOL) -> SaddleReport:
    """Check both unilateral-deviation inequalities at every node.

    ``mode`` is ``"exhaustive"``, ``"sampled"`` or ``"auto"`` (exhaustive
    when the rule count is at most ``MAX_PAIRS``).
    """
    _require_tree(lattice)
    M = lattice.steps
    if value is None and c.obstacles_depend_on_y:
        value = solve_frozen(lattice, c, flow).Y
    h1, h2 = obstacle_processes(lattice, c, flow, value)
    xi = c.terminal(lattice.state(M))
    if mode == "auto":
        mode = "exhaustive" if count_rules(lattice) <= MAX_PAIRS else "sampled"
    if mode == "exhaustive":
        tau_dev = sigma_dev = enumerate_rules(lattice)
    else:
        tau_dev = sampled_rules(lattice, n_samples, seed, around=tau)
        sigma_dev = sampled_rules(lattice, n_samples, seed + 1, around=sigma)
    star = pair_values(lattice, c, flow, h1, h2, xi, _as_levels(tau, M), _as_levels(sigma, M))
    dev_t = pair_values(lattice, c, flow, h1, h2, xi, _split(tau_dev, lattice), _as_levels(sigma, M))
    dev_s = pair_values(lattice, c, flow, h1, h2, xi, _as_levels(tau, M), _split(sigma_dev, lattice))
    tau_gain = sigma_gain = -np.inf
    for m in range(M):
        ref = np.broadcast_to(star[m], (1, 1, lattice.size(m)))[0, 0]
        tau_gain = max(tau_gain, float(np.max(dev_t[m] - ref)))
        sigma_gain = max(sigma_gain, float(np.max(ref - dev_s[m])))
    root = float(np.broadcast_to(star[0], (1, 1, 1))[0, 0, 0])
    return SaddleReport(root, tau_gain, sigma_gain, tau_dev.shape[0], sigma_dev.shape[0], mode, tol)


def path_rules(sol, lattice, player: str, around, n_samples: int, seed: int):
    """Adapted deviation rules on a path ensemble, as per-step ``(R, N)`` arrays.

    Includes deterministic stopping steps, never stopping, threshold rules on
    the distance to the player's own obstacle, Brownian-level barrier rules
    and the candidate rule restricted to a late window.
    """
    rng = np.random.default_rng(seed)
    M, N = lattice.steps, lattice.size(0)
    own = sol.lower if player == "tau" else sol.upper
    gap = [np.abs(sol.Y[m] - own[m]) for m in range(M)]
    rules = [[np.full(N, m == k) for m in range(M)] for k in range(M)]
    rules.append([np.zeros(N, bool) for _ in range(M)])
    pooled = np.concatenate(gap)
    for q in (0.05, 0.1, 0.25, 0.5, 0.75):
        eps = float(np.quantile(pooled, q))
        rules.append([g <= eps for g in gap])
    for k in range(1, M):
        rules.append([around[m] & (m >= k) for m in range(M)])
    while len(rules) < n_samples:
        lo, hi = sorted(rng.integers(0, M, size=2))
        level = float(rng.normal(0.0, 0.7 * math.sqrt(lattice.grid.horizon)))
        up = bool(rng.integers(0, 2))
        rule = []
        for m in range(M):
            b = lattice.state(m).brownian
            hit = (b >= level) if up else (b <= level)
            rule.append(hit & (lo <= m <= hi))
        rules.append(rule)
    return [np.stack([r[m] for r in rules]) for m in range(M)]


def verify_saddle_paths(sol, c, flow, lattice, n_samples: int = 64, seed: int = 0,
                        se_multiple: float = 2.0, tol: float = SADDLE_TOL) -> SaddleReport:
    """Sampled-deviation saddle check for a path-ensemble solution.

    Payoffs are regression f-expectations on the ensemble with obstacles at
    the solution's value process. A deviation counts against the candidate
    only when its gain exceeds ``se_multiple`` standard errors of the
    path-wise payoff difference.
    """
    M = lattice.steps
    tau, sigma = extract_saddle(sol)
    tau_l, sig_l = tau.stop[:M], sigma.stop[:M]
    h1, h2 = sol.lower, sol.upper
    xi = sol.Y[M]
    one = lambda rule: [r[None, :] for r in rule]
    tau_dev = path_rules(sol, lattice, "tau", tau_l, n_samples, seed)
    sig_dev = path_rules(sol, lattice, "sigma", sig_l, n_samples, seed + 1)
    star = pair_values(lattice, c, flow, h1, h2, xi, one(tau_l), one(sig_l))
    dev_t = pair_values(lattice, c, flow, h1, h2, xi, tau_dev, one(sig_l))
    dev_s = pair_values(lattice, c, flow, h1, h2, xi, one(tau_l), sig_dev)

    def realised(X, stop0, pay0):
        return np.where(stop0, pay0, X[1])

    n = lattice.size(0)
    stop0 = tau_l[0] | sig_l[0]
    ref = realised(star, stop0, np.where(tau_l[0], h1[0], h2[0]))[0, 0]
    j_star = float(np.mean(np.broadcast_to(star[0], (1, 1, n))[0, 0]))
    r_t = realised(dev_t, (tau_dev[0] | sig_l[0])[:, None, :],
                   np.where(tau_dev[0], h1[0], h2[0])[:, None, :])[:, 0]
    r_s = realised(dev_s, (tau_l[0] | sig_dev[0])[None, :, :],
                   np.where(tau_l[0], h1[0], h2[0])[None, None, :])[0]
    gain_t = np.mean(np.broadcast_to(dev_t[0], (len(r_t), 1, n))[:, 0], axis=-1) - j_star
    gain_s = j_star - np.mean(np.broadcast_to(dev_s[0], (1, len(r_s), n))[0], axis=-1)
    se_t = np.std(r_t - ref, axis=-1) / math.sqrt(n)
    se_s = np.std(r_s - ref, axis=-1) / math.sqrt(n)
    ex = np.concatenate([gain_t - se_multiple * se_t, gain_s - se_multiple * se_s])
    worst = int(np.argmax(ex))
    return SaddleReport(j_star, float(gain_t.max()), float(gain_s.max()), len(r_t), len(r_s),
                        "sampled", tol, excess=float(ex[worst]), se_multiple=se_multiple,
                        worst_se=float(np.concatenate([se_t, se_s])[worst]))
