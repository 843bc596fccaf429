"""Discrete Brownian-plus-jump driver: time grid, event tree and path ensemble.

Both backends expose the same small interface used by the solvers:

* ``size(m)`` / ``weights(m)`` / ``state(m)`` describe the nodes (tree) or
  paths (ensemble) at step ``m``;
* ``conditional_expectation(values, m)`` maps step ``m+1`` values to step ``m``;
* ``loadings(values, m)`` also returns the Brownian loading ``Z`` and the
  per-mark jump loadings ``U``;
* ``expand(values, m)`` lifts step ``m`` values onto step ``m+1``.

Values may carry leading batch axes; the node/path axis is always last.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidGrid, InvalidIntensity, SingularRegression

MAX_TREE_NODES = 4_000_000


@dataclass(frozen=True)
class TimeGrid:
    horizon: float
    steps: int

    def __post_init__(self):
        if int(self.steps) != self.steps or self.steps < 1:
            raise InvalidGrid(f"steps must be a positive integer, got {self.steps}")
        if not (self.horizon > 0 and math.isfinite(self.horizon)):
            raise InvalidGrid(f"horizon must be positive, got {self.horizon}")

    @property
    def dt(self) -> float:
        return self.horizon / self.steps

    def time(self, m: int) -> float:
        # the last step maps exactly onto the horizon
        return self.horizon if m == self.steps else m * self.dt

    @property
    def times(self) -> np.ndarray:
        return np.array([self.time(m) for m in range(self.steps + 1)])


@dataclass(frozen=True)
class JumpSpec:
    """Finite mark set with per-mark intensities."""

    marks: tuple = ()
    intensities: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "marks", tuple(float(e) for e in self.marks))
        object.__setattr__(self, "intensities", tuple(float(l) for l in self.intensities))
        if len(self.marks) != len(self.intensities):
            raise InvalidIntensity("marks and intensities must have equal length")
        if any(not (l >= 0 and math.isfinite(l)) for l in self.intensities):
            raise InvalidIntensity("intensities must be finite and nonnegative")

    @property
    def n_marks(self) -> int:
        return len(self.marks)

    def jump_probabilities(self, grid: TimeGrid) -> np.ndarray:
        """Per-step jump probabilities ``lambda_k * dt``, validated against the grid."""
        p = np.array(self.intensities, dtype=float) * grid.dt
        if p.sum() >= 1.0:
            raise InvalidIntensity(
                f"total jump probability per step sum(lambda)*dt = {p.sum():g} must be < 1"
            )
        return p


@dataclass(frozen=True)
class State:
    """Driver state at one time step, vectorised over nodes or paths.

    ``brownian`` has shape ``(size,)`` and ``counts`` has shape ``(size, K)``.
    """

    brownian: np.ndarray
    counts: np.ndarray
    marks: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def jump_level(self) -> np.ndarray:
        """Cumulative mark-weighted jump sum (compound Poisson level)."""
        if self.counts.shape[-1] == 0:
            return np.zeros_like(self.brownian)
        return self.counts @ self.marks

    def __len__(self):
        return self.brownian.shape[0]


def _seed_sequence(seed) -> np.random.SeedSequence:
    if isinstance(seed, np.random.SeedSequence):
        return seed
    return np.random.SeedSequence(int(seed))


class NoiseLattice:
    """Common base; subclasses set ``backend`` to ``"tree"`` or ``"paths"``."""

    backend = ""
    grid: TimeGrid
    jumps: JumpSpec

    @property
    def steps(self) -> int:
        return self.grid.steps

    @property
    def dt(self) -> float:
        return self.grid.dt

    @property
    def n_marks(self) -> int:
        return self.jumps.n_marks

    def flow_weights(self, m):
        return self.weights(m)


class TreeLattice(NoiseLattice):
    """Non-recombining event tree with exact conditional expectations.

    Node ``j`` at step ``m`` has children ``j * b + r`` for ``r < b``. The
    branch tables ``branch_prob``, ``branch_db`` and ``branch_mark`` describe
    the focal noise: its Brownian increment and which mark jumped (0 for none).
    A product tree of several particles is the same object with a larger
    branch table (see :func:`joint_tree`).
    """

    backend = "tree"

    def __init__(self, grid, jumps, branch_prob, branch_db, branch_mark, brownian, counts,
                 mark_prob=None):
        self.grid = grid
        self.jumps = jumps
        self.branch_prob = np.asarray(branch_prob, dtype=float)
        self.branch_db = np.asarray(branch_db, dtype=float)
        self.branch_mark = np.asarray(branch_mark, dtype=int)
        self.branching = self.branch_prob.shape[0]
        self._brownian = brownian
        self._counts = counts
        if mark_prob is None:
            mark_prob = jumps.jump_probabilities(grid)
        self.mark_prob = np.asarray(mark_prob, dtype=float)
        self._marks = np.array(jumps.marks, dtype=float)
        probs = [np.ones(1)]
        for m in range(grid.steps):
            probs.append(np.multiply.outer(probs[-1], self.branch_prob).reshape(-1))
        self._probs = probs

    def size(self, m: int) -> int:
        return self.branching ** m

    def weights(self, m: int) -> np.ndarray:
        """Unconditional node probabilities at step ``m``."""
        return self._probs[m]

    def state(self, m: int) -> State:
        return State(self._brownian[m], self._counts[m], self._marks)

    def expand(self, values, m: int) -> np.ndarray:
        return np.repeat(np.asarray(values, dtype=float), self.branching, axis=-1)

    def _children(self, values, m):
        values = np.asarray(values, dtype=float)
        n_m = self.size(m)
        if values.shape[-1] != n_m * self.branching:
            raise ValueError(
                f"expected {n_m * self.branching} values at step {m + 1}, got {values.shape[-1]}"
            )
        return values.reshape(values.shape[:-1] + (n_m, self.branching))

    def conditional_expectation(self, values, m: int, degree: int = 2) -> np.ndarray:
        return self._children(values, m) @ self.branch_prob

    def loadings(self, values, m: int, degree: int = 2):
        """Return ``(E[V|F_m], Z, U)``; ``U`` has a trailing mark axis.

        ``Z = E[V dB]/dt``. ``U_k`` is the L2 projection coefficient on the
        jump indicator of mark ``k``: the conditional mean of ``V`` on jump
        ``k`` minus the conditional mean on no jump.
        """
        ch = self._children(values, m)
        mean = ch @ self.branch_prob
        z = ch @ (self.branch_prob * self.branch_db) / self.dt
        n_k = self.n_marks
        u = np.zeros(mean.shape + (n_k,))
        p0 = 1.0 - self.mark_prob.sum()
        no_jump = ch @ (self.branch_prob * (self.branch_mark == 0)) / p0
        for k in range(1, n_k + 1):
            pk = self.mark_prob[k - 1]
            if pk > 0:
                u[..., k - 1] = ch @ (self.branch_prob * (self.branch_mark == k)) / pk - no_jump
        return mean, z, u

    def martingale_residual(self, values, m: int) -> np.ndarray:
        """Conditional L2 norm of what the (Z, U) representation leaves out."""
        mean, z, u = self.loadings(values, m)
        ch = self._children(values, m)
        fitted = mean[..., None] + z[..., None] * self.branch_db
        for k in range(1, self.n_marks + 1):
            ind = (self.branch_mark == k) - self.mark_prob[k - 1]
            fitted = fitted + u[..., k - 1][..., None] * ind
        return np.sqrt(((ch - fitted) ** 2) @ self.branch_prob)

    def leaf_expectation(self, values) -> float:
        return float(np.asarray(values) @ self._probs[-1])

    def nonterminal_nodes(self) -> int:
        return sum(self.size(m) for m in range(self.steps))


def _single_branches(grid, jumps):
    p = jumps.jump_probabilities(grid)
    n_k = jumps.n_marks
    sq = math.sqrt(grid.dt)
    prob, db, mark = [], [], []
    for j in range(n_k + 1):
        pj = 1.0 - p.sum() if j == 0 else p[j - 1]
        for s in (0, 1):
            prob.append(0.5 * pj)
            db.append(sq if s == 0 else -sq)
            mark.append(j)
    return np.array(prob), np.array(db), np.array(mark), p


def build_tree(grid: TimeGrid, jumps: JumpSpec | None = None) -> TreeLattice:
    """Exact event tree with ``2 (1 + K)`` branches per node."""
    jumps = jumps or JumpSpec()
    prob, db, mark, p = _single_branches(grid, jumps)
    b = prob.shape[0]
    if b ** grid.steps > MAX_TREE_NODES:
        raise InvalidGrid(f"tree with {b}^{grid.steps} leaves exceeds {MAX_TREE_NODES}")
    n_k = jumps.n_marks
    jump_inc = np.zeros((b, n_k))
    for r in range(b):
        if mark[r]:
            jump_inc[r, mark[r] - 1] = 1.0
    brownian = [np.zeros(1)]
    counts = [np.zeros((1, n_k))]
    for m in range(grid.steps):
        brownian.append((brownian[-1][:, None] + db[None, :]).reshape(-1))
        counts.append((counts[-1][:, None, :] + jump_inc[None, :, :]).reshape(len(brownian[-1]), n_k))
    return TreeLattice(grid, jumps, prob, db, mark, brownian, counts, mark_prob=p)


def joint_tree(grid: TimeGrid, jumps: JumpSpec | None, n: int, particle: int) -> TreeLattice:
    """Product tree of ``n`` independent copies viewed from one particle.

    Joint branch ``r = r_0 * b^(n-1) + ... + r_{n-1}``; the Brownian increment,
    mark and state tables are those of copy ``particle``.
    """
    jumps = jumps or JumpSpec()
    prob, db, mark, p = _single_branches(grid, jumps)
    b = prob.shape[0]
    if (b ** n) ** grid.steps > MAX_TREE_NODES:
        raise InvalidGrid("joint tree too large")
    single = build_tree(grid, jumps)
    joint_prob = np.ones(1)
    for _ in range(n):
        joint_prob = np.multiply.outer(joint_prob, prob).reshape(-1)
    digits = np.array(list(itertools.product(range(b), repeat=n)))
    own = digits[:, particle]
    brownian, counts = [], []
    for m in range(grid.steps + 1):
        # joint node index at step m in base b^n; own single-tree index from its digits
        idx = np.arange((b ** n) ** m)
        own_idx = np.zeros_like(idx)
        rest = idx.copy()
        scale = 1
        for _ in range(m):
            r = rest % (b ** n)
            rest //= b ** n
            own_idx += scale * own[r]
            scale *= b
        brownian.append(single._brownian[m][own_idx])
        counts.append(single._counts[m][own_idx])
    return TreeLattice(grid, jumps, joint_prob, db[own], mark[own], brownian, counts, mark_prob=p)


def polynomial_features(state: State, degree: int, extra_states=()) -> np.ndarray:
    """Monomials of total degree ``<= degree`` in the non-constant state variables.

    A variable taking ``q`` distinct values enters with powers ``< q`` only,
    since higher powers are exact linear combinations of the lower ones.
    ``extra_states`` adds the variables of further states (other particles).
    """
    cols = []
    for st in (state, *extra_states):
        cols += [st.brownian] + [st.counts[:, k] for k in range(st.counts.shape[1])]
    cols = [c for c in cols if np.ptp(c) > 0]
    caps = [np.unique(c).size - 1 for c in cols]
    n = state.brownian.shape[0]
    feats = [np.ones(n)]
    for d in range(1, degree + 1):
        for combo in itertools.combinations_with_replacement(range(len(cols)), d):
            if any(combo.count(i) > caps[i] for i in set(combo)):
                continue
            col = np.prod([cols[i] for i in combo], axis=0)
            if np.ptp(col) > 0:
                feats.append(col)
    return np.stack(feats, axis=1)


def _fit(features, targets):
    """Least squares predictions for every column of ``targets`` (paths, k)."""
    coef, _, rank, _ = np.linalg.lstsq(features, targets, rcond=None)
    if rank < features.shape[1]:
        raise SingularRegression(f"design of width {features.shape[1]} has rank {rank}")
    return features @ coef


class PathEnsemble(NoiseLattice):
    """Seeded i.i.d. discrete paths with regression conditional expectations."""

    backend = "paths"

    def __init__(self, grid, jumps, db, jump_idx, seed=None):
        self.grid = grid
        self.jumps = jumps
        self.db = db
        self.jump_idx = jump_idx
        self.seed = seed
        self.n_paths = db.shape[0]
        n_k = jumps.n_marks
        self.mark_prob = jumps.jump_probabilities(grid)
        self._marks = np.array(jumps.marks, dtype=float)
        self.brownian = np.concatenate([np.zeros((self.n_paths, 1)), np.cumsum(db, axis=1)], axis=1)
        onehot = np.zeros((self.n_paths, grid.steps, n_k))
        for k in range(1, n_k + 1):
            onehot[:, :, k - 1] = jump_idx == k
        self.counts = np.concatenate(
            [np.zeros((self.n_paths, 1, n_k)), np.cumsum(onehot, axis=1)], axis=1
        )
        self._feature_cache = {}
        self.conditioning = ()

    def conditioned_on(self, others) -> "PathEnsemble":
        """Same noise, with regressions also conditioning on the states of ``others``."""
        out = PathEnsemble.__new__(PathEnsemble)
        out.__dict__.update(self.__dict__)
        out._feature_cache = {}
        out.conditioning = tuple(others)
        return out

    def size(self, m: int) -> int:
        return self.n_paths

    def weights(self, m: int) -> np.ndarray:
        return np.full(self.n_paths, 1.0 / self.n_paths)

    def state(self, m: int) -> State:
        return State(self.brownian[:, m], self.counts[:, m, :], self._marks)

    def expand(self, values, m: int) -> np.ndarray:
        return np.asarray(values, dtype=float)

    def features(self, m: int, degree: int) -> np.ndarray:
        key = (m, degree)
        if key not in self._feature_cache:
            self._feature_cache[key] = polynomial_features(
                self.state(m), degree, [o.state(m) for o in self.conditioning])
        return self._feature_cache[key]

    def _regress(self, targets, m, degree):
        # targets: (..., paths, k) -> fitted with same shape
        lead = targets.shape[:-2]
        n, k = targets.shape[-2:]
        flat = np.moveaxis(targets.reshape((-1, n, k)), 1, 0).reshape(n, -1)
        fitted = _fit(self.features(m, degree), flat)
        return np.moveaxis(fitted.reshape(n, -1, k), 0, 1).reshape(lead + (n, k))

    def conditional_expectation(self, values, m: int, degree: int = 2) -> np.ndarray:
        values = np.asarray(values, dtype=float)
        return self._regress(values[..., None], m, degree)[..., 0]

    def loadings(self, values, m: int, degree: int = 2):
        values = np.asarray(values, dtype=float)
        n_k = self.n_marks
        cols = [values, values * self.db[:, m] / self.dt]
        if n_k:
            jm = self.jump_idx[:, m]
            p0 = 1.0 - self.mark_prob.sum()
            cols.append(values * (jm == 0) / p0)
            for k in range(1, n_k + 1):
                pk = self.mark_prob[k - 1]
                cols.append(values * (jm == k) / pk if pk > 0 else np.zeros_like(values))
        fitted = self._regress(np.stack(cols, axis=-1), m, degree)
        mean, z = fitted[..., 0], fitted[..., 1]
        u = np.zeros(mean.shape + (n_k,))
        for k in range(1, n_k + 1):
            if self.mark_prob[k - 1] > 0:
                u[..., k - 1] = fitted[..., 2 + k] - fitted[..., 2]
        return mean, z, u


def sample_paths(grid: TimeGrid, jumps: JumpSpec | None, n_paths: int, seed) -> PathEnsemble:
    """Draw ``n_paths`` i.i.d. paths: ``+-sqrt(dt)`` increments and categorical jumps."""
    jumps = jumps or JumpSpec()
    if int(n_paths) != n_paths or n_paths < 1:
        raise InvalidGrid(f"n_paths must be a positive integer, got {n_paths}")
    p = jumps.jump_probabilities(grid)
    rng = np.random.default_rng(_seed_sequence(seed))
    shape = (int(n_paths), grid.steps)
    sq = math.sqrt(grid.dt)
    db = np.where(rng.integers(0, 2, size=shape) == 0, sq, -sq)
    if jumps.n_marks:
        cum = np.cumsum(np.concatenate([[1.0 - p.sum()], p]))
        jump_idx = np.searchsorted(cum, rng.random(shape), side="right").astype(np.int64)
        np.minimum(jump_idx, jumps.n_marks, out=jump_idx)
    else:
        jump_idx = np.zeros(shape, dtype=np.int64)
    return PathEnsemble(grid, jumps, db, jump_idx, seed=seed)


def conditional_expectation(lattice, values, m: int, basis_degree: int = 2):
    """Functional form of ``lattice.conditional_expectation``."""
    return lattice.conditional_expectation(values, m, basis_degree)
