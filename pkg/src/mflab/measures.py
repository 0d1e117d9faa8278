"""Discrete measures on a finite metric label space and on the product state space.

A label space is a finite set of atoms with a distance matrix.  Label measures
are weight vectors over those atoms.  Agent states pair a position in R^d with a
probability label measure; an empirical measure is a uniform-weight ensemble of
agent states stored as two arrays, positions ``X`` with shape (N, d) and label
weights ``L`` with shape (N, K).

All norms here are exact: the bounded-Lipschitz norm and the label W1 distance
are finite linear programs, and W1 between ensembles is an assignment or
transport problem.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment, linprog

from .errors import InternalError, InvariantError, UsageError

MASS_TOL = 1e-12
CLAMP_TOL = 1e-12
# vertex enumeration of the BL polytope is cheap up to this many atoms
MAX_VERTEX_ATOMS = 5
# largest replicated assignment problem used for unequal ensemble sizes
MAX_LCM = 2400


# ---------------------------------------------------------------------------
# label space
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class LabelSpace:
    """Finite metric space of label atoms.

    ``coords`` is an optional embedding of the atoms in R; the linear fields
    use it to turn a label measure into a scalar mean label.
    """

    atoms: tuple
    dist: np.ndarray
    coords: np.ndarray | None = None

    def __post_init__(self):
        dist = np.array(self.dist, dtype=float)
        k = len(self.atoms)
        if k < 1:
            raise InvariantError("label space needs at least one atom")
        if dist.shape != (k, k):
            raise InvariantError(f"distance matrix shape {dist.shape} does not match {k} atoms")
        if not np.all(np.isfinite(dist)):
            raise InvariantError("distances must be finite")
        if np.any(np.diag(dist) != 0.0):
            raise InvariantError("dist[i][i] must be 0")
        if not np.array_equal(dist, dist.T):
            raise InvariantError("distance matrix must be symmetric")
        off = dist[~np.eye(k, dtype=bool)]
        if np.any(off <= 0):
            raise InvariantError("distinct atoms must have positive distance")
        # triangle inequality d_ij <= d_il + d_lj
        via = dist[:, :, None] + dist[None, :, :]  # [i, l, j]
        if np.any(dist > via.min(axis=1) + 1e-12):
            raise InvariantError("distance matrix violates the triangle inequality")
        dist.setflags(write=False)
        object.__setattr__(self, "dist", dist)
        object.__setattr__(self, "atoms", tuple(self.atoms))
        if self.coords is not None:
            coords = np.array(self.coords, dtype=float).reshape(-1)
            if coords.shape != (k,):
                raise InvariantError("coords must have one entry per atom")
            coords.setflags(write=False)
            object.__setattr__(self, "coords", coords)

    @classmethod
    def from_points(cls, points: Sequence[float], atoms: Sequence | None = None) -> "LabelSpace":
        """Atoms embedded in R with the induced distance |u - v|."""
        pts = np.asarray(points, dtype=float).reshape(-1)
        if atoms is None:
            atoms = tuple(range(len(pts)))
        return cls(tuple(atoms), np.abs(pts[:, None] - pts[None, :]), coords=pts)

    @property
    def K(self) -> int:
        return len(self.atoms)

    @property
    def diameter(self) -> float:
        return float(self.dist.max())

    def __eq__(self, other):
        if not isinstance(other, LabelSpace):
            return NotImplemented
        if self is other:
            return True
        return self.atoms == other.atoms and np.array_equal(self.dist, other.dist)

    def __hash__(self):
        return hash((self.atoms, self.dist.tobytes()))

    def require_coords(self) -> np.ndarray:
        if self.coords is None:
            raise UsageError("this operation needs atoms embedded in R (LabelSpace.coords)")
        return self.coords

    @cached_property
    def _bl_constraints(self) -> tuple[np.ndarray, np.ndarray]:
        # rows: phi_i <= 1, -phi_i <= 1, phi_i - phi_j <= d_ij (only when d_ij < 2)
        k = self.K
        rows, rhs = [], []
        eye = np.eye(k)
        for i in range(k):
            rows.append(eye[i]); rhs.append(1.0)
            rows.append(-eye[i]); rhs.append(1.0)
        for i, j in itertools.permutations(range(k), 2):
            if self.dist[i, j] < 2.0:
                rows.append(eye[i] - eye[j]); rhs.append(self.dist[i, j])
        return np.array(rows), np.array(rhs)

    @cached_property
    def bl_vertices(self) -> np.ndarray | None:
        """Vertices of {phi : |phi| <= 1, |phi_i - phi_j| <= d_ij}, or None if K is too large."""
        if self.K > MAX_VERTEX_ATOMS:
            return None
        A, b = self._bl_constraints
        k = self.K
        combos = np.array(list(itertools.combinations(range(len(b)), k)))
        As = A[combos]
        bs = b[combos]
        det = np.linalg.det(As)
        ok = np.abs(det) > 1e-9
        sol = np.linalg.solve(As[ok], bs[ok][..., None])[..., 0]
        feas = np.all(sol @ A.T <= b + 1e-9, axis=1)
        verts = np.unique(np.round(sol[feas], 12), axis=0)
        verts.setflags(write=False)
        return verts


def line_space(points: Sequence[float]) -> LabelSpace:
    return LabelSpace.from_points(points)


# ---------------------------------------------------------------------------
# label measures
# ---------------------------------------------------------------------------

PROBABILITY = "probability"
SIGNED = "signed"
ZERO_MASS = "zero_mass"


def clean_probability(w: np.ndarray, tol: float = CLAMP_TOL) -> np.ndarray:
    """Clamp tiny negative drift to zero and renormalise the clamped rows; raise
    on anything larger.  Rows that need no clamping are returned bit-for-bit, so
    the function is idempotent.

    Works on a single weight vector or on a stack of them (last axis = atoms).
    """
    w = np.array(w, dtype=float)
    if np.any(w < -tol):
        raise InvariantError(f"probability weights below -{tol:g}: min {w.min():.3e}")
    s = w.sum(axis=-1, keepdims=True)
    if np.any(np.abs(s - 1.0) > max(tol, 1e-10) * w.shape[-1]):
        raise InvariantError(f"probability weights do not sum to 1 (sum {np.ravel(s)[0]!r})")
    neg = w < 0
    if neg.any():
        rows = neg.any(axis=-1, keepdims=True)
        w = np.where(neg, 0.0, w)
        w = np.where(rows, w / w.sum(axis=-1, keepdims=True), w)
    return w


@dataclass(frozen=True, eq=False)
class LabelMeasure:
    """Atomic measure on a label space; ``kind`` selects which invariants apply."""

    space: LabelSpace
    weights: np.ndarray
    kind: str = PROBABILITY

    def __post_init__(self):
        w = np.array(self.weights, dtype=float).reshape(-1)
        if w.shape != (self.space.K,):
            raise InvariantError(f"expected {self.space.K} weights, got {w.shape[0]}")
        if not np.all(np.isfinite(w)):
            raise InvariantError("weights must be finite")
        if self.kind == PROBABILITY:
            w = clean_probability(w)
        elif self.kind == ZERO_MASS:
            if abs(w.sum()) > MASS_TOL * max(1.0, np.abs(w).sum()):
                raise InvariantError(f"zero-mass measure has total mass {w.sum():.3e}")
        elif self.kind != SIGNED:
            raise UsageError(f"unknown measure kind {self.kind!r}")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @classmethod
    def dirac(cls, space: LabelSpace, index: int) -> "LabelMeasure":
        w = np.zeros(space.K)
        w[index] = 1.0
        return cls(space, w)

    @classmethod
    def uniform(cls, space: LabelSpace) -> "LabelMeasure":
        return cls(space, np.full(space.K, 1.0 / space.K))

    @property
    def mass(self) -> float:
        return float(self.weights.sum())

    def __sub__(self, other: "LabelMeasure") -> "LabelMeasure":
        _same_space(self, other)
        kind = ZERO_MASS if self.kind != SIGNED and other.kind != SIGNED else SIGNED
        diff = self.weights - other.weights
        if kind == ZERO_MASS and abs(diff.sum()) > MASS_TOL:
            kind = SIGNED
        return LabelMeasure(self.space, diff, kind)

    def __add__(self, other: "LabelMeasure") -> "LabelMeasure":
        _same_space(self, other)
        return LabelMeasure(self.space, self.weights + other.weights, SIGNED)

    def pair(self, phi: np.ndarray) -> float:
        """Integral of a function given by its values at the atoms."""
        return float(np.dot(self.weights, phi))


def _same_space(a: LabelMeasure, b: LabelMeasure) -> None:
    if a.space != b.space:
        raise UsageError("label measures live on different label spaces")


# ---------------------------------------------------------------------------
# norms and distances on labels
# ---------------------------------------------------------------------------


def tv_norm(sigma: LabelMeasure) -> float:
    return float(np.abs(sigma.weights).sum())


def bl_norm(sigma: LabelMeasure) -> float:
    """Bounded-Lipschitz norm: sup of <sigma, phi> over |phi| <= 1, Lip(phi) <= 1.

    Solved as a linear program over the values of phi at the atoms.
    """
    w = sigma.weights
    if not np.any(w):
        return 0.0
    A, b = sigma.space._bl_constraints
    res = linprog(-w, A_ub=A, b_ub=b, bounds=[(None, None)] * sigma.space.K, method="highs")
    if res.status != 0:
        raise InternalError(f"BL linear program failed: {res.message}")
    return max(0.0, float(-res.fun))


def bl_norm_rows(W: np.ndarray, space: LabelSpace) -> np.ndarray:
    """BL norm of every row of a (n, K) array of signed weights."""
    W = np.atleast_2d(np.asarray(W, dtype=float))
    V = space.bl_vertices
    if V is not None:
        return np.maximum((W @ V.T).max(axis=1), 0.0)
    return np.array([bl_norm(LabelMeasure(space, w, SIGNED)) for w in W])


def bl_cost_matrix(L1: np.ndarray, L2: np.ndarray, space: LabelSpace, chunk: int = 128) -> np.ndarray:
    """Matrix of ||L1[i] - L2[j]||_BL for two stacks of label weights."""
    L1 = np.atleast_2d(L1)
    L2 = np.atleast_2d(L2)
    V = space.bl_vertices
    out = np.empty((L1.shape[0], L2.shape[0]))
    if V is None:
        for i in range(L1.shape[0]):
            out[i] = bl_norm_rows(L1[i] - L2, space)
        return out
    P1 = L1 @ V.T
    P2 = L2 @ V.T
    for start in range(0, L1.shape[0], chunk):
        block = P1[start:start + chunk, None, :] - P2[None, :, :]
        out[start:start + chunk] = block.max(axis=2)
    return np.maximum(out, 0.0)


def w1_labels(mu1: LabelMeasure, mu2: LabelMeasure) -> float:
    """Exact Wasserstein-1 distance between two probability label measures (transport LP)."""
    _same_space(mu1, mu2)
    if mu1.kind != PROBABILITY or mu2.kind != PROBABILITY:
        raise UsageError("w1_labels needs probability measures")
    k = mu1.space.K
    if np.array_equal(mu1.weights, mu2.weights):
        return 0.0
    A_eq = np.vstack([np.kron(np.eye(k), np.ones(k)), np.kron(np.ones(k), np.eye(k))])
    b_eq = np.concatenate([mu1.weights, mu2.weights])
    res = linprog(mu1.space.dist.ravel(), A_eq=A_eq, b_eq=b_eq, bounds=(0, None), method="highs")
    if res.status != 0:
        raise InternalError(f"transport linear program failed: {res.message}")
    return max(0.0, float(res.fun))


def relax_toward(lam: LabelMeasure, g: LabelMeasure, rho: float) -> LabelMeasure:
    """Convex combination (1 - rho) * lam + rho * g."""
    _same_space(lam, g)
    if not 0.0 <= rho <= 1.0:
        raise UsageError(f"rho must lie in [0, 1], got {rho}")
    return LabelMeasure(lam.space, (1.0 - rho) * lam.weights + rho * g.weights)


# ---------------------------------------------------------------------------
# agent states and empirical measures
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class AgentState:
    x: np.ndarray
    lam: LabelMeasure

    def __post_init__(self):
        x = np.array(self.x, dtype=float).reshape(-1)
        x.setflags(write=False)
        object.__setattr__(self, "x", x)
        if self.lam.kind != PROBABILITY:
            raise InvariantError("agent label must be a probability measure")

    @property
    def d(self) -> int:
        return self.x.shape[0]

    def norm(self) -> float:
        """Product norm |x| + ||lambda||_BL (the BL norm of a probability measure is 1)."""
        return float(np.linalg.norm(self.x)) + 1.0


@dataclass(frozen=True, eq=False)
class EmpiricalMeasure:
    """Uniform average of Dirac masses at N agent states, stored as arrays."""

    X: np.ndarray
    L: np.ndarray
    space: LabelSpace

    def __post_init__(self):
        X = np.array(self.X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        L = np.array(self.L, dtype=float)
        if X.ndim != 2 or L.ndim != 2:
            raise UsageError("positions must be (N, d) and labels (N, K)")
        if X.shape[0] != L.shape[0] or X.shape[0] < 1:
            raise UsageError("need the same positive number of positions and labels")
        if L.shape[1] != self.space.K:
            raise UsageError(f"labels have {L.shape[1]} atoms, space has {self.space.K}")
        X.setflags(write=False)
        L.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "L", L)

    @classmethod
    def from_agents(cls, agents: Sequence[AgentState]) -> "EmpiricalMeasure":
        if not agents:
            raise UsageError("empirical measure needs at least one agent")
        space = agents[0].lam.space
        d = agents[0].d
        for a in agents:
            if a.d != d or a.lam.space != space:
                raise UsageError("agents must share dimension and label space")
        return cls(np.stack([a.x for a in agents]), np.stack([a.lam.weights for a in agents]), space)

    @property
    def N(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    @property
    def agents(self) -> list[AgentState]:
        return [AgentState(x, LabelMeasure(self.space, l)) for x, l in zip(self.X, self.L)]

    def agent(self, i: int) -> AgentState:
        return AgentState(self.X[i], LabelMeasure(self.space, self.L[i]))

    def mean_x(self) -> np.ndarray:
        return self.X.mean(axis=0)

    def m1(self) -> float:
        """First moment: mean product norm of the agents."""
        return float(np.linalg.norm(self.X, axis=1).mean() + bl_norm_rows(self.L, self.space).mean())

    def check_labels(self, tol: float = 1e-10) -> float:
        """Largest violation of the probability invariants among the agents' labels."""
        neg = max(0.0, -float(self.L.min()))
        mass = float(np.abs(self.L.sum(axis=1) - 1.0).max())
        return max(neg, mass)


def product_cost_matrix(P: EmpiricalMeasure, Q: EmpiricalMeasure) -> np.ndarray:
    """Ground cost |x - x'| + ||lambda - lambda'||_BL between all agent pairs."""
    _check_product(P, Q)
    dx = np.linalg.norm(P.X[:, None, :] - Q.X[None, :, :], axis=2)
    return dx + bl_cost_matrix(P.L, Q.L, P.space)


def _check_product(P: EmpiricalMeasure, Q: EmpiricalMeasure) -> None:
    if P.d != Q.d:
        raise UsageError(f"dimension mismatch: {P.d} vs {Q.d}")
    if P.space != Q.space:
        raise UsageError("empirical measures use different label spaces")


def transport_cost(C: np.ndarray) -> float:
    """Optimal cost between uniform measures on the rows and columns of a cost matrix."""
    n, m = C.shape
    if n == m:
        r, c = linear_sum_assignment(C)
        return float(C[r, c].sum() / n)
    l = n * m // math.gcd(n, m)
    if l <= MAX_LCM:
        # uniform measures on n and m points are uniform on lcm copies; Birkhoff makes
        # the replicated assignment optimal for the original transport problem
        big = np.repeat(np.repeat(C, l // n, axis=0), l // m, axis=1)
        r, c = linear_sum_assignment(big)
        return float(big[r, c].sum() / l)
    A_eq = np.vstack([np.kron(np.eye(n), np.ones(m)), np.kron(np.ones(n), np.eye(m))])
    b_eq = np.concatenate([np.full(n, 1.0 / n), np.full(m, 1.0 / m)])
    res = linprog(C.ravel(), A_eq=A_eq, b_eq=b_eq, bounds=(0, None), method="highs")
    if res.status != 0:
        raise InternalError(f"transport linear program failed: {res.message}")
    return float(res.fun)


def w1_product(P: EmpiricalMeasure, Q: EmpiricalMeasure) -> float:
    """Exact W1 between two empirical measures on the product state space."""
    return max(0.0, transport_cost(product_cost_matrix(P, Q)))
