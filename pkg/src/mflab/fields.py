"""Velocity fields and label operators, plus numeric probes of their constants.

Fields are evaluated in batch.  With ``X`` of shape (n, d), ``L`` of shape (n, K)
and a frozen empirical measure ``psi``:

    velocity(X, L, psi) -> (n, d)
    label_op(X, L, psi) -> (n, K), every row of zero total mass

A :class:`FieldPair` bundles both with the label space and dimension they act on,
an optional analytic positivity margin ``delta_of_R`` and a flag saying whether
the label operator accepts signed (non-probability) label arguments.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from . import rng as rngmod
from .errors import ConfigurationError, UsageError
from .measures import (
    AgentState,
    EmpiricalMeasure,
    LabelMeasure,
    LabelSpace,
    ZERO_MASS,
    bl_norm_rows,
    w1_product,
)

VelocityFn = Callable[[np.ndarray, np.ndarray, EmpiricalMeasure], np.ndarray]
LabelOpFn = Callable[[np.ndarray, np.ndarray, EmpiricalMeasure], np.ndarray]


@dataclass(frozen=True)
class FieldPair:
    velocity: VelocityFn
    label_op: LabelOpFn
    space: LabelSpace
    d: int
    delta_of_R: Callable[[float], float] | None = None
    accepts_signed: bool = True
    name: str = "custom"

    def v(self, y: AgentState, psi: EmpiricalMeasure) -> np.ndarray:
        return self.velocity(y.x[None, :], y.lam.weights[None, :], psi)[0]

    def T(self, y: AgentState, psi: EmpiricalMeasure) -> LabelMeasure:
        w = self.label_op(y.x[None, :], y.lam.weights[None, :], psi)[0]
        return LabelMeasure(self.space, w, ZERO_MASS)


# ---------------------------------------------------------------------------
# the linear model used for the spiking illustration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LinearFieldParams:
    a: float = 0.5
    b: float = 0.3
    c: float = 0.2
    d_: float = 0.4
    e: float = 0.2
    f: float = 0.1

    def __post_init__(self):
        for k, v in self.__dict__.items():
            if not np.isfinite(v):
                raise UsageError(f"coefficient {k} must be finite")


def _mean_label(L: np.ndarray, space: LabelSpace) -> np.ndarray:
    return L @ space.require_coords()


def _need_1d(X: np.ndarray) -> None:
    if X.shape[1] != 1:
        raise UsageError(f"linear fields are one-dimensional, got d={X.shape[1]}")


def linear_velocity_batch(p: LinearFieldParams, X, L, psi: EmpiricalMeasure) -> np.ndarray:
    _need_1d(X)
    m = _mean_label(L, psi.space)
    return p.a * X + p.b * m[:, None] + p.c * psi.X.mean()


def tilt_direction(space: LabelSpace) -> np.ndarray:
    """Zero-mass direction (delta_umax - delta_umin) / d(umin, umax)."""
    u = space.require_coords()
    e0 = np.zeros(space.K)
    if space.K < 2:
        return e0
    hi, lo = int(np.argmax(u)), int(np.argmin(u))
    e0[hi] += 1.0
    e0[lo] -= 1.0
    return e0 / space.dist[hi, lo]


def linear_label_op_batch(p: LinearFieldParams, X, L, psi: EmpiricalMeasure) -> np.ndarray:
    _need_1d(X)
    xbar = psi.X.mean()
    s = p.d_ * X[:, 0] + p.e * _mean_label(L, psi.space) + p.f * xbar
    s_bar = p.d_ * xbar + p.e * _mean_label(psi.L, psi.space).mean() + p.f * xbar
    return (s - s_bar)[:, None] * tilt_direction(psi.space)[None, :]


def linear_velocity(params: LinearFieldParams, y: AgentState, psi: EmpiricalMeasure) -> np.ndarray:
    """a*x + b*mean(lambda) + c*mean position of psi, for d = 1."""
    if y.d != 1:
        raise UsageError(f"linear velocity needs d = 1, got {y.d}")
    return linear_velocity_batch(params, y.x[None, :], y.lam.weights[None, :], psi)[0]


def linear_label_op(params: LinearFieldParams, y: AgentState, psi: EmpiricalMeasure) -> LabelMeasure:
    """Scalar drift d*x + e*mean(lambda) + f*mean position, lifted along the tilt
    direction and centred by its average over the ensemble."""
    if y.d != 1:
        raise UsageError(f"linear label operator needs d = 1, got {y.d}")
    w = linear_label_op_batch(params, y.x[None, :], y.lam.weights[None, :], psi)[0]
    return LabelMeasure(psi.space, w, ZERO_MASS)


# ---------------------------------------------------------------------------
# kernel operator: weight at u_k is the psi-average of alpha(u_k, z)
# ---------------------------------------------------------------------------

AlphaFn = Callable[[np.ndarray, np.ndarray, LabelSpace], np.ndarray]


@dataclass(frozen=True)
class KernelOperatorSpec:
    """``alpha(X, L, space)`` returns the (N, K) matrix alpha(u_k, z_i)."""

    alpha: AlphaFn
    beta: np.ndarray
    space: LabelSpace

    @property
    def mu(self) -> LabelMeasure:
        return LabelMeasure(self.space, self.beta, "signed")


def kernel_weights(spec: KernelOperatorSpec, psi: EmpiricalMeasure) -> np.ndarray:
    A = np.asarray(spec.alpha(psi.X, psi.L, psi.space), dtype=float).mean(axis=0)
    return A - A.mean()


def kernel_label_op(spec: KernelOperatorSpec, y: AgentState | None, psi: EmpiricalMeasure) -> LabelMeasure:
    """Psi-average of alpha at each atom, shifted uniformly to zero total mass."""
    return LabelMeasure(psi.space, kernel_weights(spec, psi), ZERO_MASS)


def mu_pairing_residual(spec: KernelOperatorSpec, psi: EmpiricalMeasure) -> float:
    """Integral of the unshifted kernel average against mu = sum beta_k delta_{u_k}."""
    A = np.asarray(spec.alpha(psi.X, psi.L, psi.space), dtype=float).mean(axis=0)
    return float(np.dot(spec.beta, A))


def moment_alpha(gain: float, center: float = 0.0) -> AlphaFn:
    """alpha(u_k, (x, lambda)) = gain * u_k * (x_1 - center); Lipschitz in z."""

    def alpha(X, L, space):
        return gain * (X[:, :1] - center) * space.require_coords()[None, :]

    return alpha


# ---------------------------------------------------------------------------
# registry
# ---------------------------------------------------------------------------


def _zero_velocity(params, space, d):
    return lambda X, L, psi: np.zeros_like(X)


def _constant_velocity(params, space, d):
    c = np.broadcast_to(np.asarray(params.get("c", 0.0), dtype=float), (d,)).copy()
    return lambda X, L, psi: np.broadcast_to(c, X.shape).copy()


def _ou_velocity(params, space, d):
    k = float(params.get("kappa", 1.0))
    return lambda X, L, psi: -k * X


def _linear_velocity(params, space, d):
    if d != 1:
        raise ConfigurationError("velocity 'linear' needs d = 1")
    space.require_coords()
    p = linear_params(params)
    return lambda X, L, psi: linear_velocity_batch(p, X, L, psi)


def linear_params(params: Mapping) -> LinearFieldParams:
    keys = {"a": "a", "b": "b", "c": "c", "d": "d_", "d_": "d_", "e": "e", "f": "f"}
    kw = {keys[k]: float(v) for k, v in params.items() if k in keys}
    return LinearFieldParams(**kw)


def _zero_op(params, space, d):
    return (lambda X, L, psi: np.zeros_like(L)), (lambda R: 0.0), True


def _constant_op(params, space, d):
    w = np.asarray(params.get("weights", np.zeros(space.K)), dtype=float)
    if w.shape != (space.K,) or abs(w.sum()) > 1e-12:
        raise ConfigurationError("constant label operator needs K weights summing to 0")
    return (lambda X, L, psi: np.broadcast_to(w, L.shape).copy()), None, True


def _linear_op(params, space, d):
    if d != 1:
        raise ConfigurationError("label operator 'linear' needs d = 1")
    space.require_coords()
    p = linear_params(params)
    return (lambda X, L, psi: linear_label_op_batch(p, X, L, psi)), None, True


def _kernel_moment_op(params, space, d):
    space.require_coords()
    gain = float(params.get("gain", 0.5))
    spec = KernelOperatorSpec(moment_alpha(gain, float(params.get("center", 0.0))),
                              np.asarray(params.get("beta", np.ones(space.K)), dtype=float), space)

    def op(X, L, psi):
        return np.broadcast_to(kernel_weights(spec, psi), L.shape).copy()

    return op, None, True


def _consensus_op(params, space, d):
    # kappa * (population mean label - own label): B4 holds with delta = kappa
    k = float(params.get("kappa", 1.0))

    def op(X, L, psi):
        return k * (psi.L.mean(axis=0)[None, :] - L)

    return op, (lambda R: k), True


def _replicator_op(params, space, d):
    # lambda_k * (f_k - <lambda, f>), f_k = gain * u_k * x_1; vanishes where lambda_k = 0
    gain = float(params.get("gain", 1.0))
    u = space.require_coords()

    def op(X, L, psi):
        F = gain * X[:, :1] * u[None, :]
        return L * (F - (L * F).sum(axis=1, keepdims=True))

    umax = float(np.abs(u).max())
    return op, (lambda R: 2.0 * abs(gain) * umax * max(R, 0.0)), False


VELOCITIES: dict[str, Callable] = {
    "zero": _zero_velocity,
    "constant": _constant_velocity,
    "ou": _ou_velocity,
    "linear": _linear_velocity,
}

LABEL_OPS: dict[str, Callable] = {
    "zero": _zero_op,
    "constant": _constant_op,
    "linear": _linear_op,
    "kernel-moment": _kernel_moment_op,
    "consensus": _consensus_op,
    "replicator": _replicator_op,
}


def register_velocity(name: str, factory: Callable) -> None:
    """factory(params, space, d) -> velocity function."""
    VELOCITIES[name] = factory


def register_label_op(name: str, factory: Callable) -> None:
    """factory(params, space, d) -> (label_op, delta_of_R or None, accepts_signed)."""
    LABEL_OPS[name] = factory


def build_field(velocity: str, label_op: str, space: LabelSpace, d: int,
                params: Mapping | None = None) -> FieldPair:
    params = dict(params or {})
    if velocity not in VELOCITIES:
        raise ConfigurationError(f"unknown velocity field {velocity!r}; known: {sorted(VELOCITIES)}")
    if label_op not in LABEL_OPS:
        raise ConfigurationError(f"unknown label operator {label_op!r}; known: {sorted(LABEL_OPS)}")
    v = VELOCITIES[velocity](params, space, d)
    op, delta, signed = LABEL_OPS[label_op](params, space, d)
    return FieldPair(v, op, space, d, delta, signed, name=f"{velocity}/{label_op}")


def zero_field(space: LabelSpace, d: int = 1) -> FieldPair:
    return build_field("zero", "zero", space, d)


# ---------------------------------------------------------------------------
# probes
# ---------------------------------------------------------------------------


def _sample_labels(g: np.random.Generator, n: int, K: int, floor: float = 0.0) -> np.ndarray:
    floor = min(floor, 1.0 / K)
    return floor + (1.0 - K * floor) * g.dirichlet(np.ones(K), size=n)


def _sample_positions(g: np.random.Generator, n: int, d: int, rmax: float) -> np.ndarray:
    direction = g.standard_normal((n, d))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    r = rmax * g.uniform(0, 1, size=(n, 1)) ** (1.0 / d)
    return direction * r


def _sample_ball_ensemble(g, n, fp: FieldPair, R: float, floor: float = 0.0) -> EmpiricalMeasure:
    # ||y|| = |x| + 1 for probability labels, so |x| <= R - 1 keeps y inside B_R
    X = _sample_positions(g, n, fp.d, max(R - 1.0, 0.0))
    return EmpiricalMeasure(X, _sample_labels(g, n, fp.space.K, floor), fp.space)


def _perturb(g, E: EmpiricalMeasure, R: float, scale: float) -> EmpiricalMeasure:
    X = E.X.copy()
    L = E.L.copy()
    n = E.N
    if g.uniform() < 0.7:
        X = X + scale * g.standard_normal(X.shape)
        nrm = np.linalg.norm(X, axis=1, keepdims=True)
        lim = max(R - 1.0, 0.0)
        X = np.where(nrm > lim, X * lim / np.maximum(nrm, 1e-300), X)
    if g.uniform() < 0.7:
        rho = min(1.0, scale)
        L = (1 - rho) * L + rho * g.dirichlet(np.ones(E.space.K), size=n)
    return EmpiricalMeasure(X, L, E.space)


def probe_lipschitz(fp: FieldPair, R: float, n_samples: int, rng_seed: int,
                    psi_size: int = 6) -> tuple[float, float]:
    """Largest observed difference quotients of v and T on B_R.

    Returns (L_v_hat, L_T_hat), lower bounds on the true local Lipschitz constants.
    Sample i depends only on (rng_seed, i), so the estimate is nondecreasing in
    ``n_samples``.
    """
    if R <= 0 or n_samples < 2:
        raise UsageError("probe_lipschitz needs R > 0 and n_samples >= 2")
    Lv = LT = 0.0
    for i in range(n_samples):
        g = rngmod.stream(rng_seed, rngmod.PROBE, i)
        scale = 10.0 ** g.uniform(-3, 0)
        psi1 = _sample_ball_ensemble(g, psi_size, fp, R)
        psi2 = psi1 if g.uniform() < 0.5 else _perturb(g, psi1, R, scale)
        ys = _sample_ball_ensemble(g, 1, fp, R)
        y2 = _perturb(g, ys, R, scale)
        x1, l1, x2, l2 = ys.X, ys.L, y2.X, y2.L
        dy = float(np.linalg.norm(x1 - x2) + bl_norm_rows(l1 - l2, fp.space)[0])
        dpsi = 0.0 if psi2 is psi1 else w1_product(psi1, psi2)
        v11 = fp.velocity(x1, l1, psi1)[0]
        if dy > 0:
            Lv = max(Lv, float(np.linalg.norm(v11 - fp.velocity(x2, l2, psi1)[0])) / dy)
        den = dy + dpsi
        if den > 0:
            Lv = max(Lv, float(np.linalg.norm(v11 - fp.velocity(x2, l2, psi2)[0])) / den)
            dT = fp.label_op(x1, l1, psi1) - fp.label_op(x2, l2, psi2)
            LT = max(LT, float(bl_norm_rows(dT, fp.space)[0]) / den)
    return Lv, LT


def probe_growth(fp: FieldPair, n_samples: int, rng_seed: int, psi_size: int = 6,
                 max_radius: float = 50.0) -> tuple[float, float]:
    """Largest observed |v| / (1 + ||y|| + m1) and ||T||_BL / (1 + |x| + m1)."""
    if n_samples < 1:
        raise UsageError("probe_growth needs n_samples >= 1")
    Mv = MT = 0.0
    for i in range(n_samples):
        g = rngmod.stream(rng_seed, rngmod.PROBE, 10_000_000 + i)
        R = max_radius ** g.uniform(0, 1)
        psi = _sample_ball_ensemble(g, psi_size, fp, 1.0 + R)
        y = _sample_ball_ensemble(g, 1, fp, 1.0 + R * g.uniform())
        m1 = psi.m1()
        xn = float(np.linalg.norm(y.X[0]))
        v = fp.velocity(y.X, y.L, psi)[0]
        T = fp.label_op(y.X, y.L, psi)
        Mv = max(Mv, float(np.linalg.norm(v)) / (1.0 + xn + 1.0 + m1))
        MT = max(MT, float(bl_norm_rows(T, fp.space)[0]) / (1.0 + xn + m1))
    return Mv, MT


def probe_delta(fp: FieldPair, R: float, n_samples: int = 400, rng_seed: int = 0,
                lam_floor: float = 1e-6, psi_size: int = 6) -> float:
    """Positivity margin estimate: twice the largest -T_k / lambda_k seen on B_R.

    Label samples have every weight >= ``lam_floor``; only entries with
    lambda_k >= 1e-6 enter the ratio.
    """
    worst = 0.0
    for i in range(n_samples):
        g = rngmod.stream(rng_seed, rngmod.PROBE, 20_000_000 + i)
        psi = _sample_ball_ensemble(g, psi_size, fp, R, lam_floor)
        y = _sample_ball_ensemble(g, 4, fp, R, lam_floor)
        T = fp.label_op(y.X, y.L, psi)
        mask = y.L >= 1e-6
        ratio = np.where(mask, -T / np.where(mask, y.L, 1.0), -np.inf)
        worst = max(worst, float(ratio.max()))
    return 2.0 * worst


def delta_R(fp: FieldPair, R: float, lam_floor: float = 1e-6, n_samples: int = 400,
            rng_seed: int = 0) -> float:
    """Declared positivity margin if the field has one, otherwise the probe."""
    if fp.delta_of_R is not None:
        return float(fp.delta_of_R(R))
    return probe_delta(fp, R, n_samples, rng_seed, lam_floor)


def check_zero_mass(fp: FieldPair, X, L, psi: EmpiricalMeasure) -> float:
    """Largest |total mass| of the operator output over a batch."""
    return float(np.abs(fp.label_op(X, L, psi).sum(axis=1)).max())
