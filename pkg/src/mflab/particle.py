"""N-agent time stepping and the fixed-noise Picard solver.

Positions follow explicit Euler-Maruyama.  Labels follow the exponential
relaxation toward g = lambda + theta * T(y, psi):

    lambda' = exp(-dt/theta) * lambda + (1 - exp(-dt/theta)) * g

which stays a probability vector whenever g does, i.e. whenever
theta * delta_R <= 1 for the operator's positivity margin delta_R.  All field
evaluations inside one step see the empirical measure frozen at step start.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import rng as rngmod
from .errors import ConfigurationError, InvariantError, UsageError
from .fields import FieldPair, delta_R
from .measures import AgentState, EmpiricalMeasure, LabelSpace, bl_norm_rows, clean_probability

log = logging.getLogger(__name__)

G_TOL = 1e-10
FEASIBILITY_MODES = ("probe", "runtime", "adaptive")


@dataclass(frozen=True)
class SimConfig:
    N: int
    d: int
    dt: float
    T: float
    sigma: float
    field: FieldPair
    theta: float | None = None
    seed: int = 0
    # radius and label floor used when delta_R has to be probed
    probe_radius: float | None = None
    lam_floor: float = 1e-6
    # 'probe': explicit theta must satisfy theta * delta_R_hat <= 1 up front.
    # 'runtime': an explicit theta is only checked step by step (g >= 0), for
    # operators whose positivity margin blows up at the simplex boundary.
    # 'adaptive': like 'runtime', but each agent's theta is capped at half of
    # the inverse positivity margin of its current state, so g >= lambda / 2.
    feasibility: str = "probe"

    def __post_init__(self):
        if self.N < 1:
            raise ConfigurationError("N must be positive")
        if self.d != self.field.d:
            raise ConfigurationError(f"d={self.d} but field acts in d={self.field.d}")
        if not self.dt > 0:
            raise ConfigurationError("dt must be positive")
        if not self.T >= self.dt:
            raise ConfigurationError("T must be at least dt")
        if not self.sigma >= 0:
            raise ConfigurationError("sigma must be nonnegative")
        if self.theta is not None and not self.theta > 0:
            raise ConfigurationError("theta must be positive")
        if self.feasibility not in FEASIBILITY_MODES:
            raise ConfigurationError(
                f"feasibility must be one of {FEASIBILITY_MODES}, got {self.feasibility!r}")
        if self.feasibility != "probe" and self.theta is None:
            raise ConfigurationError(f"feasibility={self.feasibility!r} needs an explicit theta")
        n = round(self.T / self.dt)
        if abs(n * self.dt - self.T) > 1e-9 * max(1.0, self.T):
            raise ConfigurationError(f"T={self.T} is not a whole number of steps dt={self.dt}")

    @property
    def n_steps(self) -> int:
        return int(round(self.T / self.dt))

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.dt


def probe_radius_for(initial: EmpiricalMeasure) -> float:
    return max(2.0, 2.0 * float(np.linalg.norm(initial.X, axis=1).max() + 1.0))


def resolve_theta(cfg: SimConfig, initial: EmpiricalMeasure) -> tuple[float, float]:
    """Return (theta, delta_R) with theta * delta_R <= 1 checked.

    Without an explicit theta the largest feasible value 1/delta_R is used
    (10*dt when the operator has no negative part at all).  In 'runtime'
    feasibility mode the probe is reported but not enforced.
    """
    R = cfg.probe_radius or probe_radius_for(initial)
    delta = delta_R(cfg.field, R, cfg.lam_floor, rng_seed=cfg.seed)
    if cfg.theta is None:
        theta = 1.0 / delta if delta > 0 else 10.0 * cfg.dt
    else:
        theta = cfg.theta
        if cfg.feasibility == "probe" and theta * delta > 1.0 + 1e-12:
            raise ConfigurationError(
                f"theta={theta:g} too large for field's delta_R={delta:g} (need theta*delta_R <= 1)")
    return theta, delta


@dataclass
class Trajectory:
    times: np.ndarray
    X: np.ndarray  # (n_t, N, d)
    L: np.ndarray  # (n_t, N, K)
    noise: np.ndarray  # (n_t - 1, N, d)
    space: LabelSpace
    meta: dict = field(default_factory=dict)

    @property
    def N(self) -> int:
        return self.X.shape[1]

    def at(self, k: int) -> EmpiricalMeasure:
        return EmpiricalMeasure(self.X[k], self.L[k], self.space)

    def index_of(self, t: float) -> int:
        k = int(round(t / (self.times[1] - self.times[0]))) if len(self.times) > 1 else 0
        if not 0 <= k < len(self.times) or abs(self.times[k] - t) > 1e-9 * max(1.0, abs(t)):
            raise UsageError(f"t={t} is not on the trajectory grid")
        return k

    def states(self, k: int) -> list[AgentState]:
        return self.at(k).agents

    def label_violation(self) -> float:
        neg = max(0.0, -float(self.L.min()))
        mass = float(np.abs(self.L.sum(axis=2) - 1.0).max())
        return max(neg, mass)


# ---------------------------------------------------------------------------
# one step
# ---------------------------------------------------------------------------


def local_theta(L: np.ndarray, T: np.ndarray, theta: float) -> np.ndarray:
    """Per-row theta capped at 1 / (2 * max_k(-T_k / L_k)), shape (n, 1).

    Rows with no negative entry in T keep ``theta``.  A row pushing mass out
    of an empty atom gets theta = 0 and its label stays put for the step.
    """
    neg = np.maximum(-T, 0.0)
    with np.errstate(all="ignore"):
        ratio = np.where(neg > 0, neg / np.maximum(L, 0.0), 0.0)
    margin = ratio.max(axis=1, keepdims=True)
    with np.errstate(divide="ignore"):
        cap = np.where(margin > 0, 0.5 / margin, np.inf)
    return np.minimum(theta, cap)


def relax_labels(L: np.ndarray, T: np.ndarray, dt: float, theta) -> np.ndarray:
    """Exponential relaxation of each label row toward g = L + theta * T.

    ``theta`` is a scalar or a per-row (n, 1) array; rows with theta = 0 are
    left unchanged.
    """
    if np.ndim(theta):
        th = np.asarray(theta, dtype=float)
        safe = np.where(th > 0, th, 1.0)
        G = L + th * T
        rho = np.where(th > 0, -np.expm1(-dt / safe), 0.0)
        return clean_probability(L + rho * (np.maximum(G, 0.0) - L))
    G = L + theta * T
    if G.min() < -G_TOL:
        raise ConfigurationError(
            f"theta too large for field's delta_R: g has entry {G.min():.3e} < -{G_TOL:g}")
    G = clean_probability(G, G_TOL)
    rho = -np.expm1(-dt / theta)
    return clean_probability(L + rho * (G - L))


def step_arrays(X: np.ndarray, L: np.ndarray, fp: FieldPair, dt: float, sigma: float,
                theta: float, noise: np.ndarray,
                label_shift: np.ndarray | None = None,
                adaptive: bool = False) -> tuple[np.ndarray, np.ndarray]:
    psi = EmpiricalMeasure(X, L, fp.space)
    V = fp.velocity(psi.X, psi.L, psi)
    arg = psi.L if label_shift is None else psi.L + label_shift
    T = fp.label_op(psi.X, arg, psi)
    Xn = X + V * dt + np.sqrt(2.0 * sigma) * noise
    th = local_theta(L, T, theta) if adaptive else theta
    return Xn, relax_labels(L, T, dt, th)


def step(states: list[AgentState], fp: FieldPair, dt: float, sigma: float, theta: float,
         noise: np.ndarray) -> list[AgentState]:
    """Advance a list of agent states by one step with the given (N, d) increments."""
    psi = EmpiricalMeasure.from_agents(states)
    noise = np.asarray(noise, dtype=float).reshape(psi.N, psi.d)
    Xn, Ln = step_arrays(psi.X, psi.L, fp, dt, sigma, theta, noise)
    return EmpiricalMeasure(Xn, Ln, fp.space).agents


# ---------------------------------------------------------------------------
# full runs
# ---------------------------------------------------------------------------


def _as_ensemble(initial) -> EmpiricalMeasure:
    if isinstance(initial, EmpiricalMeasure):
        return initial
    return EmpiricalMeasure.from_agents(list(initial))


def simulate(cfg: SimConfig, initial, noise: np.ndarray | None = None) -> Trajectory:
    """Run the particle system on the configured grid.

    Deterministic in (cfg.seed, initial, cfg).  ``noise`` overrides the seeded
    Brownian increments (shape (n_steps, N, d)).
    """
    psi0 = _as_ensemble(initial)
    if psi0.N != cfg.N or psi0.d != cfg.d:
        raise UsageError(f"initial ensemble is N={psi0.N}, d={psi0.d}; config says N={cfg.N}, d={cfg.d}")
    theta, delta = resolve_theta(cfg, psi0)
    n = cfg.n_steps
    if noise is None:
        noise = rngmod.brownian_increments(cfg.seed, n, cfg.N, cfg.d, cfg.dt)
    X = np.empty((n + 1, cfg.N, cfg.d))
    L = np.empty((n + 1, cfg.N, cfg.field.space.K))
    X[0], L[0] = psi0.X, psi0.L
    for k in range(n):
        try:
            X[k + 1], L[k + 1] = step_arrays(X[k], L[k], cfg.field, cfg.dt, cfg.sigma, theta, noise[k],
                                             adaptive=cfg.feasibility == "adaptive")
        except (ConfigurationError, InvariantError) as exc:
            raise type(exc)(f"step {k} (t={k * cfg.dt:g}): {exc}") from exc
    return Trajectory(cfg.times, X, L, noise, cfg.field.space,
                      meta={"theta": theta, "delta_R": delta, "seed": cfg.seed})


def picard_solve(cfg: SimConfig, initial, n_iters: int,
                 noise: np.ndarray | None = None) -> tuple[Trajectory, list[float]]:
    """Successive substitution on a fixed Brownian path.

    Iterate n+1 integrates the velocity and the exponential label kernel along
    iterate n (including iterate n's empirical measures).  Iterate 0 is the
    constant path at the initial condition.  Returns the final iterate and
    sup_t mean_i ||Y_{n+1}^i(t) - Y_n^i(t)|| for each iteration.
    """
    if n_iters < 1:
        raise UsageError("n_iters must be positive")
    if cfg.feasibility == "adaptive":
        raise UsageError("the Picard solver needs a fixed theta; use feasibility 'probe' or 'runtime'")
    psi0 = _as_ensemble(initial)
    theta, delta = resolve_theta(cfg, psi0)
    n, dt, fp = cfg.n_steps, cfg.dt, cfg.field
    if noise is None:
        noise = rngmod.brownian_increments(cfg.seed, n, cfg.N, cfg.d, dt)
    rho = -np.expm1(-dt / theta)
    X = np.broadcast_to(psi0.X, (n + 1,) + psi0.X.shape).copy()
    L = np.broadcast_to(psi0.L, (n + 1,) + psi0.L.shape).copy()
    shocks = np.sqrt(2.0 * cfg.sigma) * noise
    diffs: list[float] = []
    for it in range(n_iters):
        V = np.empty((n,) + psi0.X.shape)
        G = np.empty((n,) + psi0.L.shape)
        for k in range(n):
            psi = EmpiricalMeasure(X[k], L[k], fp.space)
            V[k] = fp.velocity(psi.X, psi.L, psi)
            G[k] = L[k] + theta * fp.label_op(psi.X, psi.L, psi)
        if G.min() < -G_TOL:
            raise ConfigurationError(
                f"iteration {it}: theta too large for field's delta_R (g min {G.min():.3e})")
        G = np.where(G < 0, 0.0, G)
        Xn = np.empty_like(X)
        Xn[0] = psi0.X
        Xn[1:] = psi0.X + np.cumsum(V * dt + shocks, axis=0)
        Ln = np.empty_like(L)
        Ln[0] = psi0.L
        for k in range(n):
            Ln[k + 1] = Ln[k] + rho * (G[k] - Ln[k])
        dX = np.linalg.norm(Xn - X, axis=2)
        dL = bl_norm_rows((Ln - L).reshape(-1, L.shape[2]), fp.space).reshape(dX.shape)
        diffs.append(float((dX + dL).mean(axis=1).max()))
        X, L = Xn, Ln
    traj = Trajectory(cfg.times, X, clean_probability(L), noise, fp.space,
                      meta={"theta": theta, "delta_R": delta, "seed": cfg.seed})
    return traj, diffs


# ---------------------------------------------------------------------------
# initial laws
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class InitialLaw:
    """Distribution of the initial agent states.

    positions: 'uniform' on [x_lo, x_hi]^d, 'normal' with x_mean and x_std, or
    'constant' at x_mean.  labels: 'uniform' (every agent at the uniform
    measure), 'dirichlet' with concentration lam_alpha mixed toward uniform so
    all weights are at least lam_min, or 'dirac' at atom lam_atom.
    """

    x_dist: str = "uniform"
    x_lo: float = 0.0
    x_hi: float = 1.0
    x_mean: float = 0.0
    x_std: float = 1.0
    labels: str = "uniform"
    lam_alpha: float = 1.0
    lam_min: float = 0.0
    lam_atom: int = 0

    def sample(self, N: int, space: LabelSpace, d: int, seed: int, index: int = 0) -> EmpiricalMeasure:
        g = rngmod.stream(seed, rngmod.INITIAL, index)
        if self.x_dist == "uniform":
            X = g.uniform(self.x_lo, self.x_hi, size=(N, d))
        elif self.x_dist == "normal":
            X = self.x_mean + self.x_std * g.standard_normal((N, d))
        elif self.x_dist == "constant":
            X = np.full((N, d), self.x_mean)
        else:
            raise ConfigurationError(f"unknown position law {self.x_dist!r}")
        K = space.K
        if self.labels == "uniform":
            L = np.full((N, K), 1.0 / K)
        elif self.labels == "dirichlet":
            lo = min(self.lam_min, 1.0 / K)
            L = lo + (1.0 - K * lo) * g.dirichlet(np.full(K, self.lam_alpha), size=N)
        elif self.labels == "dirac":
            L = np.zeros((N, K))
            L[:, self.lam_atom] = 1.0
        else:
            raise ConfigurationError(f"unknown label law {self.labels!r}")
        return EmpiricalMeasure(X, clean_probability(L), space)


def with_seed(cfg: SimConfig, seed: int, **changes) -> SimConfig:
    return replace(cfg, seed=seed, **changes)
