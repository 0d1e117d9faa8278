"""Integrate-and-fire dynamics on top of the particle stepper.

After each ordinary step every agent whose new potential reached the threshold
``X_F`` is reset to ``X_R`` and a spike is recorded at the new grid time.  The
label update of that step is computed before the reset, so label measures stay
continuous across spikes and only their time derivative jumps.

The heterogeneous-noise variant perturbs the label argument of the operator by
a shared random signed measure R(t) = sum_h a_h W_h(t) e_h with zero mass.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import rng as rngmod
from .errors import ConfigurationError, InvariantError, UsageError
from .fields import FieldPair
from .measures import AgentState, EmpiricalMeasure, LabelMeasure, LabelSpace, ZERO_MASS
from .particle import SimConfig, Trajectory, _as_ensemble, resolve_theta, step_arrays

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# heterogeneous label noise
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class HeterogeneousNoiseSpec:
    """Truncated series R(t) = sum_{h < H} a[h] * W_h(t) * e[h].

    ``e`` has shape (H, K); every row must have zero total mass.  The Brownian
    paths W_h use label-noise streams ``seed_offset + h``.
    """

    a: np.ndarray
    e: np.ndarray
    seed_offset: int = 0

    def __post_init__(self):
        a = np.asarray(self.a, dtype=float).reshape(-1)
        e = np.atleast_2d(np.asarray(self.e, dtype=float))
        if e.shape[0] != a.size:
            raise ConfigurationError(f"{a.size} coefficients but {e.shape[0]} basis measures")
        if not np.all(np.isfinite(a)) or np.any(a < 0):
            raise ConfigurationError("noise coefficients a_h must be finite and nonnegative")
        if not np.all(np.isfinite(e)):
            raise ConfigurationError("basis measures must be finite")
        bad = np.abs(e.sum(axis=1)).max(initial=0.0)
        if bad > 1e-12:
            raise ConfigurationError(f"basis measure has total mass {bad:.3e}; must be zero")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "e", e)

    @property
    def H(self) -> int:
        return self.a.size

    def brownian(self, seed: int, n_steps: int, dt: float) -> np.ndarray:
        """W_h on the grid, shape (n_steps + 1, H), starting at 0."""
        W = np.zeros((n_steps + 1, self.H))
        for h in range(self.H):
            g = rngmod.stream(seed, rngmod.LABEL_NOISE, self.seed_offset + h)
            W[1:, h] = np.cumsum(g.standard_normal(n_steps) * np.sqrt(dt))
        return W

    def path(self, seed: int, n_steps: int, dt: float) -> np.ndarray:
        """R(t_k) as weight vectors, shape (n_steps + 1, K)."""
        return (self.brownian(seed, n_steps, dt) * self.a[None, :]) @ self.e


def default_noise_spec(space: LabelSpace, a0: float, H: int | None = None,
                       seed_offset: int = 0) -> HeterogeneousNoiseSpec:
    """Neighbouring-atom differences e_h = (delta_h - delta_{h+1}) / d(u_h, u_{h+1})
    with geometrically decaying a_h = a0 * 2**-h (h counted from 1)."""
    K = space.K
    H = K - 1 if H is None else H
    if not 0 <= H <= K - 1:
        raise ConfigurationError(f"H must lie in [0, {K - 1}] for {K} atoms")
    e = np.zeros((H, K))
    for h in range(H):
        e[h, h] = 1.0
        e[h, h + 1] = -1.0
        e[h] /= space.dist[h, h + 1]
    a = a0 * 2.0 ** -np.arange(1, H + 1)
    return HeterogeneousNoiseSpec(a, e, seed_offset)


def heterogeneous_label_drift(spec: HeterogeneousNoiseSpec, t_index: int, y: AgentState,
                              psi: EmpiricalMeasure, fp: FieldPair,
                              R: np.ndarray) -> LabelMeasure:
    """T_psi(x, lambda + R(t)) for one agent, with R the precomputed noise path."""
    if not fp.accepts_signed:
        raise ConfigurationError(f"field {fp.name} cannot take signed label arguments")
    if R.shape[1] != spec.e.shape[1]:
        raise UsageError("noise path does not match the label space")
    arg = y.lam.weights + R[t_index]
    w = fp.label_op(y.x[None, :], arg[None, :], psi)[0]
    return LabelMeasure(fp.space, w, ZERO_MASS)


# ---------------------------------------------------------------------------
# configuration and records
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SpikeConfig:
    base: SimConfig
    X_F: float = 0.7
    X_R: float = 0.01
    het: HeterogeneousNoiseSpec | None = None
    # optional bounded random threshold: X_F drawn once per run from U(lo, hi)
    X_F_range: tuple[float, float] | None = None

    def __post_init__(self):
        if self.base.d != 1:
            raise ConfigurationError("spiking dynamics need d = 1")
        if not (np.isfinite(self.X_F) and np.isfinite(self.X_R)):
            raise ConfigurationError("X_F and X_R must be finite")
        if not self.X_R < self.X_F:
            raise ConfigurationError(f"need X_R < X_F, got X_R={self.X_R}, X_F={self.X_F}")
        if self.X_F_range is not None:
            lo, hi = self.X_F_range
            if not (np.isfinite(lo) and np.isfinite(hi) and self.X_R < lo <= hi):
                raise ConfigurationError("X_F range must be finite with X_R < lo <= hi")
        if self.het is not None:
            if self.het.e.shape[1] != self.base.field.space.K:
                raise ConfigurationError("noise basis does not match the label space")
            if not self.base.field.accepts_signed:
                raise ConfigurationError(
                    f"field {self.base.field.name} cannot take signed label arguments")

    def threshold(self) -> float:
        if self.X_F_range is None:
            return float(self.X_F)
        lo, hi = self.X_F_range
        return float(rngmod.stream(self.base.seed, rngmod.THRESHOLD, 0).uniform(lo, hi))


@dataclass
class SpikeRecord:
    """Spikes as parallel arrays sorted by (time, agent)."""

    agents: np.ndarray
    times: np.ndarray
    steps: np.ndarray
    pre: np.ndarray  # potential before reset
    N: int
    T: float
    X_F: float
    max_overshoot: float = 0.0

    @property
    def spikes(self) -> list[tuple[int, float]]:
        return list(zip(self.agents.tolist(), self.times.tolist()))

    def __len__(self) -> int:
        return int(self.agents.size)

    def agent_times(self, i: int) -> np.ndarray:
        return self.times[self.agents == i]

    def intervals(self) -> dict[int, np.ndarray]:
        """Inter-spike intervals per agent (agents with fewer than 2 spikes omitted)."""
        out = {}
        for i in np.unique(self.agents):
            t = self.agent_times(int(i))
            if t.size > 1:
                out[int(i)] = np.diff(t)
        return out

    def check(self) -> None:
        for i in np.unique(self.agents):
            if np.any(np.diff(self.agent_times(int(i))) <= 0):
                raise InvariantError(f"spike times of agent {i} not strictly increasing")
        if self.pre.size and self.pre.min() < self.X_F:
            raise InvariantError("spike recorded below threshold")


@dataclass
class RateTable:
    bin_start: np.ndarray
    rate: np.ndarray
    width: np.ndarray


def raster_and_rates(record: SpikeRecord, bin: float) -> RateTable:
    """Population firing rate per time bin, spikes / (N * bin width).

    Bins are right-closed, (b, b + w], since spikes are stamped at the end of
    the step that produced them.  A trailing partial bin is normalised by its
    own width.
    """
    if not bin > 0:
        raise UsageError("bin width must be positive")
    n_full = int(np.floor(record.T / bin + 1e-9))
    edges = list(np.arange(n_full + 1) * bin)
    if record.T - edges[-1] > 1e-9 * max(1.0, record.T):
        edges.append(record.T)
    edges = np.asarray(edges)
    counts = np.zeros(edges.size - 1)
    if len(record):
        idx = np.searchsorted(edges, record.times - 1e-12 * max(1.0, record.T), side="right") - 1
        idx = np.clip(idx, 0, counts.size - 1)
        np.add.at(counts, idx, 1.0)
    widths = np.diff(edges)
    return RateTable(edges[:-1], counts / (record.N * widths), widths)


# ---------------------------------------------------------------------------
# stepping
# ---------------------------------------------------------------------------


def reset_potentials(X: np.ndarray, X_F: float, X_R: float) -> tuple[np.ndarray, np.ndarray]:
    """Return (reset positions, boolean mask of agents that fired)."""
    fired = X[:, 0] >= X_F
    if fired.any():
        X = X.copy()
        X[fired, 0] = X_R
    return X, fired


def spiking_step(states: list[AgentState], fp: FieldPair, cfg: SpikeConfig, noise: np.ndarray,
                 theta: float, t_next: float = 0.0,
                 label_shift: np.ndarray | None = None) -> tuple[list[AgentState], list[tuple[int, float]]]:
    """One particle step followed by threshold resets.

    Returns the new states and the (agent, t_next) pairs of agents that fired.
    """
    psi = EmpiricalMeasure.from_agents(states)
    if psi.d != 1:
        raise UsageError("spiking dynamics need d = 1")
    noise = np.asarray(noise, dtype=float).reshape(psi.N, 1)
    shift = None if label_shift is None else np.broadcast_to(label_shift, psi.L.shape)
    Xn, Ln = step_arrays(psi.X, psi.L, fp, cfg.base.dt, cfg.base.sigma, theta, noise, shift,
                         adaptive=cfg.base.feasibility == "adaptive")
    Xn, fired = reset_potentials(Xn, cfg.X_F, cfg.X_R)
    new = EmpiricalMeasure(Xn, Ln, fp.space).agents
    return new, [(int(i), float(t_next)) for i in np.flatnonzero(fired)]


def simulate_spiking(cfg: SpikeConfig, initial,
                     noise: np.ndarray | None = None) -> tuple[Trajectory, SpikeRecord]:
    """Run the reset system; the trajectory stores post-reset potentials."""
    base = cfg.base
    psi0 = _as_ensemble(initial)
    if psi0.N != base.N or psi0.d != 1:
        raise UsageError(f"initial ensemble is N={psi0.N}, d={psi0.d}; config says N={base.N}, d=1")
    theta, delta = resolve_theta(base, psi0)
    X_F = cfg.threshold()
    if cfg.X_R >= X_F:
        raise ConfigurationError(f"need X_R < X_F, got X_R={cfg.X_R}, X_F={X_F}")
    n = base.n_steps
    if noise is None:
        noise = rngmod.brownian_increments(base.seed, n, base.N, 1, base.dt)
    R = cfg.het.path(base.seed, n, base.dt) if cfg.het is not None else None
    X = np.empty((n + 1, base.N, 1))
    L = np.empty((n + 1, base.N, base.field.space.K))
    X[0], L[0] = psi0.X, psi0.L
    X[0], fired0 = reset_potentials(X[0], X_F, cfg.X_R)
    if fired0.any():
        log.warning("%d agents start at or above threshold and were reset", int(fired0.sum()))
    s_agents, s_steps, s_pre = [], [], []
    for k in range(n):
        shift = None if R is None else np.broadcast_to(R[k], L[k].shape)
        try:
            Xn, Ln = step_arrays(X[k], L[k], base.field, base.dt, base.sigma, theta, noise[k], shift,
                                 adaptive=base.feasibility == "adaptive")
        except (ConfigurationError, InvariantError) as exc:
            raise type(exc)(f"step {k} (t={k * base.dt:g}): {exc}") from exc
        pre = Xn[:, 0].copy()
        Xn, fired = reset_potentials(Xn, X_F, cfg.X_R)
        if fired.any():
            idx = np.flatnonzero(fired)
            s_agents.append(idx)
            s_steps.append(np.full(idx.size, k + 1))
            s_pre.append(pre[idx])
        X[k + 1], L[k + 1] = Xn, Ln
    agents = np.concatenate(s_agents) if s_agents else np.zeros(0, dtype=int)
    steps = np.concatenate(s_steps) if s_steps else np.zeros(0, dtype=int)
    pre = np.concatenate(s_pre) if s_pre else np.zeros(0)
    overshoot = float((pre - X_F).max()) if pre.size else 0.0
    if pre.size:
        log.debug("max threshold overshoot %.3e over %d spikes", overshoot, pre.size)
    record = SpikeRecord(agents, base.times[steps], steps, pre, base.N, base.T, X_F, overshoot)
    traj = Trajectory(base.times, X, L, noise, base.field.space,
                      meta={"theta": theta, "delta_R": delta, "seed": base.seed, "X_F": X_F,
                            "n_spikes": len(record), "max_overshoot": overshoot})
    if R is not None:
        traj.meta["label_noise_path"] = R
    return traj, record


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------


def kink_ratios(traj: Trajectory, record: SpikeRecord, phi: np.ndarray,
                window: int = 5) -> np.ndarray:
    """Derivative jump of <lambda_i, phi> at each spike relative to its
    pre-spike variation.

    With D(j) = (p[j+1] - p[j]) / dt the forward difference of the pairing
    trace p of the firing agent, the jump at spike step k is |D(k) - D(k-1)|
    and the local variation is the largest |D(j) - D(j-1)| over the ``window``
    steps before.  Spikes too close to the ends of the run or to another spike
    of the same agent are skipped.
    """
    dt = traj.times[1] - traj.times[0]
    n = traj.times.size - 1
    out = []
    last: dict[int, int] = {}
    for i, k in zip(record.agents.tolist(), record.steps.tolist()):
        prev = last.get(i, -10 ** 9)
        last[i] = k
        lo = k - window - 1
        if lo < 1 or k + 1 > n or prev >= lo - 1:
            continue
        p = traj.L[lo - 1:k + 2, i, :] @ phi
        D = np.diff(p) / dt  # D[m] corresponds to step lo - 1 + m
        jumps = np.abs(np.diff(D))  # jumps[m] at step lo + m
        jump = jumps[-1]
        var = jumps[:-1].max()
        out.append(jump / var if var > 0 else np.inf)
    return np.asarray(out)
