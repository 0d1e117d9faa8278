"""Numerical checks of the particle system's structural properties.

Each experiment returns an :class:`ExperimentReport`: a metrics table plus named
verdicts with the tolerance that was applied.  Replicates can run on a thread
pool; results are collected in submission order so thread count never changes
the output.
"""
from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import rng as rngmod
from .errors import UsageError
from .fields import FieldPair, probe_growth, probe_lipschitz
from .measures import EmpiricalMeasure, LabelSpace, bl_norm_rows, w1_product
from .particle import (
    InitialLaw,
    SimConfig,
    Trajectory,
    picard_solve,
    probe_radius_for,
    resolve_theta,
    simulate,
)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


@dataclass
class Verdict:
    invariant: str
    passed: bool
    detail: str = ""


@dataclass
class ExperimentReport:
    name: str
    parameters: dict
    columns: list[str]
    rows: list[list]
    verdicts: list[Verdict] = field(default_factory=list)
    runtime: float = 0.0
    extra: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(v.passed for v in self.verdicts)

    def column(self, name: str) -> np.ndarray:
        j = self.columns.index(name)
        return np.array([r[j] for r in self.rows], dtype=float)

    def to_csv(self, path) -> None:
        import csv

        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.columns)
            for r in self.rows:
                w.writerow([_fmt(v) for v in r])

    def to_text(self) -> str:
        lines = [f"experiment: {self.name}"]
        for k, v in self.parameters.items():
            lines.append(f"  {k} = {v}")
        for k, v in self.extra.items():
            if isinstance(v, (int, float, str, np.number)):
                lines.append(f"  {k}: {_fmt(v)}")
        lines.append(f"  runtime_s = {self.runtime:.3f}")
        for v in self.verdicts:
            lines.append(f"{'PASS' if v.passed else 'FAIL'} {v.invariant}: {v.detail}")
        lines.append(f"overall: {'PASS' if self.passed else 'FAIL'}")
        return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.17g}"
    return str(v)


def map_ordered(fn: Callable, items: Sequence, threads: int = 1) -> list:
    """``[fn(x) for x in items]``, optionally on a thread pool."""
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def fix_theta(cfg: SimConfig, initial: EmpiricalMeasure) -> SimConfig:
    """Freeze the probed theta (and its probe radius) into the config so that
    runs of different sizes share the same dynamics."""
    if cfg.theta is not None:
        return cfg
    R = cfg.probe_radius or probe_radius_for(initial)
    cfg = replace(cfg, probe_radius=R)
    theta, _ = resolve_theta(cfg, initial)
    return replace(cfg, theta=theta)


# ---------------------------------------------------------------------------
# cylinder test functions phi(x, lambda) = f(x) * g(<lambda, psi_1>, ..., <lambda, psi_m>)
# ---------------------------------------------------------------------------

F_FAMILIES = ("one", "poly", "gaussian")
G_FAMILIES = ("one", "sum", "square")


@dataclass(frozen=True)
class CylinderTestFunction:
    """f is 'one', 'poly' (c0 + w.x + q|x|^2) or 'gaussian'
    (exp(-|x - center|^2 / (2 width^2))); g is 'one', 'sum' (sum of pairings)
    or 'square' (sum of squared pairings).  ``psis`` has shape (m, K) and
    ``psi_lip`` holds the declared Lipschitz constant of each row."""

    space: LabelSpace
    f: str = "one"
    c0: float = 0.0
    w: tuple = ()
    q: float = 0.0
    center: tuple = ()
    width: float = 1.0
    g: str = "one"
    psis: np.ndarray | None = None
    psi_lip: tuple = ()
    name: str = "phi"

    def __post_init__(self):
        if self.f not in F_FAMILIES:
            raise UsageError(f"unknown f family {self.f!r}")
        if self.g not in G_FAMILIES:
            raise UsageError(f"unknown g family {self.g!r}")
        psis = np.zeros((0, self.space.K)) if self.psis is None else np.atleast_2d(
            np.asarray(self.psis, dtype=float))
        if psis.shape[1] != self.space.K:
            raise UsageError("each psi needs one value per atom")
        lips = np.asarray(self.psi_lip, dtype=float)
        if lips.size == 0:
            lips = np.array([_lipschitz_of(p, self.space) for p in psis])
        if lips.shape != (psis.shape[0],):
            raise UsageError("one Lipschitz constant per psi")
        for p, lip in zip(psis, lips):
            if _lipschitz_of(p, self.space) > lip + 1e-12:
                raise UsageError(f"psi {p} violates its declared Lipschitz constant {lip}")
        if self.g != "one" and psis.shape[0] == 0:
            raise UsageError(f"g={self.g!r} needs at least one psi")
        if self.width <= 0:
            raise UsageError("gaussian width must be positive")
        object.__setattr__(self, "psis", psis)
        object.__setattr__(self, "psi_lip", tuple(lips.tolist()))

    # f and its derivatives -------------------------------------------------
    def _vec(self, v, d):
        a = np.asarray(v, dtype=float)
        return np.zeros(d) if a.size == 0 else np.broadcast_to(a, (d,))

    def f_all(self, X: np.ndarray):
        """(f, grad f, laplacian f) at each row of X."""
        n, d = X.shape
        if self.f == "one":
            return np.ones(n), np.zeros((n, d)), np.zeros(n)
        if self.f == "poly":
            w = self._vec(self.w, d)
            val = self.c0 + X @ w + self.q * (X ** 2).sum(axis=1)
            return val, w[None, :] + 2.0 * self.q * X, np.full(n, 2.0 * self.q * d)
        c = self._vec(self.center, d)
        r = X - c[None, :]
        s2 = self.width ** 2
        r2 = (r ** 2).sum(axis=1)
        val = np.exp(-r2 / (2.0 * s2))
        return val, -r / s2 * val[:, None], (r2 / s2 ** 2 - d / s2) * val

    # g and its gradient ----------------------------------------------------
    def g_all(self, P: np.ndarray):
        n = P.shape[0]
        if self.g == "one":
            return np.ones(n), np.zeros_like(P)
        if self.g == "sum":
            return P.sum(axis=1), np.ones_like(P)
        return (P ** 2).sum(axis=1), 2.0 * P

    def __call__(self, X: np.ndarray, L: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(X)
        L = np.atleast_2d(L)
        return self.f_all(X)[0] * self.g_all(L @ self.psis.T)[0]


def _lipschitz_of(p: np.ndarray, space: LabelSpace) -> float:
    if space.K < 2:
        return 0.0
    diff = np.abs(p[:, None] - p[None, :])
    off = ~np.eye(space.K, dtype=bool)
    return float((diff[off] / space.dist[off]).max())


def generator_batch(phi: CylinderTestFunction, X: np.ndarray, L: np.ndarray,
                    psi: EmpiricalMeasure, fp: FieldPair, sigma: float,
                    V: np.ndarray | None = None, TL: np.ndarray | None = None) -> np.ndarray:
    """sigma * Lap_x phi + grad_x phi . v + sum_j d_j g * f * <T, psi_j> per row.

    ``V`` and ``TL`` may carry precomputed velocity and label-operator values.
    """
    f, gf, lf = phi.f_all(X)
    P = L @ phi.psis.T
    g, gg = phi.g_all(P)
    if V is None:
        V = fp.velocity(X, L, psi)
    out = sigma * lf * g + (gf * V).sum(axis=1) * g
    if phi.psis.shape[0]:
        if TL is None:
            TL = fp.label_op(X, L, psi)
        out = out + f * (gg * (TL @ phi.psis.T)).sum(axis=1)
    return out


def generator_apply(phi: CylinderTestFunction, y, psi: EmpiricalMeasure, fp: FieldPair,
                    sigma: float) -> float:
    """The generator L_psi phi evaluated at a single agent state."""
    return float(generator_batch(phi, y.x[None, :], y.lam.weights[None, :], psi, fp, sigma)[0])


def default_family(space: LabelSpace, d: int = 1) -> list[CylinderTestFunction]:
    """The registered test-function family used by the weak-form experiment."""
    u = space.coords if space.coords is not None else np.arange(space.K, dtype=float)
    u = np.asarray(u, dtype=float)
    # distance to the first atom: 1-Lipschitz and bounded by the diameter
    dist0 = space.dist[0].copy()
    return [
        CylinderTestFunction(space, f="poly", w=(1.0,) * d, name="x"),
        CylinderTestFunction(space, f="poly", q=1.0, name="|x|^2"),
        CylinderTestFunction(space, f="gaussian", center=(0.5,) * d, width=0.5, name="bump"),
        CylinderTestFunction(space, g="sum", psis=dist0[None, :], name="<lam,d0>"),
        CylinderTestFunction(space, f="poly", w=(1.0,) * d, g="sum", psis=u[None, :], name="x<lam,u>"),
        CylinderTestFunction(space, g="square", psis=dist0[None, :], name="<lam,d0>^2"),
    ]


# ---------------------------------------------------------------------------
# weak-form residual
# ---------------------------------------------------------------------------


def residual_trace(traj: Trajectory, phis: Sequence[CylinderTestFunction], fp: FieldPair,
                   sigma: float) -> np.ndarray:
    """Per-path residual r(t_k) = <L_k, phi> - <L_0, phi> - dt * sum_{s<k} <L_s, gen phi>,
    shape (n_phi, n_t)."""
    dt = traj.times[1] - traj.times[0]
    n_t = traj.times.size
    A = np.empty((len(phis), n_t))
    G = np.empty((len(phis), n_t))
    for k in range(n_t):
        psi = traj.at(k)
        if k < n_t - 1:
            V = fp.velocity(psi.X, psi.L, psi)
            TL = fp.label_op(psi.X, psi.L, psi)
        for j, phi in enumerate(phis):
            A[j, k] = phi(psi.X, psi.L).mean()
            if k < n_t - 1:
                G[j, k] = generator_batch(phi, psi.X, psi.L, psi, fp, sigma, V, TL).mean()
    r = A - A[:, :1]
    r[:, 1:] -= dt * np.cumsum(G[:, :-1], axis=1)
    return r


@dataclass
class WeakFormResult:
    times: np.ndarray
    names: list[str]
    residual: np.ndarray  # |mean residual|, (n_phi, n_t)

    @property
    def max(self) -> float:
        return float(self.residual.max())


def weak_form_residual(cfg: SimConfig, phis, n_paths: int, law: InitialLaw,
                       threads: int = 1) -> WeakFormResult:
    """Average the per-path residual over ``n_paths`` independent runs, each with
    its own initial draw and noise; returns the absolute averaged residual."""
    if isinstance(phis, CylinderTestFunction):
        phis = [phis]
    phis = list(phis)
    if n_paths < 1:
        raise UsageError("n_paths must be positive")
    space = cfg.field.space

    def one(p):
        s = rngmod.child_seed(cfg.seed, rngmod.REPLICATE, p)
        init = law.sample(cfg.N, space, cfg.d, s)
        c = replace(cfg, seed=s)
        return residual_trace(simulate(c, init), phis, cfg.field, cfg.sigma)

    traces = map_ordered(one, list(range(n_paths)), threads)
    mean = np.mean(traces, axis=0)
    return WeakFormResult(cfg.times, [p.name for p in phis], np.abs(mean))


def weak_form_report(cfg: SimConfig, phis, n_paths: int, law: InitialLaw,
                     tol: float | None = None, threads: int = 1) -> ExperimentReport:
    t0 = time.perf_counter()
    res = weak_form_residual(cfg, phis, n_paths, law, threads)
    rows = [[float(t)] + [float(v) for v in res.residual[:, k]] for k, t in enumerate(res.times)]
    rep = ExperimentReport("weakform", {"N": cfg.N, "dt": cfg.dt, "T": cfg.T, "sigma": cfg.sigma,
                                        "n_paths": n_paths, "field": cfg.field.name},
                           ["t"] + res.names, rows)
    rep.extra["max_residual"] = res.max
    if tol is not None:
        rep.verdicts.append(Verdict("weakform.residual_bound", res.max <= tol,
                                    f"max |r| = {res.max:.3e} vs tolerance {tol:.3e}"))
    rep.runtime = time.perf_counter() - t0
    return rep


# ---------------------------------------------------------------------------
# mean-field self-convergence
# ---------------------------------------------------------------------------


def fit_loglog_slope(Ns, values) -> float:
    Ns = np.asarray(Ns, dtype=float)
    values = np.asarray(values, dtype=float)
    ok = values > 0
    if ok.sum() < 2:
        return float("nan")
    return float(np.polyfit(np.log(Ns[ok]), np.log(values[ok]), 1)[0])


def meanfield_convergence(cfg: SimConfig, law: InitialLaw, Ns: Sequence[int],
                          t_checks: Sequence[float], n_reps: int, N_ref: int | None = None,
                          threads: int = 1) -> ExperimentReport:
    """W1 between the N-agent empirical measure and an independent N_ref-agent
    run at each checkpoint, median over ``n_reps`` seed pairs.

    With ``N_ref`` omitted the largest entry of ``Ns`` is the reference.
    """
    t0 = time.perf_counter()
    Ns = [int(n) for n in Ns]
    if any(b <= a for a, b in zip(Ns, Ns[1:])):
        raise UsageError("Ns must be strictly increasing")
    if N_ref is None:
        Ns, N_ref = Ns[:-1], Ns[-1]
    if not Ns:
        raise UsageError("need at least one N besides the reference")
    if N_ref < 2 * max(Ns):
        raise UsageError(f"reference N={N_ref} is too small; need at least 2 * {max(Ns)}")
    if n_reps < 1:
        raise UsageError("n_reps must be positive")
    space = cfg.field.space
    ref0 = law.sample(N_ref, space, cfg.d, rngmod.child_seed(cfg.seed, rngmod.REPLICATE, 0))
    cfg = fix_theta(replace(cfg, N=N_ref), ref0)
    ks = [cfg.times.searchsorted(t - 1e-12) for t in t_checks]
    for k, t in zip(ks, t_checks):
        if k >= cfg.times.size or abs(cfg.times[k] - t) > 1e-9:
            raise UsageError(f"checkpoint t={t} is not on the time grid")
    n_runs = len(Ns) + 1

    def run(job):
        r, j = job
        N = N_ref if j == len(Ns) else Ns[j]
        s = rngmod.child_seed(cfg.seed, rngmod.REPLICATE, r * n_runs + j)
        tr = simulate(replace(cfg, N=N, seed=s), law.sample(N, space, cfg.d, s))
        return [tr.at(k) for k in ks]

    jobs = [(r, j) for r in range(n_reps) for j in range(n_runs)]
    snaps = map_ordered(run, jobs, threads)
    W = np.empty((len(Ns), n_reps, len(ks)))
    for r in range(n_reps):
        ref = snaps[r * n_runs + len(Ns)]
        for j in range(len(Ns)):
            for c in range(len(ks)):
                W[j, r, c] = w1_product(snaps[r * n_runs + j][c], ref[c])
    med = np.median(W, axis=1)
    mean = W.mean(axis=1)
    rows = [[N] + [float(v) for v in med[j]] + [float(v) for v in mean[j]] for j, N in enumerate(Ns)]
    columns = (["N"] + [f"w1_median_t={t:g}" for t in t_checks]
               + [f"w1_mean_t={t:g}" for t in t_checks])
    rep = ExperimentReport("converge", {"Ns": Ns, "N_ref": N_ref, "t_checks": list(t_checks),
                                        "n_reps": n_reps, "dt": cfg.dt, "sigma": cfg.sigma,
                                        "field": cfg.field.name},
                           columns, rows)
    slopes = [fit_loglog_slope(Ns, med[:, c]) for c in range(len(ks))]
    for c, t in enumerate(t_checks):
        rep.extra[f"slope_t={t:g}"] = slopes[c]
        mono = bool(np.all(np.diff(med[:, c]) <= 0))
        rep.verdicts.append(Verdict("converge.monotone_in_N", mono,
                                    f"t={t:g}: median W1 {np.array2string(med[:, c], precision=4)}"))
    rep.extra["W1"] = W
    rep.extra["slopes"] = slopes
    rep.runtime = time.perf_counter() - t0
    return rep


# ---------------------------------------------------------------------------
# stability under synchronous coupling
# ---------------------------------------------------------------------------


def stability_constant(T: float, L_R: float) -> float:
    """C = 1 + exp(exp(T L_R)) * exp(T L_R)."""
    e = math.exp(T * L_R)
    return 1.0 + math.exp(e) * e


def stability_check(cfg: SimConfig, initial1: EmpiricalMeasure, initial2: EmpiricalMeasure,
                    t_checks: Sequence[float], n_probe: int = 200,
                    L_R: float | None = None) -> ExperimentReport:
    """Run both ensembles on the same Brownian path and compare
    W1(L_t^1, L_t^2) with C exp(t L_R) W1(L_0^1, L_0^2).

    ``L_R`` defaults to the sum of the probed velocity and label-operator
    Lipschitz quotients on the ball containing both trajectories.
    """
    t0 = time.perf_counter()
    if initial1.N != cfg.N or initial2.N != cfg.N:
        raise UsageError("both ensembles need cfg.N agents")
    both = EmpiricalMeasure(np.concatenate([initial1.X, initial2.X]),
                            np.concatenate([initial1.L, initial2.L]), initial1.space)
    cfg = fix_theta(cfg, both)
    noise = rngmod.brownian_increments(cfg.seed, cfg.n_steps, cfg.N, cfg.d, cfg.dt)
    tr1 = simulate(cfg, initial1, noise)
    tr2 = simulate(cfg, initial2, noise)
    R = float(max(np.linalg.norm(tr1.X, axis=2).max(), np.linalg.norm(tr2.X, axis=2).max())) + 1.0
    if L_R is None:
        lv, lt = probe_lipschitz(cfg.field, R, n_probe, cfg.seed)
        L_R = lv + lt
    C = stability_constant(cfg.T, L_R)
    w0 = w1_product(initial1, initial2)
    rows = []
    ok = True
    worst = -np.inf
    for t in t_checks:
        k = tr1.index_of(t)
        w = w1_product(tr1.at(k), tr2.at(k))
        bound = C * math.exp(t * L_R) * w0
        rows.append([float(t), w, bound, bound - w])
        ok &= w <= bound * (1 + 1e-12) + 1e-12
        if bound > 0:
            worst = max(worst, w / bound)
    rep = ExperimentReport("stability", {"N": cfg.N, "T": cfg.T, "dt": cfg.dt, "sigma": cfg.sigma,
                                         "field": cfg.field.name},
                           ["t", "w1", "bound", "margin"], rows)
    rep.extra.update({"L_R": L_R, "C": C, "R": R, "w1_initial": w0,
                      "worst_ratio": worst if np.isfinite(worst) else 0.0})
    rep.verdicts.append(Verdict("stability.coupling_bound", bool(ok),
                                f"L_R={L_R:.4g}, C={C:.4g}, W1(0)={w0:.3e}, worst W1/bound={rep.extra['worst_ratio']:.3e}"))
    rep.runtime = time.perf_counter() - t0
    return rep


# ---------------------------------------------------------------------------
# moments
# ---------------------------------------------------------------------------


def m1_envelope(t, M_v: float, M_T: float, m1_0: float, sigma: float = 0.0, d: int = 1):
    """exp(C) exp(exp(C) t) (C t + m1(0) + noise(t)), C = max(M_v, M_T).

    noise(t) = sqrt(2 sigma) E|B_t| <= sqrt(2 sigma d t) accounts for the
    Brownian term, which the Gronwall step otherwise drops after taking
    expectations.
    """
    C = max(M_v, M_T)
    t = np.asarray(t, dtype=float)
    return math.exp(C) * np.exp(math.exp(C) * t) * (C * t + m1_0 + np.sqrt(2.0 * sigma * d * t))


def x2_envelope(t, M_v: float, u0: float, sigma: float, T: float, d: int = 1):
    """Bound on u(t) = mean_i E|X_i(t)|^2 for labels of BL norm 1.

    From |v| <= M_v (1 + ||y|| + m1) = M_v (3 + |x| + mean|x|) one gets
    mean|v|^2 <= 3 M_v^2 (9 + 2u), so
    u(t) <= 3u0 + 6 sigma d T + 81 M_v^2 T^2 + 18 M_v^2 T int_0^t u,
    and Gronwall gives the exponential below.
    """
    A = 3.0 * u0 + 6.0 * sigma * d * T + 81.0 * M_v ** 2 * T ** 2
    return A * np.exp(18.0 * M_v ** 2 * T * np.asarray(t, dtype=float))


@dataclass
class MomentTable:
    times: np.ndarray
    x2: np.ndarray  # mean_i |X_i|^2
    lam2: np.ndarray  # mean_i ||lambda_i||_BL^2
    m1: np.ndarray

    @property
    def sup(self) -> dict:
        return {"x2": float(self.x2.max()), "lam2": float(self.lam2.max()), "m1": float(self.m1.max())}


def moment_table(traj: Trajectory) -> MomentTable:
    x2 = (traj.X ** 2).sum(axis=2).mean(axis=1)
    K = traj.L.shape[2]
    lam = bl_norm_rows(traj.L.reshape(-1, K), traj.space).reshape(traj.L.shape[:2])
    m1 = (np.linalg.norm(traj.X, axis=2) + lam).mean(axis=1)
    return MomentTable(traj.times, x2, (lam ** 2).mean(axis=1), m1)


def moment_monitor(traj: Trajectory, fp: FieldPair, sigma: float, M_v: float | None = None,
                   M_T: float | None = None, n_probe: int = 400, seed: int = 0) -> ExperimentReport:
    """Empirical moments along a trajectory against the Gronwall envelopes."""
    t0 = time.perf_counter()
    if M_v is None or M_T is None:
        pv, pt = probe_growth(fp, n_probe, seed)
        M_v = pv if M_v is None else M_v
        M_T = pt if M_T is None else M_T
    tab = moment_table(traj)
    T = float(traj.times[-1])
    d = traj.X.shape[2]
    env_m1 = m1_envelope(tab.times, M_v, M_T, float(tab.m1[0]), sigma, d)
    env_x2 = x2_envelope(tab.times, M_v, float(tab.x2[0]), sigma, T, d)
    rows = [[float(t), float(a), float(b), float(c), float(e1), float(e2)]
            for t, a, b, c, e1, e2 in zip(tab.times, tab.x2, tab.lam2, tab.m1, env_m1, env_x2)]
    rep = ExperimentReport("moments", {"N": traj.N, "T": T, "sigma": sigma, "field": fp.name},
                           ["t", "x2", "lam_bl2", "m1", "m1_envelope", "x2_envelope"], rows)
    rep.extra.update({"M_v": M_v, "M_T": M_T, **{f"sup_{k}": v for k, v in tab.sup.items()}})
    rep.verdicts.append(Verdict("moments.m1_envelope", bool(np.all(tab.m1 <= env_m1)),
                                f"max m1/envelope = {float((tab.m1 / env_m1).max()):.3e}"))
    rep.verdicts.append(Verdict("moments.x2_envelope", bool(np.all(tab.x2 <= env_x2)),
                                f"max x2/envelope = {float((tab.x2 / env_x2).max()):.3e}"))
    rep.verdicts.append(Verdict("moments.label_bl_le_1", bool(tab.lam2.max() <= 1.0 + 1e-12),
                                f"max mean BL^2 = {tab.lam2.max():.15f}"))
    rep.extra["table"] = tab
    rep.runtime = time.perf_counter() - t0
    return rep


def relative_spread(values) -> float:
    v = np.asarray(values, dtype=float)
    return float((v.max() - v.min()) / v.min()) if v.min() > 0 else float("inf")


# ---------------------------------------------------------------------------
# Picard decay
# ---------------------------------------------------------------------------


def fit_factorial(diffs, T: float) -> tuple[float, float, float]:
    """Fit log d_n = c + (n+1) log(M T) - log((n+1)!) over the positive entries.

    Returns (M_hat, c, rms residual).
    """
    d = np.asarray(diffs, dtype=float)
    n = np.arange(d.size)
    ok = d > 0
    if ok.sum() < 2:
        return float("nan"), float("nan"), float("nan")
    y = np.log(d[ok]) + np.array([math.lgamma(k + 2) for k in n[ok]])
    slope, c = np.polyfit(n[ok] + 1.0, y, 1)
    res = y - (c + slope * (n[ok] + 1.0))
    return float(math.exp(slope) / T), float(c), float(np.sqrt(np.mean(res ** 2)))


def ratios_strictly_decreasing(diffs, lo: int | None = None, hi: int | None = None) -> tuple[bool, np.ndarray]:
    """Check d[n+1]/d[n] strictly decreasing.

    With ``lo``/``hi`` the check covers n = lo..hi; otherwise it starts at the
    first ratio below 1.  Exact zeros (fixed point reached) count as passing.
    """
    d = np.asarray(diffs, dtype=float)
    if d.size < 2:
        return True, np.zeros(0)
    nz = np.flatnonzero(d == 0)
    if nz.size:
        d = d[:nz[0]]
        if d.size < 2:
            return True, np.zeros(0)
        if lo is not None and hi is not None and hi + 1 >= d.size:
            hi = d.size - 2
    r = d[1:] / d[:-1]
    if lo is None:
        below = np.flatnonzero(r < 1)
        if below.size == 0:
            return False, r
        lo = int(below[0])
    hi = r.size - 1 if hi is None else hi
    if hi >= r.size:
        raise UsageError(f"need {hi + 2} differences to test ratios up to n={hi}")
    seg = r[lo:hi + 1]
    return bool(np.all(np.diff(seg) < 0)), r


def picard_decay_report(cfg: SimConfig, initial, n_iters: int,
                        check: tuple[int, int] | None = None) -> ExperimentReport:
    """Run the fixed-noise Picard solver and fit the factorial decay law."""
    t0 = time.perf_counter()
    if n_iters < 4:
        raise UsageError("n_iters must be at least 4")
    _, diffs = picard_solve(cfg, initial, n_iters)
    M_hat, c, rms = fit_factorial(diffs, cfg.T)
    lo, hi = check if check is not None else (None, None)
    ok, r = ratios_strictly_decreasing(diffs, lo, hi)
    rows = [[n, diffs[n], float(r[n]) if n < r.size else float("nan")] for n in range(len(diffs))]
    rep = ExperimentReport("picard", {"N": cfg.N, "T": cfg.T, "dt": cfg.dt, "n_iters": n_iters,
                                      "theta": cfg.theta, "field": cfg.field.name},
                           ["n", "sup_diff", "ratio_next"], rows)
    rep.extra.update({"M_hat": M_hat, "M_hat_T": M_hat * cfg.T, "fit_rms": rms})
    span = f"n={lo}..{hi}" if check is not None else "from first ratio below 1"
    rep.verdicts.append(Verdict("picard.factorial_decay", ok,
                                f"ratios {np.array2string(r, precision=4)} strictly decreasing {span}"))
    rep.extra["diffs"] = np.asarray(diffs)
    rep.runtime = time.perf_counter() - t0
    return rep


# ---------------------------------------------------------------------------
# analytic controls
# ---------------------------------------------------------------------------


def ou_mean_errors(dts: Sequence[float], T: float = 1.0, x0: float = 1.0, kappa: float = 1.0) -> np.ndarray:
    """|E x(T) - exp(-kappa T) x0| for v(x) = -kappa x, sigma = 0, one agent, via the stepper."""
    from .fields import build_field
    from .measures import line_space

    space = line_space([0.0])
    fp = build_field("ou", "zero", space, 1, {"kappa": kappa})
    out = []
    for dt in dts:
        cfg = SimConfig(N=1, d=1, dt=dt, T=T, sigma=0.0, field=fp, theta=1.0)
        tr = simulate(cfg, EmpiricalMeasure(np.array([[x0]]), np.ones((1, 1)), space))
        out.append(abs(tr.X[-1, 0, 0] - math.exp(-kappa * T) * x0))
    return np.asarray(out)


def brownian_variance(sigma: float, T: float, dt: float, n_seeds: int, seed: int = 0) -> float:
    """Sample variance of x(T) over independent single-agent pure-diffusion runs."""
    from .fields import zero_field
    from .measures import line_space

    space = line_space([0.0])
    fp = zero_field(space)
    cfg = SimConfig(N=1, d=1, dt=dt, T=T, sigma=sigma, field=fp, theta=1.0)
    init = EmpiricalMeasure(np.zeros((1, 1)), np.ones((1, 1)), space)
    xs = np.empty(n_seeds)
    for s in range(n_seeds):
        tr = simulate(replace(cfg, seed=rngmod.child_seed(seed, rngmod.REPLICATE, s)), init)
        xs[s] = tr.X[-1, 0, 0]
    return float(xs.var(ddof=1))
