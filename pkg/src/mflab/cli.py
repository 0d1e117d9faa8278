"""Command-line entry point: ``mflab CONFIG [--seed S] [--out DIR] [--emit-svg] [--threads N]``.

Exit status is 0 when every verdict of the run passes, 1 when an experiment
fails and 2 for configuration, usage or I/O errors.
"""
from __future__ import annotations

import argparse
import logging
import platform
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from . import io as mio
from . import rng as rngmod
from . import svg
from .config import RunConfig, parse_config
from .errors import ConfigurationError, InvariantError, UsageError
from .experiments import (
    ExperimentReport,
    Verdict,
    default_family,
    meanfield_convergence,
    moment_monitor,
    picard_decay_report,
    relative_spread,
    stability_check,
    weak_form_report,
)
from .measures import EmpiricalMeasure, clean_probability
from .particle import simulate
from .spiking import raster_and_rates, simulate_spiking

log = logging.getLogger("mflab")

SIMPLEX_TOL = 1e-10
N_AGREEMENT = 0.2


def _initial(cfg: RunConfig, N: int | None = None, index: int = 0) -> EmpiricalMeasure:
    return cfg.law.sample(N or cfg.sim.N, cfg.space, cfg.sim.d, cfg.seed, index)


def _fan(traj, n_max: int = 40) -> list:
    idx = np.linspace(0, traj.N - 1, min(traj.N, n_max)).astype(int)
    return [(traj.times, traj.X[:, i, 0]) for i in idx]


def _label_traces(traj, n_max: int = 40) -> list:
    idx = np.linspace(0, traj.N - 1, min(traj.N, n_max)).astype(int)
    u = traj.space.coords if traj.space.coords is not None else np.arange(traj.space.K, dtype=float)
    return [(traj.times, traj.L[:, i, :] @ u) for i in idx]


# ---------------------------------------------------------------------------
# modes
# ---------------------------------------------------------------------------


def _write_traj(cfg: RunConfig, out: Path, traj) -> None:
    mio.write_label_space(out / "labels.csv", cfg.space)
    mio.write_trajectory(out / "trajectory.csv", traj, cfg.stride)
    if cfg.write_noise:
        mio.write_noise(out / "noise.csv", traj.noise)


def run_simulate(cfg: RunConfig, out: Path) -> ExperimentReport:
    t0 = time.perf_counter()
    traj = simulate(cfg.sim, _initial(cfg))
    _write_traj(cfg, out, traj)
    viol = traj.label_violation()
    rep = ExperimentReport("simulate", {"N": cfg.sim.N, "T": cfg.sim.T, "dt": cfg.sim.dt,
                                        "sigma": cfg.sim.sigma, "field": cfg.sim.field.name},
                           ["t", "mean_x", "mean_x2"],
                           [[float(t), float(traj.X[k].mean()), float((traj.X[k] ** 2).sum(axis=1).mean())]
                            for k, t in enumerate(traj.times)])
    rep.extra.update({"theta": traj.meta["theta"], "delta_R": traj.meta["delta_R"], "label_violation": viol})
    rep.verdicts.append(Verdict("particle.simplex_invariance", viol <= SIMPLEX_TOL,
                                f"max label violation {viol:.3e}"))
    if cfg.emit_svg:
        svg.write(out / "x_fan.svg", svg.line_plot(_fan(traj), "positions", "t", "x", width=0.7))
        svg.write(out / "labels.svg", svg.line_plot(_label_traces(traj), "mean label", "t",
                                                    "<lambda, u>", width=0.7))
    rep.runtime = time.perf_counter() - t0
    return rep


def run_spiking(cfg: RunConfig, out: Path) -> ExperimentReport:
    t0 = time.perf_counter()
    traj, rec = simulate_spiking(cfg.spike, _initial(cfg))
    _write_traj(cfg, out, traj)
    mio.write_raster(out / "raster.csv", rec)
    rates = raster_and_rates(rec, cfg.rate_bin)
    mio.write_rates(out / "rates.csv", rates)
    viol = traj.label_violation()
    xmax = float(traj.X.max())
    X_F = traj.meta["X_F"]
    rep = ExperimentReport("spiking", {"N": cfg.sim.N, "T": cfg.sim.T, "dt": cfg.sim.dt,
                                       "sigma": cfg.sim.sigma, "X_F": X_F, "X_R": cfg.spike.X_R,
                                       "field": cfg.sim.field.name},
                           ["bin_start", "rate"],
                           [[float(b), float(r)] for b, r in zip(rates.bin_start, rates.rate)])
    rep.extra.update({"n_spikes": len(rec), "spikes_per_agent": len(rec) / cfg.sim.N,
                      "max_overshoot": rec.max_overshoot, "theta": traj.meta["theta"]})
    rep.verdicts.append(Verdict("spiking.below_threshold", xmax <= X_F,
                                f"max recorded potential {xmax:.6g} vs X_F = {X_F:g}"))
    rep.verdicts.append(Verdict("particle.simplex_invariance", viol <= SIMPLEX_TOL,
                                f"max label violation {viol:.3e}"))
    try:
        rec.check()
        ok, msg = True, f"{len(rec)} spikes"
    except InvariantError as exc:
        ok, msg = False, str(exc)
    rep.verdicts.append(Verdict("spiking.record_consistent", ok, msg))
    if cfg.emit_svg:
        svg.write(out / "x_fan.svg", svg.line_plot(_fan(traj, 20), "potentials", "t", "x", width=0.7))
        svg.write(out / "labels.svg", svg.line_plot(_label_traces(traj, 20), "mean label", "t",
                                                    "<lambda, u>", width=0.7))
        svg.write(out / "raster.svg", svg.scatter_plot(rec.times, rec.agents, "spike raster", "t", "agent"))
    rep.runtime = time.perf_counter() - t0
    return rep


def run_converge(cfg: RunConfig, out: Path) -> ExperimentReport:
    e = cfg.exp
    rep = meanfield_convergence(cfg.sim, cfg.law, e.Ns, e.t_checks, e.n_reps, e.N_ref, cfg.threads)
    if cfg.emit_svg:
        Ns = rep.column("N")
        svg.write(out / "w1_decay.svg", svg.line_plot(
            [(Ns, rep.column(f"w1_median_t={t:g}")) for t in e.t_checks], "W1 to reference", "N", "median W1",
            logx=True, logy=True, markers=True, labels=[f"t={t:g}" for t in e.t_checks]))
    return rep


def _perturbed(cfg: RunConfig, base: EmpiricalMeasure) -> EmpiricalMeasure:
    g = rngmod.stream(cfg.seed, rngmod.INITIAL, 1)
    X = base.X + cfg.exp.perturb_x * g.standard_normal(base.X.shape)
    other = g.dirichlet(np.ones(cfg.space.K), size=base.N)
    L = clean_probability((1.0 - cfg.exp.perturb_lam) * base.L + cfg.exp.perturb_lam * other)
    return EmpiricalMeasure(X, L, cfg.space)


def run_stability(cfg: RunConfig, out: Path) -> ExperimentReport:
    a = _initial(cfg)
    rep = stability_check(cfg.sim, a, _perturbed(cfg, a), cfg.exp.t_checks, cfg.exp.n_probe)
    if cfg.emit_svg:
        svg.write(out / "stability.svg", svg.line_plot(
            [(rep.column("t"), rep.column("w1")), (rep.column("t"), rep.column("bound"))],
            "synchronous coupling", "t", "W1", logy=True, markers=True, labels=["W1", "bound"]))
    return rep


def run_weakform(cfg: RunConfig, out: Path) -> ExperimentReport:
    fam = default_family(cfg.space, cfg.sim.d)
    rep = weak_form_report(cfg.sim, fam, cfg.exp.n_paths, cfg.law, cfg.exp.tolerance, cfg.threads)
    if cfg.emit_svg:
        t = rep.column("t")
        svg.write(out / "weakform.svg", svg.line_plot(
            [(t, rep.column(p.name)) for p in fam], "weak-form residual", "t", "|r(t)|",
            labels=[p.name for p in fam]))
    return rep


def run_picard(cfg: RunConfig, out: Path) -> ExperimentReport:
    rep = picard_decay_report(cfg.sim, _initial(cfg), cfg.exp.n_iters, cfg.exp.check_range)
    if cfg.emit_svg:
        d = rep.column("sup_diff")
        n = rep.column("n")
        svg.write(out / "picard.svg", svg.line_plot([(n[d > 0], d[d > 0])], "Picard differences",
                                                    "iteration n", "sup diff", logy=True, markers=True))
    return rep


def run_moments(cfg: RunConfig, out: Path) -> ExperimentReport:
    t0 = time.perf_counter()
    Ns = cfg.exp.Ns or (cfg.sim.N,)
    rows, reps, sups = [], [], []
    for N in Ns:
        tr = simulate(replace(cfg.sim, N=N), _initial(cfg, N))
        r = moment_monitor(tr, cfg.sim.field, cfg.sim.sigma, n_probe=max(cfg.exp.n_probe, 2), seed=cfg.seed)
        reps.append(r)
        sups.append(r.extra["sup_x2"])
        rows.append([N, r.extra["sup_x2"], r.extra["sup_lam2"], r.extra["sup_m1"],
                     float(r.column("x2_envelope").max()), float(r.column("m1_envelope").max())])
        if cfg.emit_svg:
            t = r.column("t")
            svg.write(out / f"moments_N{N}.svg", svg.line_plot(
                [(t, r.column("x2")), (t, r.column("x2_envelope"))], f"second moment, N={N}", "t",
                "mean |x|^2", logy=True, labels=["empirical", "envelope"]))
    rep = ExperimentReport("moments", {"Ns": list(Ns), "T": cfg.sim.T, "dt": cfg.sim.dt,
                                       "sigma": cfg.sim.sigma, "field": cfg.sim.field.name},
                           ["N", "sup_x2", "sup_lam_bl2", "sup_m1", "x2_envelope_max", "m1_envelope_max"], rows)
    for N, r in zip(Ns, reps):
        for v in r.verdicts:
            rep.verdicts.append(Verdict(v.invariant, v.passed, f"N={N}: {v.detail}"))
    if len(Ns) > 1:
        spread = relative_spread(sups)
        rep.verdicts.append(Verdict("moments.N_independence", spread <= N_AGREEMENT,
                                    f"relative spread of sup mean |x|^2 = {spread:.3f}"))
    rep.runtime = time.perf_counter() - t0
    return rep


MODE_RUNNERS = {
    "simulate": run_simulate,
    "spiking": run_spiking,
    "converge": run_converge,
    "stability": run_stability,
    "weakform": run_weakform,
    "picard": run_picard,
    "moments": run_moments,
}


# ---------------------------------------------------------------------------
# orchestration
# ---------------------------------------------------------------------------


def manifest_text(cfg: RunConfig, wall: float) -> str:
    head = [
        f"# mflab {__version__} run manifest; re-run with: mflab manifest.txt --out DIR",
        f"# python {platform.python_version()}, numpy {np.__version__}, scipy {scipy.__version__}",
        f"# seed = {cfg.seed}",
        f"# streams: {rngmod.STREAM_SCHEME}",
        f"# wall_time_s = {wall:.3f}",
        "",
    ]
    return "\n".join(head) + cfg.to_text()


def run(cfg: RunConfig, out: Path | None = None) -> int:
    out = Path(out or cfg.out or "mflab_out")
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        print(f"mflab: cannot create output directory {out}: {exc.strerror}", file=sys.stderr)
        return 2
    t0 = time.perf_counter()
    try:
        rep = MODE_RUNNERS[cfg.mode](cfg, out)
        wall = time.perf_counter() - t0
        rep.to_csv(out / f"{cfg.mode}.csv")
        (out / "report.txt").write_text(rep.to_text())
        (out / "manifest.txt").write_text(manifest_text(cfg, wall))
    except InvariantError as exc:
        wall = time.perf_counter() - t0
        msg = f"{cfg.mode} run aborted: {exc}"
        try:
            (out / "report.txt").write_text(f"experiment: {cfg.mode}\nFAIL run.aborted: {exc}\n")
            (out / "manifest.txt").write_text(manifest_text(cfg, wall))
        except OSError:
            pass
        print(f"mflab: {msg}", file=sys.stderr)
        return 1
    except (ConfigurationError, UsageError) as exc:
        print(f"mflab: {cfg.mode} run failed: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"mflab: I/O error: {exc}", file=sys.stderr)
        return 2
    print(rep.to_text(), end="")
    return 0 if rep.passed else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mflab", description=__doc__.splitlines()[0])
    p.add_argument("config", help="run configuration file (sectioned key = value text)")
    p.add_argument("--seed", type=int, default=None, help="override the root seed")
    p.add_argument("--out", default=None, help="output directory (default: [run] out, else ./mflab_out)")
    p.add_argument("--emit-svg", action="store_true", help="also write SVG diagnostic plots")
    p.add_argument("--threads", type=int, default=None,
                   help="worker threads for replicate runs; never changes results")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = parse_config(args.config, seed=args.seed)
    except ConfigurationError as exc:
        print(f"mflab: {exc}", file=sys.stderr)
        return 2
    if args.emit_svg:
        cfg.emit_svg = cfg.sections["run"]["emit_svg"] = True
    if args.threads is not None:
        if args.threads < 1:
            print("mflab: --threads must be at least 1", file=sys.stderr)
            return 2
        cfg.threads = cfg.sections["run"]["threads"] = args.threads
    return run(cfg, args.out)


if __name__ == "__main__":
    sys.exit(main())
