import math
from dataclasses import replace

import numpy as np
import pytest
from numpy.testing import assert_allclose

from conftest import SPIKE_COEFFS
from mflab.errors import UsageError
from mflab.experiments import (
    CylinderTestFunction,
    ExperimentReport,
    Verdict,
    default_family,
    fit_factorial,
    fit_loglog_slope,
    generator_apply,
    generator_batch,
    stability_constant,
    m1_envelope,
    map_ordered,
    meanfield_convergence,
    moment_monitor,
    moment_table,
    picard_decay_report,
    ratios_strictly_decreasing,
    relative_spread,
    residual_trace,
    stability_check,
    weak_form_residual,
    x2_envelope,
)
from mflab.fields import build_field, zero_field
from mflab.measures import EmpiricalMeasure, line_space
from mflab.particle import InitialLaw, SimConfig, simulate


class TestTestFunctions:
    def test_validation(self, space3):
        with pytest.raises(UsageError):
            CylinderTestFunction(space3, f="cubic")
        with pytest.raises(UsageError):
            CylinderTestFunction(space3, g="sum")
        with pytest.raises(UsageError, match="Lipschitz"):
            CylinderTestFunction(space3, g="sum", psis=np.array([[0.0, 1.0, 0.0]]), psi_lip=(1.0,))

    def test_values(self, space3):
        phi = CylinderTestFunction(space3, f="poly", c0=1.0, w=(2.0,), q=3.0, g="square",
                                   psis=np.array([space3.coords]))
        X = np.array([[0.5]])
        L = np.array([[0.0, 1.0, 0.0]])
        assert_allclose(phi(X, L), (1 + 1 + 0.75) * 0.25)

    def test_default_family(self, space3):
        fam = default_family(space3)
        assert len(fam) == 6
        assert len({p.name for p in fam}) == 6
        for p in fam:
            for lip in p.psi_lip:
                assert lip <= 1.0 + 1e-12


class TestGenerator:
    def test_constant(self, space3, linear_field):
        phi = CylinderTestFunction(space3, f="poly", c0=3.0)
        psi = InitialLaw().sample(4, space3, 1, 0)
        assert generator_apply(phi, psi.agent(0), psi, linear_field, 0.7) == 0.0

    def test_linear_in_x(self, space3):
        fp = build_field("constant", "zero", space3, 1, {"c": 1.7})
        phi = CylinderTestFunction(space3, f="poly", w=(1.0,))
        psi = InitialLaw().sample(4, space3, 1, 0)
        assert_allclose(generator_apply(phi, psi.agent(1), psi, fp, 0.9), 1.7)

    def test_square_in_x(self, space3):
        phi = CylinderTestFunction(space3, f="poly", q=1.0)
        psi = InitialLaw().sample(4, space3, 1, 0)
        assert_allclose(generator_apply(phi, psi.agent(2), psi, zero_field(space3), 0.35), 0.7)

    def test_label_pairing_and_constant_shift(self, space3, linear_field, rng):
        psi = InitialLaw(labels="dirichlet").sample(5, space3, 1, 0)
        y = psi.agent(3)
        p = rng.uniform(0, 0.5, size=3)
        phi = CylinderTestFunction(space3, g="sum", psis=p[None, :])
        phi_shift = CylinderTestFunction(space3, g="sum", psis=(p + 0.4)[None, :])
        T = linear_field.T(y, psi)
        got = generator_apply(phi, y, psi, linear_field, 0.5)
        assert_allclose(got, T.pair(p), atol=1e-15)
        assert_allclose(generator_apply(phi_shift, y, psi, linear_field, 0.5), got, atol=1e-14)

    def test_finite_difference_cross_check(self, space3, linear_field, rng):
        sigma = 0.3
        h = 1e-4
        for phi in default_family(space3) + [
            CylinderTestFunction(space3, f="gaussian", center=(0.2,), width=0.7, g="square",
                                 psis=np.array([[0.0, 0.3, 0.5]]), name="mix")
        ]:
            psi = InitialLaw(labels="dirichlet", lam_min=0.1).sample(5, space3, 1, 1)
            X, L = psi.X[:1], psi.L[:1]
            v = linear_field.velocity(X, L, psi)[0, 0]
            T = linear_field.label_op(X, L, psi)
            e = np.array([[h]])
            d1 = (phi(X + e, L) - phi(X - e, L))[0] / (2 * h)
            d2 = (phi(X + e, L) - 2 * phi(X, L) + phi(X - e, L))[0] / h ** 2
            dl = (phi(X, L + h * T) - phi(X, L - h * T))[0] / (2 * h)
            fd = sigma * d2 + d1 * v + dl
            got = generator_batch(phi, X, L, psi, linear_field, sigma)[0]
            assert_allclose(got, fd, rtol=1e-5, atol=1e-6, err_msg=phi.name)


class TestWeakForm:
    def test_no_dynamics(self, space3):
        cfg = SimConfig(N=5, d=1, dt=0.05, T=0.5, sigma=0.0, field=zero_field(space3), theta=1.0)
        res = weak_form_residual(cfg, default_family(space3), 3, InitialLaw(labels="dirichlet"))
        assert res.max == 0.0

    def test_martingale_bound(self, space3):
        c, sigma, T, N, n_paths = 0.4, 0.2, 0.5, 10, 5
        fp = build_field("constant", "zero", space3, 1, {"c": c})
        phi = CylinderTestFunction(space3, f="poly", w=(1.0,))
        bound = 4 * math.sqrt(2 * sigma * T / (N * n_paths))
        hits = 0
        reps = 40
        for r in range(reps):
            cfg = SimConfig(N=N, d=1, dt=0.01, T=T, sigma=sigma, field=fp, theta=1.0, seed=r)
            hits += weak_form_residual(cfg, phi, n_paths, InitialLaw()).max <= bound
        assert hits >= 0.95 * reps

    def test_deterministic_residual_is_first_order(self, space3):
        fp = build_field("ou", "consensus", space3, 1, {"kappa": 1.0})
        fam = default_family(space3)
        law = InitialLaw(x_dist="normal", labels="dirichlet")
        init = law.sample(20, space3, 1, 0)
        maxes = []
        for dt in (0.02, 0.01, 0.005):
            cfg = SimConfig(N=20, d=1, dt=dt, T=1.0, sigma=0.0, field=fp, theta=0.5)
            maxes.append(np.abs(residual_trace(simulate(cfg, init), fam, fp, 0.0)).max())
        r = np.array(maxes[:-1]) / np.array(maxes[1:])
        assert np.all((r >= 1.6) & (r <= 2.4)), r


class TestMeanField:
    def test_identical_deterministic_runs(self, space3):
        cfg = SimConfig(N=5, d=1, dt=0.1, T=1.0, sigma=0.0, field=zero_field(space3), theta=1.0)
        law = InitialLaw(x_dist="constant", x_mean=0.3)
        rep = meanfield_convergence(cfg, law, [5, 10], [0.5, 1.0], 2, N_ref=20)
        assert_allclose(rep.extra["W1"], 0.0, atol=1e-14)
        assert rep.passed
        assert rep.columns == ["N", "w1_median_t=0.5", "w1_median_t=1", "w1_mean_t=0.5", "w1_mean_t=1"]
        assert len(rep.rows) == 2

    def test_thread_count_does_not_change_results(self, space3):
        fp = build_field("ou", "consensus", space3, 1)
        cfg = SimConfig(N=5, d=1, dt=0.05, T=0.5, sigma=0.2, field=fp, seed=4)
        law = InitialLaw(labels="dirichlet")
        a = meanfield_convergence(cfg, law, [5, 10], [0.5], 3, N_ref=20, threads=1)
        b = meanfield_convergence(cfg, law, [5, 10], [0.5], 3, N_ref=20, threads=4)
        assert a.extra["W1"].tobytes() == b.extra["W1"].tobytes()

    def test_argument_checks(self, space3):
        cfg = SimConfig(N=5, d=1, dt=0.1, T=1.0, sigma=0.0, field=zero_field(space3), theta=1.0)
        with pytest.raises(UsageError, match="increasing"):
            meanfield_convergence(cfg, InitialLaw(), [10, 5], [0.5], 1, N_ref=40)
        with pytest.raises(UsageError, match="too small"):
            meanfield_convergence(cfg, InitialLaw(), [5, 10], [0.5], 1, N_ref=15)
        with pytest.raises(UsageError, match="grid"):
            meanfield_convergence(cfg, InitialLaw(), [5], [0.55], 1, N_ref=10)

    def test_slope_fit(self):
        Ns = np.array([10, 20, 40, 80])
        assert_allclose(fit_loglog_slope(Ns, 3.0 * Ns ** -0.5), -0.5)
        assert math.isnan(fit_loglog_slope(Ns, np.zeros(4)))


class TestStability:
    def test_identical_initial(self, space3, linear_field):
        cfg = SimConfig(N=10, d=1, dt=0.01, T=0.5, sigma=0.01, field=linear_field, theta=1.0,
                        feasibility="adaptive")
        E = InitialLaw(labels="dirichlet", lam_min=0.1).sample(10, space3, 1, 0)
        rep = stability_check(cfg, E, E, [0.1, 0.5])
        assert rep.passed
        assert_allclose(rep.column("w1"), 0.0)

    def test_contracting_flow(self, space3):
        fp = build_field("ou", "zero", space3, 1, {"kappa": 1.0})
        cfg = SimConfig(N=6, d=1, dt=0.01, T=1.0, sigma=0.0, field=fp, theta=1.0)
        E1 = InitialLaw().sample(6, space3, 1, 0)
        E2 = EmpiricalMeasure(E1.X + 0.3, E1.L, space3)
        rep = stability_check(cfg, E1, E2, [0.25, 0.5, 1.0])
        ratio = rep.column("w1") / rep.extra["w1_initial"]
        assert_allclose(ratio, np.exp(-rep.column("t")), rtol=0.01)
        assert rep.passed
        assert rep.extra["worst_ratio"] < 0.05

    def test_linear_system_small_perturbation(self, space3, linear_field):
        cfg = SimConfig(N=20, d=1, dt=0.01, T=1.0, sigma=0.005, field=linear_field, theta=1.0,
                        feasibility="adaptive", seed=1)
        E1 = InitialLaw(x_lo=0.1, x_hi=0.6, labels="dirichlet", lam_min=0.1).sample(20, space3, 1, 1)
        E2 = EmpiricalMeasure(E1.X + 0.01, E1.L, space3)
        rep = stability_check(cfg, E1, E2, [0.2, 0.4, 0.6, 0.8, 1.0])
        assert rep.passed

    def test_stability_constant(self):
        assert_allclose(stability_constant(1.0, 0.0), 1 + math.e)
        assert stability_constant(2.0, 1.0) > stability_constant(1.0, 1.0)

    def test_sizes_checked(self, space3, linear_field):
        cfg = SimConfig(N=3, d=1, dt=0.1, T=0.2, sigma=0.0, field=linear_field, theta=1.0,
                        feasibility="adaptive")
        E = InitialLaw().sample(2, space3, 1, 0)
        with pytest.raises(UsageError):
            stability_check(cfg, E, E, [0.1])


class TestMoments:
    def test_static_moments(self, space3):
        cfg = SimConfig(N=8, d=1, dt=0.1, T=1.0, sigma=0.0, field=zero_field(space3), theta=1.0)
        tr = simulate(cfg, InitialLaw(x_dist="normal", labels="dirichlet").sample(8, space3, 1, 0))
        tab = moment_table(tr)
        assert np.ptp(tab.x2) == 0 and np.ptp(tab.m1) == 0
        assert tab.lam2.max() <= 1.0 + 1e-12

    def test_monitor_on_linear_system(self, space3, linear_field):
        cfg = SimConfig(N=30, d=1, dt=0.01, T=1.0, sigma=0.005, field=linear_field, theta=1.0,
                        feasibility="adaptive")
        tr = simulate(cfg, InitialLaw(x_lo=0.3, x_hi=0.5).sample(30, space3, 1, 0))
        rep = moment_monitor(tr, linear_field, 0.005)
        assert rep.passed, rep.to_text()

    def test_envelopes_dominate_initial_values(self):
        assert m1_envelope(0.0, 1.0, 1.0, 2.0) >= 2.0
        assert x2_envelope(0.0, 1.0, 0.5, 0.1, 1.0) >= 0.5
        t = np.linspace(0, 1, 5)
        assert np.all(np.diff(x2_envelope(t, 0.7, 0.5, 0.1, 1.0)) > 0)

    def test_relative_spread(self):
        assert_allclose(relative_spread([1.0, 1.1, 1.05]), 0.1)
        assert relative_spread([0.0, 1.0]) == math.inf


class TestPicard:
    def test_zero_fields(self, space3):
        cfg = SimConfig(N=4, d=1, dt=0.1, T=1.0, sigma=0.0, field=zero_field(space3), theta=1.0)
        rep = picard_decay_report(cfg, InitialLaw().sample(4, space3, 1, 0), 4)
        assert_allclose(rep.extra["diffs"], 0.0)
        assert rep.passed

    def test_factorial_fit_recovers_constant(self):
        M, T = 3.0, 0.5
        d = np.array([2.0 * (M * T) ** (n + 1) / math.factorial(n + 1) for n in range(8)])
        M_hat, c, rms = fit_factorial(d, T)
        assert_allclose(M_hat, M, rtol=1e-10)
        assert_allclose(c, math.log(2.0), rtol=1e-10)
        assert rms < 1e-10

    def test_ratio_checks(self):
        ok, r = ratios_strictly_decreasing([1.0, 0.5, 0.2, 0.05, 0.01])
        assert ok and r.size == 4
        assert not ratios_strictly_decreasing([1.0, 0.5, 0.4, 0.35], 0, 2)[0]
        assert ratios_strictly_decreasing([1.0, 0.1, 0.0, 0.0], 0, 2)[0]
        with pytest.raises(UsageError):
            ratios_strictly_decreasing([1.0, 0.5, 0.2], 0, 5)

    def test_doubling_horizon_scales_fit(self):
        s = line_space([0.0, 1.0])
        fp = build_field("linear", "linear", s, 1, SPIKE_COEFFS)
        init = InitialLaw(x_lo=0.0, x_hi=0.5).sample(50, s, 1, 0)
        base = SimConfig(N=50, d=1, dt=1e-3, T=0.25, sigma=0.005, field=fp, theta=1.0,
                         feasibility="runtime")
        short = picard_decay_report(base, init, 8).extra["M_hat_T"]
        long = picard_decay_report(replace(base, T=0.5), init, 8).extra["M_hat_T"]
        assert 2 * 0.7 <= long / short <= 2 * 1.3


class TestReports:
    def test_text_and_csv(self, tmp_path):
        rep = ExperimentReport("demo", {"N": 3}, ["a", "b"], [[1, 0.5], [2, 0.25]],
                               [Verdict("x.ok", True, "fine"), Verdict("x.bad", False, "no")])
        rep.extra["big"] = np.zeros(3)
        rep.extra["score"] = 0.1
        text = rep.to_text()
        assert "PASS x.ok: fine" in text and "FAIL x.bad: no" in text
        assert "overall: FAIL" in text and "big" not in text and "score: 0.10000000000000001" in text
        rep.to_csv(tmp_path / "r.csv")
        assert (tmp_path / "r.csv").read_text().splitlines() == ["a,b", "1,0.5", "2,0.25"]
        assert_allclose(rep.column("b"), [0.5, 0.25])

    def test_map_ordered(self):
        assert map_ordered(lambda x: x * x, list(range(10)), threads=3) == [x * x for x in range(10)]
