import math
from dataclasses import replace

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from conftest import SPIKE_COEFFS
from mflab.errors import ConfigurationError, InvariantError, UsageError
from mflab.fields import build_field
from mflab.measures import EmpiricalMeasure, line_space
from mflab.particle import InitialLaw, SimConfig, step
from mflab.spiking import (
    HeterogeneousNoiseSpec,
    SpikeConfig,
    SpikeRecord,
    default_noise_spec,
    heterogeneous_label_drift,
    kink_ratios,
    raster_and_rates,
    reset_potentials,
    simulate_spiking,
    spiking_step,
)

X_F, X_R = 0.7, 0.01


def ramp_config(space, c=1.3, dt=0.01, T=5.4, N=3):
    fp = build_field("constant", "zero", space, 1, {"c": c})
    return SpikeConfig(SimConfig(N=N, d=1, dt=dt, T=T, sigma=0.0, field=fp, theta=1.0), X_F, X_R)


def linear_spike_config(space, N=100, T=2.0, sigma=0.005, seed=0, **kw):
    fp = build_field("linear", "linear", space, 1, SPIKE_COEFFS)
    base = SimConfig(N=N, d=1, dt=1e-3, T=T, sigma=sigma, field=fp, theta=1.0, seed=seed,
                     feasibility="adaptive")
    return SpikeConfig(base, X_F, X_R, **kw)


LAW = InitialLaw(x_lo=0.01, x_hi=0.7)


class TestSpikeConfig:
    def test_reset_must_be_below_threshold(self, linear_field):
        base = SimConfig(N=2, d=1, dt=0.01, T=0.1, sigma=0.0, field=linear_field, theta=1.0)
        with pytest.raises(ConfigurationError, match="X_R < X_F"):
            SpikeConfig(base, X_F=0.5, X_R=0.5)

    def test_threshold_range(self, linear_field):
        base = SimConfig(N=2, d=1, dt=0.01, T=0.1, sigma=0.0, field=linear_field, theta=1.0, seed=3)
        cfg = SpikeConfig(base, X_F_range=(0.6, 0.8))
        t = cfg.threshold()
        assert 0.6 <= t <= 0.8
        assert t == cfg.threshold()
        with pytest.raises(ConfigurationError):
            SpikeConfig(base, X_F_range=(0.0, 0.8))

    def test_noise_needs_signed_operator(self, space3):
        fp = build_field("constant", "replicator", space3, 1, {"c": 1.0})
        base = SimConfig(N=2, d=1, dt=0.01, T=0.1, sigma=0.0, field=fp, theta=0.1)
        with pytest.raises(ConfigurationError, match="signed"):
            SpikeConfig(base, het=default_noise_spec(space3, 0.1))


class TestStepping:
    def test_reset_potentials(self):
        X, fired = reset_potentials(np.array([[0.2], [0.7], [0.9]]), X_F, X_R)
        assert_array_equal(fired, [False, True, True])
        assert_allclose(X[:, 0], [0.2, X_R, X_R])

    def test_below_threshold_matches_particle_step(self, space3, rng):
        cfg = linear_spike_config(space3, N=5)
        E = EmpiricalMeasure(rng.uniform(0.0, 0.2, size=(5, 1)), rng.dirichlet(np.ones(3), size=5) * 0.9 + 0.1 / 3,
                             space3)
        noise = rng.normal(size=(5, 1)) * math.sqrt(cfg.base.dt)
        a, spikes = spiking_step(E.agents, cfg.base.field, cfg, noise, 1.0, 0.001)
        b = step(E.agents, cfg.base.field, cfg.base.dt, cfg.base.sigma, 1.0, noise)
        assert spikes == []
        for p, q in zip(a, b):
            assert_array_equal(p.x, q.x)
            assert_allclose(p.lam.weights, q.lam.weights, atol=1e-15)

    def test_step_reports_spikes(self, space3):
        cfg = ramp_config(space3, N=2)
        E = EmpiricalMeasure([[0.695], [0.1]], np.full((2, 3), 1 / 3), space3)
        out, spikes = spiking_step(E.agents, cfg.base.field, cfg, np.zeros((2, 1)), 1.0, 0.5)
        assert spikes == [(0, 0.5)]
        assert out[0].x[0] == X_R


class TestDeterministicRamp:
    def test_period_is_exact(self, space3):
        cfg = ramp_config(space3)
        init = EmpiricalMeasure(np.full((3, 1), X_R), np.full((3, 3), 1 / 3), space3)
        traj, rec = simulate_spiking(cfg, init)
        period = math.ceil((X_F - X_R) / (1.3 * 0.01)) * 0.01
        for i in range(3):
            t = rec.agent_times(i)
            assert t.size == 10
            assert_allclose(np.diff(t), period, rtol=0, atol=1e-12)
            assert_allclose(t[0], period, atol=1e-12)
        assert traj.X.max() <= X_F

    def test_rates_are_exact(self, space3):
        cfg = ramp_config(space3)
        init = EmpiricalMeasure(np.full((3, 1), X_R), np.full((3, 3), 1 / 3), space3)
        _, rec = simulate_spiking(cfg, init)
        period = math.ceil((X_F - X_R) / (1.3 * 0.01)) * 0.01
        table = raster_and_rates(rec, period)
        assert table.rate.size == 10
        assert_allclose(table.rate, 1.0 / period, rtol=1e-12)

    def test_repeatable_count(self, space3):
        cfg = ramp_config(space3)
        init = EmpiricalMeasure(np.array([[0.01], [0.3], [0.5]]), np.full((3, 3), 1 / 3), space3)
        counts = [len(simulate_spiking(cfg, init)[1]) for _ in range(2)]
        assert counts[0] == counts[1] > 0


class TestRates:
    def test_no_spikes(self):
        rec = SpikeRecord(np.zeros(0, int), np.zeros(0), np.zeros(0, int), np.zeros(0), 10, 1.0, X_F)
        t = raster_and_rates(rec, 0.25)
        assert_array_equal(t.rate, np.zeros(4))
        assert_allclose(t.bin_start, [0, 0.25, 0.5, 0.75])

    def test_partial_bin_and_right_closed(self):
        rec = SpikeRecord(np.array([0, 1, 0]), np.array([0.25, 0.3, 1.0]), np.array([1, 2, 4]),
                          np.full(3, 0.71), 2, 1.0, X_F)
        t = raster_and_rates(rec, 0.4)
        assert_allclose(t.bin_start, [0.0, 0.4, 0.8])
        assert_allclose(t.width, [0.4, 0.4, 0.2])
        assert_allclose(t.rate, [2 / (2 * 0.4), 0.0, 1 / (2 * 0.2)])

    def test_bad_bin(self):
        rec = SpikeRecord(np.zeros(0, int), np.zeros(0), np.zeros(0, int), np.zeros(0), 1, 1.0, X_F)
        with pytest.raises(UsageError):
            raster_and_rates(rec, 0.0)

    def test_record_check(self):
        rec = SpikeRecord(np.array([0, 0]), np.array([0.2, 0.2]), np.array([2, 2]), np.full(2, 0.8), 1, 1.0, X_F)
        with pytest.raises(InvariantError):
            rec.check()


class TestLinearSpiking:
    def test_structure(self, space3):
        cfg = linear_spike_config(space3, N=100, T=2.0)
        traj, rec = simulate_spiking(cfg, LAW.sample(100, space3, 1, 0))
        assert len(rec) > 0
        assert traj.X.max() <= X_F
        assert traj.label_violation() <= 1e-10
        rec.check()
        assert rec.pre.min() >= X_F
        assert np.all(traj.X[rec.steps, rec.agents, 0] == X_R)
        rates = raster_and_rates(rec, 0.1).rate
        assert np.all(np.isfinite(rates)) and rates.sum() > 0

    def test_kinks_at_spikes(self, space3):
        cfg = linear_spike_config(space3, N=100, T=2.0)
        traj, rec = simulate_spiking(cfg, LAW.sample(100, space3, 1, 0))
        r = kink_ratios(traj, rec, space3.coords)
        assert r.size > 20
        assert np.all(r > 5)

    def test_initial_agents_above_threshold_reset(self, space3):
        cfg = linear_spike_config(space3, N=3, T=0.01)
        init = EmpiricalMeasure([[0.9], [0.1], [0.2]], np.full((3, 3), 1 / 3), space3)
        traj, _ = simulate_spiking(cfg, init)
        assert traj.X[0, 0, 0] == X_R

    def test_random_threshold(self, space3):
        cfg = linear_spike_config(space3, N=50, T=1.0, X_F_range=(0.6, 0.7))
        traj, rec = simulate_spiking(cfg, LAW.sample(50, space3, 1, 0))
        assert traj.X.max() <= traj.meta["X_F"] == rec.X_F
        assert 0.6 <= rec.X_F <= 0.7


class TestHeterogeneousNoise:
    def test_spec_validation(self):
        with pytest.raises(ConfigurationError, match="total mass"):
            HeterogeneousNoiseSpec([0.1], [[1.0, 0.0]])
        with pytest.raises(ConfigurationError, match="nonnegative"):
            HeterogeneousNoiseSpec([-0.1], [[1.0, -1.0]])
        with pytest.raises(ConfigurationError):
            HeterogeneousNoiseSpec([0.1, 0.2], [[1.0, -1.0]])

    def test_default_basis(self, space3):
        spec = default_noise_spec(space3, 0.4)
        assert spec.H == 2
        assert_allclose(spec.a, [0.2, 0.1])
        assert_allclose(spec.e, [[2.0, -2.0, 0.0], [0.0, 2.0, -2.0]])

    def test_zero_coefficients_reduce_to_operator(self, space3, linear_field, rng):
        spec = HeterogeneousNoiseSpec(np.zeros(2), default_noise_spec(space3, 1.0).e)
        psi = LAW.sample(6, space3, 1, 1)
        R = spec.path(5, 10, 0.01)
        for y in psi.agents:
            got = heterogeneous_label_drift(spec, 7, y, psi, linear_field, R).weights
            assert_allclose(got, linear_field.T(y, psi).weights, atol=0)

    def test_perturbed_argument_keeps_unit_mass(self):
        spec = HeterogeneousNoiseSpec([0.5], [[1.0, -1.0]])
        R = spec.path(1, 100, 0.01)
        lam = np.array([0.3, 0.7])
        assert_allclose((lam[None, :] + R).sum(axis=1), 1.0, atol=1e-14)
        assert np.abs(R).max() > 0

    def test_variance_of_pairing(self):
        s = line_space([0.0, 0.5, 1.0])
        spec = default_noise_spec(s, 0.6)
        phi = np.array([0.0, 0.4, 1.0])
        n_steps, dt = 5, 0.1
        t = n_steps * dt
        vals = np.array([spec.path(seed, n_steps, dt)[-1] @ phi for seed in range(10_000)])
        expected = t * np.sum(spec.a ** 2 * (spec.e @ phi) ** 2)
        assert abs(vals.var() / expected - 1) <= 0.10

    def test_het_run_keeps_simplex(self, space3):
        cfg = linear_spike_config(space3, N=50, T=1.0, het=default_noise_spec(space3, 0.5))
        traj, rec = simulate_spiking(cfg, LAW.sample(50, space3, 1, 2))
        assert traj.label_violation() <= 1e-10
        assert traj.X.max() <= X_F
        assert "label_noise_path" in traj.meta
        plain, _ = simulate_spiking(replace(cfg, het=None), LAW.sample(50, space3, 1, 2))
        assert not np.array_equal(plain.L, traj.L)

    def test_rejects_unsigned_fields(self, space3):
        fp = build_field("constant", "replicator", space3, 1, {"c": 1.0})
        spec = default_noise_spec(space3, 0.1)
        psi = LAW.sample(3, space3, 1, 0)
        with pytest.raises(ConfigurationError):
            heterogeneous_label_drift(spec, 0, psi.agent(0), psi, fp, spec.path(0, 2, 0.1))
