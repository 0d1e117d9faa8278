import numpy as np
import pytest
from numpy.testing import assert_array_equal

from mflab import io as mio
from mflab.errors import UsageError
from mflab.fields import build_field
from mflab.measures import LabelSpace, line_space
from mflab.particle import InitialLaw, SimConfig, simulate
from mflab.spiking import SpikeConfig, raster_and_rates, simulate_spiking


@pytest.fixture
def traj(space3):
    fp = build_field("ou", "consensus", space3, 1, {"kappa": 1.0})
    cfg = SimConfig(N=4, d=1, dt=0.1, T=1.0, sigma=0.3, field=fp, seed=2)
    return simulate(cfg, InitialLaw(x_dist="normal", labels="dirichlet").sample(4, space3, 1, 2))


def fixpoint(tmp_path, write, read, obj, name):
    a, b = tmp_path / f"{name}1.csv", tmp_path / f"{name}2.csv"
    write(a, obj)
    write(b, read(a))
    assert a.read_bytes() == b.read_bytes()
    return read(a)


class TestLabelSpaceIO:
    def test_points_round_trip(self, tmp_path):
        s = line_space([0.0, 0.1, 1.0 / 3.0])
        back = fixpoint(tmp_path, mio.write_label_space, mio.read_label_space, s, "s")
        assert back == s
        assert_array_equal(back.coords, s.coords)

    def test_named_atoms_without_coords(self, tmp_path):
        s = LabelSpace(("low", "mid", "high"), [[0, 1, 1.5], [1, 0, 0.7], [1.5, 0.7, 0]])
        back = fixpoint(tmp_path, mio.write_label_space, mio.read_label_space, s, "s")
        assert back == s and back.coords is None

    def test_wrong_header(self, tmp_path):
        p = tmp_path / "bad.csv"
        p.write_text("a,b\n1,2\n")
        with pytest.raises(UsageError):
            mio.read_label_space(p)


def test_measures_round_trip(tmp_path, space3, rng):
    W = rng.dirichlet(np.ones(3), size=5)
    mio.write_measures(tmp_path / "m.csv", W, space3)
    assert_array_equal(mio.read_measures(tmp_path / "m.csv"), W)
    mio.write_measures(tmp_path / "m2.csv", mio.read_measures(tmp_path / "m.csv"), space3)
    assert (tmp_path / "m.csv").read_bytes() == (tmp_path / "m2.csv").read_bytes()


class TestTrajectoryIO:
    def test_round_trip(self, tmp_path, traj, space3):
        n = mio.write_trajectory(tmp_path / "t.csv", traj)
        assert n == 4 * 11
        back = mio.read_trajectory(tmp_path / "t.csv", space3)
        assert_array_equal(back.X, traj.X)
        assert_array_equal(back.L, traj.L)
        assert_array_equal(back.times, traj.times)
        mio.write_trajectory(tmp_path / "t2.csv", back)
        assert (tmp_path / "t.csv").read_bytes() == (tmp_path / "t2.csv").read_bytes()

    def test_stride_keeps_final_time(self, tmp_path, traj, space3):
        n = mio.write_trajectory(tmp_path / "t.csv", traj, stride=3)
        back = mio.read_trajectory(tmp_path / "t.csv", space3)
        assert_array_equal(back.times, traj.times[[0, 3, 6, 9, 10]])
        assert n == 5 * 4

    def test_header_checked(self, tmp_path, traj):
        mio.write_trajectory(tmp_path / "t.csv", traj)
        with pytest.raises(UsageError, match="header"):
            mio.read_trajectory(tmp_path / "t.csv", line_space([0, 1]))

    def test_noise(self, tmp_path, traj):
        mio.write_noise(tmp_path / "n.csv", traj.noise)
        back = mio.read_noise(tmp_path / "n.csv")
        assert_array_equal(back, traj.noise)
        mio.write_noise(tmp_path / "n2.csv", back)
        assert (tmp_path / "n.csv").read_bytes() == (tmp_path / "n2.csv").read_bytes()

    def test_replay_from_noise_log(self, tmp_path, traj, space3):
        mio.write_noise(tmp_path / "n.csv", traj.noise)
        fp = build_field("ou", "consensus", space3, 1, {"kappa": 1.0})
        cfg = SimConfig(N=4, d=1, dt=0.1, T=1.0, sigma=0.3, field=fp, seed=999)
        again = simulate(cfg, traj.at(0), noise=mio.read_noise(tmp_path / "n.csv"))
        assert_array_equal(again.X, traj.X)


def test_spike_files(tmp_path, linear_field, space3):
    base = SimConfig(N=30, d=1, dt=1e-3, T=1.0, sigma=0.005, field=linear_field, theta=1.0,
                     feasibility="adaptive")
    _, rec = simulate_spiking(SpikeConfig(base), InitialLaw(x_lo=0.01, x_hi=0.7).sample(30, space3, 1, 0))
    assert len(rec) > 0
    mio.write_raster(tmp_path / "r.csv", rec)
    assert mio.read_raster(tmp_path / "r.csv") == rec.spikes
    table = raster_and_rates(rec, 0.1)
    mio.write_rates(tmp_path / "q.csv", table)
    b, r = mio.read_rates(tmp_path / "q.csv")
    assert_array_equal(b, table.bin_start)
    assert_array_equal(r, table.rate)


def test_io_errors_name_the_path(tmp_path):
    missing = tmp_path / "nope" / "x.csv"
    with pytest.raises(OSError, match="nope"):
        mio.read_measures(missing)
    with pytest.raises(OSError, match="nope"):
        mio.write_measures(missing, np.ones((1, 1)), line_space([0.0]))
    empty = tmp_path / "e.csv"
    empty.write_text("")
    with pytest.raises(UsageError, match="empty"):
        mio.read_measures(empty)
