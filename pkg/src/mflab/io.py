"""CSV import/export for label spaces, measures, trajectories and spike data.

Floats are written with 17 significant digits so that every file reads back to
the exact same doubles, which makes write-read-write a fixpoint.
"""
from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .errors import UsageError
from .measures import LabelSpace
from .particle import Trajectory
from .spiking import RateTable, SpikeRecord


def fmt(v: float) -> str:
    return f"{float(v):.17g}"


def _open_w(path):
    path = Path(path)
    try:
        return open(path, "w", newline="")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror}") from exc


def _read_rows(path) -> tuple[list[str], list[list[str]]]:
    path = Path(path)
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc.strerror}") from exc
    if not rows:
        raise UsageError(f"{path}: empty file")
    return rows[0], rows[1:]


# ---------------------------------------------------------------------------
# label spaces and measures
# ---------------------------------------------------------------------------


def write_label_space(path, space: LabelSpace) -> None:
    """Header ``atom,coord,<atom ids>``; one row per atom with its coordinate
    (empty when the space has none) and its row of the distance matrix."""
    with _open_w(path) as fh:
        w = csv.writer(fh)
        w.writerow(["atom", "coord"] + [str(a) for a in space.atoms])
        for i, a in enumerate(space.atoms):
            c = "" if space.coords is None else fmt(space.coords[i])
            w.writerow([str(a), c] + [fmt(x) for x in space.dist[i]])


def read_label_space(path) -> LabelSpace:
    head, rows = _read_rows(path)
    if head[:2] != ["atom", "coord"]:
        raise UsageError(f"{path}: not a label-space table")
    atoms = [int(r[0]) if r[0].lstrip("-").isdigit() else r[0] for r in rows]
    dist = np.array([[float(x) for x in r[2:]] for r in rows])
    coords = None
    if rows and all(r[1] != "" for r in rows):
        coords = np.array([float(r[1]) for r in rows])
    return LabelSpace(tuple(atoms), dist, coords)


def write_measures(path, W: np.ndarray, space: LabelSpace) -> None:
    W = np.atleast_2d(W)
    with _open_w(path) as fh:
        w = csv.writer(fh)
        w.writerow([str(a) for a in space.atoms])
        for row in W:
            w.writerow([fmt(x) for x in row])


def read_measures(path) -> np.ndarray:
    _, rows = _read_rows(path)
    return np.array([[float(x) for x in r] for r in rows])


# ---------------------------------------------------------------------------
# trajectories and noise
# ---------------------------------------------------------------------------


def trajectory_header(d: int, space: LabelSpace) -> list[str]:
    return ["t", "agent"] + [f"x_{j + 1}" for j in range(d)] + [f"lam_{a}" for a in space.atoms]


def write_trajectory(path, traj: Trajectory, stride: int = 1) -> int:
    """Rows (t, agent, x_1..x_d, lam_1..lam_K) for every ``stride``-th grid
    time (the final time is always included).  Returns the row count."""
    n_t, N, d = traj.X.shape
    ks = list(range(0, n_t, stride))
    if ks[-1] != n_t - 1:
        ks.append(n_t - 1)
    with _open_w(path) as fh:
        w = csv.writer(fh)
        w.writerow(trajectory_header(d, traj.space))
        for k in ks:
            t = fmt(traj.times[k])
            for i in range(N):
                w.writerow([t, i] + [fmt(x) for x in traj.X[k, i]] + [fmt(x) for x in traj.L[k, i]])
    return len(ks) * N


def read_trajectory(path, space: LabelSpace) -> Trajectory:
    head, rows = _read_rows(path)
    K = space.K
    d = len(head) - 2 - K
    if d < 1 or head != trajectory_header(d, space):
        raise UsageError(f"{path}: header does not match the label space")
    arr = np.array([[float(x) for x in r] for r in rows])
    times = np.unique(arr[:, 0])
    N = int(arr[:, 1].max()) + 1
    if arr.shape[0] != times.size * N:
        raise UsageError(f"{path}: expected {times.size * N} rows, found {arr.shape[0]}")
    arr = arr.reshape(times.size, N, -1)
    return Trajectory(times, arr[:, :, 2:2 + d].copy(), arr[:, :, 2 + d:].copy(),
                      np.zeros((0, N, d)), space)


def write_noise(path, noise: np.ndarray) -> None:
    """Brownian increments as rows (step, agent, dB_1..dB_d)."""
    n, N, d = noise.shape
    with _open_w(path) as fh:
        w = csv.writer(fh)
        w.writerow(["step", "agent"] + [f"dB_{j + 1}" for j in range(d)])
        for k in range(n):
            for i in range(N):
                w.writerow([k, i] + [fmt(x) for x in noise[k, i]])


def read_noise(path) -> np.ndarray:
    head, rows = _read_rows(path)
    d = len(head) - 2
    arr = np.array([[float(x) for x in r] for r in rows])
    n = int(arr[:, 0].max()) + 1
    N = int(arr[:, 1].max()) + 1
    return arr[:, 2:].reshape(n, N, d)


# ---------------------------------------------------------------------------
# spikes
# ---------------------------------------------------------------------------


def write_raster(path, record: SpikeRecord) -> None:
    with _open_w(path) as fh:
        w = csv.writer(fh)
        w.writerow(["agent", "t"])
        for i, t in zip(record.agents.tolist(), record.times.tolist()):
            w.writerow([i, fmt(t)])


def read_raster(path) -> list[tuple[int, float]]:
    _, rows = _read_rows(path)
    return [(int(r[0]), float(r[1])) for r in rows]


def write_rates(path, table: RateTable) -> None:
    with _open_w(path) as fh:
        w = csv.writer(fh)
        w.writerow(["bin_start", "rate"])
        for b, r in zip(table.bin_start, table.rate):
            w.writerow([fmt(b), fmt(r)])


def read_rates(path) -> tuple[np.ndarray, np.ndarray]:
    _, rows = _read_rows(path)
    arr = np.array([[float(x) for x in r] for r in rows]).reshape(-1, 2)
    return arr[:, 0], arr[:, 1]
