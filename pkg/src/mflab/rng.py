"""Deterministic random streams derived from one 64-bit root seed.

Every stream is a Philox counter-based generator keyed by
``SeedSequence(root_seed, spawn_key=(stream_id, index))``.  Agent i's Brownian
increments therefore depend only on (root seed, i), never on how many agents
exist, on thread count, or on the order in which agents are processed.
"""
from __future__ import annotations

import numpy as np

# stream ids; recorded in run manifests
AGENT_NOISE = 1
INITIAL = 2
LABEL_NOISE = 3
PROBE = 4
REPLICATE = 5
THRESHOLD = 6

STREAM_SCHEME = (
    "Philox(SeedSequence(root, spawn_key=(stream, index))); streams: "
    "1=agent Brownian increments (index=agent), 2=initial draws, "
    "3=label-noise Brownian paths (index=mode), 4=probes, 5=replicate seeds, "
    "6=random firing threshold"
)


def stream(seed: int, stream_id: int, index: int = 0) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=(stream_id, index))
    return np.random.Generator(np.random.Philox(ss))


def child_seed(seed: int, stream_id: int, index: int) -> int:
    """A derived 64-bit seed, used to give replicates their own root seed."""
    ss = np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=(stream_id, index))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def brownian_increments(seed: int, n_steps: int, N: int, d: int, dt: float,
                        first_agent: int = 0) -> np.ndarray:
    """Gaussian increments with variance dt per coordinate, shape (n_steps, N, d)."""
    out = np.empty((n_steps, N, d))
    sd = np.sqrt(dt)
    for i in range(N):
        out[:, i, :] = stream(seed, AGENT_NOISE, first_agent + i).standard_normal((n_steps, d)) * sd
    return out
