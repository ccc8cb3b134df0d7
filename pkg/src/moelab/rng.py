"""Counter-based random streams.

Each training step re-keys a Philox generator from (seed, step), so sampling
depends only on those two integers: the number of simulated parallel groups,
checkpoint boundaries, and execution order cannot perturb the draws.  Within a
step all consumers draw from the single stream in a fixed documented order.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1

# Reserved stream ids; training steps use ids 0 .. 2**63.
INIT_STREAM = _MASK64
TASK_STREAM = _MASK64 - 1


def stream(seed: int, stream_id: int) -> np.random.Generator:
    """Philox generator keyed by the 128-bit word (stream_id << 64) | seed."""
    if stream_id < 0 or stream_id > _MASK64:
        raise ValueError("stream_id out of range")
    key = (int(stream_id) << 64) | (int(seed) & _MASK64)
    return np.random.Generator(np.random.Philox(key=key))


def step_stream(seed: int, step: int) -> np.random.Generator:
    """Stream for one training step (batch sampling, then per-layer blur)."""
    if step < 0:
        raise ValueError("step must be non-negative")
    return stream(seed, step)


def init_stream(seed: int) -> np.random.Generator:
    """Stream used once to initialize all learnable parameters."""
    return stream(seed, INIT_STREAM)


def task_stream(seed: int) -> np.random.Generator:
    """Stream used once to build the synthetic task (centers, targets, bases)."""
    return stream(seed, TASK_STREAM)
