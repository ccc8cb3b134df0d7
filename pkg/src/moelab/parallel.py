"""Simulated data-parallel groups.

The simulation is sequential under the hood: sharding is plain contiguous
slicing and the all-reduce is a fixed-order serial mean, so results are
reproducible bit for bit and independent of any real parallel runtime.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import LoadStats, TokenBatch

# Element widths accepted by the traffic estimate.
DTYPE_BYTES = {"fp16": 2, "bf16": 2, "fp32": 4, "fp64": 8}


@dataclass
class GroupShard:
    """One group's contiguous share of a global batch."""

    group_index: int
    batch: TokenBatch
    stats: LoadStats | None = None


def shard_batch(batch: TokenBatch, num_groups: int) -> list[GroupShard]:
    """Split a batch into num_groups equal contiguous shards."""
    if num_groups < 1:
        raise ValueError("num_groups must be a positive integer")
    n = batch.n_tokens
    if n % num_groups != 0:
        raise ValueError(f"batch size {n} is not divisible by {num_groups} groups")
    per = n // num_groups
    return [
        GroupShard(group_index=g, batch=TokenBatch(batch.embeddings[g * per:(g + 1) * per]))
        for g in range(num_groups)
    ]


def group_rows(n_tokens: int, num_groups: int, group_index: int) -> np.ndarray:
    """Row indices of one group's shard within the global batch."""
    if n_tokens % num_groups != 0:
        raise ValueError(f"batch size {n_tokens} is not divisible by {num_groups} groups")
    per = n_tokens // num_groups
    return np.arange(group_index * per, (group_index + 1) * per)


def all_reduce_mean(vectors: list[np.ndarray]) -> np.ndarray:
    """Serial mean over group vectors, accumulated in ascending group order."""
    if not vectors:
        raise ValueError("vectors must not be empty")
    shape = np.asarray(vectors[0]).shape
    total = np.array(vectors[0], dtype=np.float64, copy=True)
    for v in vectors[1:]:
        v = np.asarray(v, dtype=np.float64)
        if v.shape != shape:
            raise ValueError("all vectors must share one shape")
        total += v
    return total / len(vectors)


def ep_traffic(micro_batch: int, top_k: int, hidden_size: int, bytes_per_element: int) -> int:
    """Per-device bytes moved by one expert-parallel dispatch.

    Every selected expert receives each routing token's hidden vector once, so
    the payload is micro_batch * top_k * hidden_size elements.
    """
    for name, value in (
        ("micro_batch", micro_batch),
        ("top_k", top_k),
        ("hidden_size", hidden_size),
        ("bytes_per_element", bytes_per_element),
    ):
        if not isinstance(value, (int, np.integer)) or value < 1:
            raise ValueError(f"{name} must be a positive integer")
    return int(micro_batch) * int(top_k) * int(hidden_size) * int(bytes_per_element)
