"""Synthetic clustered routing task.

Tokens are drawn around well separated cluster centers and the model has to
map each token to its cluster's target vector.  Routing difficulty is injected
per layer: before a layer sees the stream, high-amplitude noise confined to a
fixed low-rank subspace is added.  That subspace pollutes expert inputs badly
enough that quieting the layer is attractive, while cluster identity stays
linearly decodable in the orthogonal complement, so a determined balancing
objective can still learn clean routing there.  The subspace is kept narrow
(hidden_size/4 by default) so a single expert has the capacity to own the
cleanup, which is what lets unconstrained routing collapse onto few experts.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import LabConfig
from .rng import task_stream


@dataclass(frozen=True)
class TaskConfig:
    """Knobs for make_task; None values default from the LabConfig."""

    num_clusters: int | None = None
    separability: float = 4.0
    signal_scale: float = 2.0
    anchor_scale: float = 4.0
    blur_rank: int | None = None
    full_noise_fraction: float = 0.0
    layer_difficulty: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.num_clusters is not None and self.num_clusters < 1:
            raise ValueError("num_clusters must be a positive integer")
        if not np.isfinite(self.separability) or self.separability <= 0:
            raise ValueError("separability must be positive")
        if self.signal_scale <= 0:
            raise ValueError("signal_scale must be positive")
        if not np.isfinite(self.anchor_scale) or self.anchor_scale < 0:
            raise ValueError("anchor_scale must be non-negative")
        if self.blur_rank is not None and self.blur_rank < 1:
            raise ValueError("blur_rank must be a positive integer")
        if not np.isfinite(self.full_noise_fraction) or self.full_noise_fraction < 0:
            raise ValueError("full_noise_fraction must be non-negative")
        if self.layer_difficulty is not None:
            for v in self.layer_difficulty:
                if not np.isfinite(v) or v < 0:
                    raise ValueError("layer_difficulty entries must be non-negative")


def default_layer_difficulty(num_layers: int) -> tuple[float, ...]:
    """Hard lowest layer, clean top layer, geometric taper in between."""
    if num_layers == 1:
        return (0.0,)
    values = []
    for layer in range(num_layers):
        frac = layer / (num_layers - 1)
        values.append(round(4.0 * (0.06 ** frac), 6))
    values[-1] = 0.0
    return tuple(values)


@dataclass
class SyntheticTask:
    num_clusters: int
    centers: np.ndarray          # (num_clusters, hidden)
    separability: float
    targets: np.ndarray          # (num_clusters, hidden)
    anchor: np.ndarray           # (hidden,), added to every token
    layer_difficulty: tuple[float, ...]
    full_noise_fraction: float
    noise_bases: np.ndarray      # (num_layers, hidden, blur_rank), orthonormal columns

    def __post_init__(self):
        if self.centers.shape != self.targets.shape:
            raise ValueError("centers and targets must have equal shapes")
        if self.centers.shape[0] != self.num_clusters:
            raise ValueError("centers row count must equal num_clusters")
        if len(self.layer_difficulty) != self.noise_bases.shape[0]:
            raise ValueError("layer_difficulty length must match noise_bases")


def make_task(cfg: LabConfig, task_cfg: TaskConfig = TaskConfig()) -> SyntheticTask:
    """Deterministic task from cfg.seed; identical seeds give identical tasks.

    Draw order is fixed (centers, targets, then one basis per layer) and does
    not depend on the difficulty values, so tasks that differ only in
    layer_difficulty share centers and targets.
    """
    rng = task_stream(cfg.seed)
    d = cfg.hidden_size
    c = task_cfg.num_clusters or cfg.num_experts
    rank = task_cfg.blur_rank or max(1, d // 4)
    if rank > d:
        raise ValueError("blur_rank cannot exceed hidden_size")
    difficulty = task_cfg.layer_difficulty or default_layer_difficulty(cfg.num_layers)
    if len(difficulty) != cfg.num_layers:
        raise ValueError("layer_difficulty length must equal num_layers")

    centers = rng.normal(0.0, 1.0, size=(c, d)) * task_cfg.signal_scale
    targets = rng.normal(0.0, 1.0, size=(c, d))
    # Shared offset on every token.  Without it a router with no bias column
    # has no clean way to shift one expert's score for all tokens at once,
    # which is exactly the move the p-uniform shortcut needs.
    anchor = rng.normal(0.0, 1.0, size=d)
    norm = np.linalg.norm(anchor)
    anchor = anchor / norm * task_cfg.anchor_scale if norm > 0 else anchor
    bases = np.empty((cfg.num_layers, d, rank))
    for layer in range(cfg.num_layers):
        q, _ = np.linalg.qr(rng.normal(0.0, 1.0, size=(d, rank)))
        bases[layer] = q
    return SyntheticTask(
        num_clusters=c,
        centers=centers,
        separability=task_cfg.separability,
        targets=targets,
        anchor=anchor,
        layer_difficulty=tuple(float(v) for v in difficulty),
        full_noise_fraction=task_cfg.full_noise_fraction,
        noise_bases=bases,
    )


def sample_batch(
    task: SyntheticTask,
    rng: np.random.Generator,
    n_tokens: int,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Draw one stratified batch: (embeddings, cluster_ids, targets).

    Cluster composition is as even as integer division allows, the order is a
    seeded permutation, and the token noise scales with 1/separability.  The
    rng is consumed in a fixed order (permutation first, then noise).
    """
    if n_tokens < 1:
        raise ValueError("n_tokens must be positive")
    c = task.num_clusters
    base, rem = divmod(n_tokens, c)
    ids = np.concatenate([np.repeat(np.arange(c), base), np.arange(rem)])
    ids = ids[rng.permutation(n_tokens)].astype(np.int64)
    noise = rng.standard_normal((n_tokens, task.centers.shape[1])) / task.separability
    embeddings = task.centers[ids] + noise + task.anchor
    # The anchor rides along in the target too, so carrying it costs nothing:
    # it exists to give routers a constant feature, not to create work.
    return embeddings, ids, task.targets[ids] + task.anchor


def blur_layer_input(
    task: SyntheticTask,
    layer: int,
    stream: np.ndarray,
    rng: np.random.Generator,
) -> np.ndarray:
    """Layer input after difficulty noise; draws nothing when difficulty is 0.

    Most of the noise lives in the layer's fixed subspace.  A smaller
    full-dimensional share also smears the cluster directions, so a weakly
    pushed router cannot cheaply specialize on cluster identity at a noisy
    layer, while a strongly pushed balancing objective still can.
    """
    amplitude = task.layer_difficulty[layer]
    if amplitude == 0.0:
        return stream
    basis = task.noise_bases[layer]
    z = rng.standard_normal((stream.shape[0], basis.shape[1]))
    blurred = stream + amplitude * (z @ basis.T)
    if task.full_noise_fraction > 0.0:
        w = rng.standard_normal(stream.shape)
        blurred = blurred + (task.full_noise_fraction * amplitude) * w
    return blurred
