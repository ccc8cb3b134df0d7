"""Shared configuration and load-statistics types.

Everything downstream (routing, balancing, the training harness) receives its
structural hyperparameters through :class:`LabConfig`.  All real arithmetic is
64-bit; the only exception is the optional 32-bit gating path, which exists as
an explicitly tested correctness mode.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Init scale for every learnable tensor.
INIT_STD = 0.02

# Statistic scopes: a micro batch is what one parallel group sees, the global
# batch is the union across groups.
MICRO_BATCH = "micro_batch"
GLOBAL_BATCH = "global_batch"
SCOPES = (MICRO_BATCH, GLOBAL_BATCH)


@dataclass(frozen=True)
class LabConfig:
    """Structural and routing hyperparameters for one experiment.

    ``renormalize_gates`` only matters for top_k > 1: combine weights are
    either renormalized over the selected experts (default) or taken raw from
    the softmax.  With top_k == 1 the raw selected probability is always used.
    """

    num_experts: int
    top_k: int
    hidden_size: int
    expert_intermediate_size: int
    num_layers: int
    num_parallel_groups: int = 1
    seed: int = 0
    lbl_coefficient: float = 1e-3
    temperature: float = 1.0
    bias_step: float = 1e-3
    renormalize_gates: bool = True
    fp32_gating: bool = False


def validate_config(cfg: LabConfig) -> LabConfig:
    """Check every LabConfig invariant; raise ValueError naming the first violation."""
    if not isinstance(cfg.num_experts, int) or cfg.num_experts < 1:
        raise ValueError("num_experts must be a positive integer")
    if not isinstance(cfg.top_k, int) or cfg.top_k < 1:
        raise ValueError("top_k must be a positive integer")
    if cfg.top_k > cfg.num_experts:
        raise ValueError("top_k exceeds num_experts")
    if not isinstance(cfg.hidden_size, int) or cfg.hidden_size < 1:
        raise ValueError("hidden_size must be a positive integer")
    if not isinstance(cfg.expert_intermediate_size, int) or cfg.expert_intermediate_size < 1:
        raise ValueError("expert_intermediate_size must be a positive integer")
    if not isinstance(cfg.num_layers, int) or cfg.num_layers < 1:
        raise ValueError("num_layers must be a positive integer")
    if not isinstance(cfg.num_parallel_groups, int) or cfg.num_parallel_groups < 1:
        raise ValueError("num_parallel_groups must be a positive integer")
    if not isinstance(cfg.seed, int):
        raise ValueError("seed must be an integer")
    if not np.isfinite(cfg.lbl_coefficient) or cfg.lbl_coefficient < 0:
        raise ValueError("lbl_coefficient must be finite and non-negative")
    if not np.isfinite(cfg.temperature) or cfg.temperature <= 0:
        raise ValueError("temperature must be positive")
    if not np.isfinite(cfg.bias_step) or cfg.bias_step < 0:
        raise ValueError("bias_step must be finite and non-negative")
    return cfg


def desk_lab_config(**overrides) -> LabConfig:
    """Small configuration that trains in minutes on one CPU core.

    The balance coefficient is raised above the full-scale default: with only
    16 experts the auxiliary gradient has to flip whole-cluster assignments
    within 2000 steps, which needs a stronger pull than a 56-layer run does.
    """
    base = dict(
        num_experts=16,
        top_k=1,
        hidden_size=32,
        expert_intermediate_size=16,
        num_layers=4,
        num_parallel_groups=4,
        seed=0,
        lbl_coefficient=1e-2,
    )
    base.update(overrides)
    return validate_config(LabConfig(**base))


def reference_lab_config(**overrides) -> LabConfig:
    """Full-scale reference shape (96 experts, 56 layers).  Accepted everywhere,
    not meant to be trained here."""
    base = dict(
        num_experts=96,
        top_k=1,
        hidden_size=1536,
        expert_intermediate_size=768,
        num_layers=56,
        num_parallel_groups=4,
        seed=0,
    )
    base.update(overrides)
    return validate_config(LabConfig(**base))


@dataclass
class TokenBatch:
    """A dense batch of token embeddings, shape (n_tokens, hidden_size)."""

    embeddings: np.ndarray

    def __post_init__(self):
        emb = np.asarray(self.embeddings, dtype=np.float64)
        if emb.ndim != 2:
            raise ValueError("embeddings must be a 2-d array (n_tokens, hidden_size)")
        if emb.shape[0] < 1:
            raise ValueError("batch must contain at least one token")
        if not np.all(np.isfinite(emb)):
            raise ValueError("embeddings contain non-finite values")
        self.embeddings = emb

    @property
    def n_tokens(self) -> int:
        return self.embeddings.shape[0]

    @property
    def hidden_size(self) -> int:
        return self.embeddings.shape[1]


@dataclass
class LoadStats:
    """Per-expert load statistics for one batch at one scope.

    fractions[i] is the share of tokens routed to expert i (counts[i] divided
    by n_tokens), mean_probs[i] the mean gating probability.  n_tokens is
    carried so reductions can check that groups contributed equal batches and
    so gradient normalization knows the token count behind the statistics.
    """

    fractions: np.ndarray
    mean_probs: np.ndarray
    counts: np.ndarray
    n_tokens: int
    scope: str = MICRO_BATCH

    def __post_init__(self):
        self.fractions = np.asarray(self.fractions, dtype=np.float64)
        self.mean_probs = np.asarray(self.mean_probs, dtype=np.float64)
        self.counts = np.asarray(self.counts)
        if self.scope not in SCOPES:
            raise ValueError(f"scope must be one of {SCOPES}")
        if not (self.fractions.shape == self.mean_probs.shape == self.counts.shape):
            raise ValueError("fractions, mean_probs and counts must have equal shapes")
        if self.n_tokens < 1:
            raise ValueError("n_tokens must be positive")
        if np.any(self.counts < 0):
            raise ValueError("counts must be non-negative")
        if np.any(self.fractions < 0):
            raise ValueError("fractions must be non-negative")
        # Sum invariants: fractions add up to the per-token assignment count
        # k, mean_probs to one.
        k = float(self.counts.sum()) / self.n_tokens
        if abs(float(self.fractions.sum()) - k) > 1e-9:
            raise ValueError("fractions must sum to counts.sum() / n_tokens")
        if abs(float(self.mean_probs.sum()) - 1.0) > 1e-9:
            raise ValueError("mean_probs must sum to one")

    @property
    def num_experts(self) -> int:
        return self.fractions.shape[0]
