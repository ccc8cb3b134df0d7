"""Gating network: token-to-expert scores, probabilities and top-k selection.

The selection bias (used by loss-free balancing) enters the decision scores
only.  Gate values and load statistics are always derived from the unbiased
softmax probabilities, so bias updates can steer traffic without ever leaking
into the combine weights or the gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import INIT_STD, MICRO_BATCH, LabConfig, LoadStats, TokenBatch


@dataclass
class RouterState:
    gate_weights: np.ndarray  # (hidden_size, num_experts)
    expert_bias: np.ndarray   # (num_experts,), selection-only ballast

    def __post_init__(self):
        self.gate_weights = np.asarray(self.gate_weights, dtype=np.float64)
        self.expert_bias = np.asarray(self.expert_bias, dtype=np.float64)
        if self.gate_weights.ndim != 2:
            raise ValueError("gate_weights must be 2-d (hidden_size, num_experts)")
        if self.expert_bias.shape != (self.gate_weights.shape[1],):
            raise ValueError("expert_bias length must equal num_experts")

    @property
    def num_experts(self) -> int:
        return self.gate_weights.shape[1]


def init_router(cfg: LabConfig, rng: np.random.Generator) -> RouterState:
    weights = rng.normal(0.0, INIT_STD, size=(cfg.hidden_size, cfg.num_experts))
    return RouterState(gate_weights=weights, expert_bias=np.zeros(cfg.num_experts))


@dataclass
class RoutingDecision:
    """Routing outcome for one batch.

    assignments and gate_values have shape (n_tokens, k); each row holds
    distinct expert indices.  logits and probs are the full (n_tokens,
    num_experts) matrices the decision was derived from.
    """

    assignments: np.ndarray
    gate_values: np.ndarray
    logits: np.ndarray
    probs: np.ndarray

    def __post_init__(self):
        if self.assignments.shape != self.gate_values.shape:
            raise ValueError("assignments and gate_values must have equal shapes")
        if self.logits.shape != self.probs.shape:
            raise ValueError("logits and probs must have equal shapes")
        if self.assignments.shape[0] != self.logits.shape[0]:
            raise ValueError("row counts of assignments and logits must match")
        k = self.assignments.shape[1]
        if k > 1:
            sorted_rows = np.sort(self.assignments, axis=1)
            if np.any(sorted_rows[:, 1:] == sorted_rows[:, :-1]):
                raise ValueError("per-token expert indices must be distinct")
        row_sums = self.probs.sum(axis=1)
        if np.any(np.abs(row_sums - 1.0) > 1e-9):
            raise ValueError("probability rows must sum to one")

    @property
    def n_tokens(self) -> int:
        return self.assignments.shape[0]

    @property
    def top_k(self) -> int:
        return self.assignments.shape[1]

    @property
    def num_experts(self) -> int:
        return self.logits.shape[1]


def compute_logits(batch: TokenBatch, router: RouterState, fp32: bool = False) -> np.ndarray:
    """Dense gate scores, logits[j, i] = dot(embedding_j, gate_column_i).

    With fp32=True both operands are rounded to 32-bit floats and the product
    is carried out in 32-bit arithmetic before widening back, mirroring a
    reduced-precision gating path.
    """
    if batch.hidden_size != router.gate_weights.shape[0]:
        raise ValueError(
            f"hidden size mismatch: batch has {batch.hidden_size}, "
            f"router expects {router.gate_weights.shape[0]}"
        )
    if fp32:
        emb32 = batch.embeddings.astype(np.float32)
        w32 = router.gate_weights.astype(np.float32)
        return (emb32 @ w32).astype(np.float64)
    return batch.embeddings @ router.gate_weights


def softmax_probs(logits: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    """Row-wise temperature softmax with max subtraction for stability."""
    if not np.isfinite(temperature) or temperature <= 0:
        raise ValueError("temperature must be positive")
    z = np.asarray(logits, dtype=np.float64) / temperature
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def select_top_k(
    decision_scores: np.ndarray,
    probs: np.ndarray,
    k: int,
    renormalize: bool = True,
    logits: np.ndarray | None = None,
) -> RoutingDecision:
    """Pick the k highest-scoring experts per token.

    decision_scores may include the selection bias; gate_values are taken from
    probs regardless, so the bias never reaches the combine weights.  Ties
    break toward the lower expert index.  With k == 1 the raw selected
    probability is used; renormalize only applies for k > 1.

    logits defaults to decision_scores and should be passed explicitly when
    the scores were bias-shifted.
    """
    scores = np.asarray(decision_scores, dtype=np.float64)
    probs = np.asarray(probs, dtype=np.float64)
    if scores.shape != probs.shape:
        raise ValueError("decision_scores and probs must have equal shapes")
    n_experts = scores.shape[1]
    if k < 1:
        raise ValueError("top_k must be a positive integer")
    if k > n_experts:
        raise ValueError("top_k exceeds num_experts")
    # Stable sort of the negated scores keeps the original (ascending) expert
    # order among ties, which is exactly the lowest-index rule.
    order = np.argsort(-scores, axis=1, kind="stable")[:, :k]
    gates = np.take_along_axis(probs, order, axis=1)
    if renormalize and k > 1:
        gates = gates / gates.sum(axis=1, keepdims=True)
    if logits is None:
        logits = scores
    return RoutingDecision(assignments=order, gate_values=gates, logits=logits, probs=probs)


def accumulate_load(
    decision: RoutingDecision,
    num_experts: int,
    rows: np.ndarray | None = None,
) -> LoadStats:
    """Micro-batch load statistics: hard counts, routed fractions, mean probs.

    rows restricts the accounting to a subset of tokens (used when slicing a
    batch into parallel groups).
    """
    assignments = decision.assignments
    probs = decision.probs
    if rows is not None:
        assignments = assignments[rows]
        probs = probs[rows]
    n = assignments.shape[0]
    counts = np.bincount(assignments.ravel(), minlength=num_experts).astype(np.int64)
    if counts.shape[0] > num_experts:
        raise ValueError("assignment index exceeds num_experts")
    fractions = counts / n
    mean_probs = probs.mean(axis=0)
    return LoadStats(
        fractions=fractions,
        mean_probs=mean_probs,
        counts=counts,
        n_tokens=n,
        scope=MICRO_BATCH,
    )
