"""Load-balancing strategies: losses, analytic gradients, bias control.

Two differentiable objectives live here.  The conventional balance loss is

    L = num_experts * sum_i f_i * p_i

with f_i the routed token fraction (a constant as far as the gradient is
concerned) and p_i the mean gating probability.  Its ideal minimum 1 is
reached whenever either vector is uniform, which is what allows the gating
network to satisfy it by flattening p alone.

The top-1 variant closes that escape hatch:

    L = num_experts * sum_i fhat_i^2 / pbar

where fhat_i is the mean gating probability of expert i and pbar the mean of
the per-token maximum probability.  Both numerator and denominator are
differentiable (the max contributes a subgradient at the argmax entry), so
uniformity of the soft fractions and routing confidence are optimized jointly.

Loss-free balancing has no loss at all: a per-expert selection bias is nudged
by a fixed step against the sign of the load error after every batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import GLOBAL_BATCH, LoadStats
from .parallel import all_reduce_mean
from .router import RoutingDecision, accumulate_load, softmax_probs

STRATEGY_KINDS = ("none", "lbl_micro_batch", "lbl_global_batch", "top1_lbl", "loss_free")
LOSS_KINDS = ("lbl_micro_batch", "lbl_global_batch", "top1_lbl")


@dataclass(frozen=True)
class BalanceStrategy:
    kind: str = "lbl_global_batch"
    alpha: float = 1e-3
    tau: float = 1.0
    gamma: float = 1e-3

    def __post_init__(self):
        if self.kind not in STRATEGY_KINDS:
            raise ValueError(f"unknown balance strategy {self.kind!r}")
        if not np.isfinite(self.alpha) or self.alpha < 0:
            raise ValueError("alpha must be finite and non-negative")
        if not np.isfinite(self.tau) or self.tau <= 0:
            raise ValueError("tau must be positive")
        if not np.isfinite(self.gamma) or self.gamma < 0:
            raise ValueError("gamma must be finite and non-negative")

    @property
    def has_loss(self) -> bool:
        return self.kind in LOSS_KINDS


def lbl_value(fractions: np.ndarray, mean_probs: np.ndarray, num_experts: int | None = None) -> float:
    """Conventional balance loss on raw vectors, num_experts * dot(f, p)."""
    f = np.asarray(fractions, dtype=np.float64)
    p = np.asarray(mean_probs, dtype=np.float64)
    if f.shape != p.shape:
        raise ValueError("fractions and mean_probs must have equal shapes")
    n = f.shape[0] if num_experts is None else num_experts
    return float(n * np.dot(f, p))


def conventional_lbl(stats: LoadStats, num_experts: int | None = None) -> float:
    """Conventional balance loss of one statistics scope."""
    return lbl_value(stats.fractions, stats.mean_probs, num_experts)


def top1_lbl(logits: np.ndarray, tau: float = 1.0) -> float:
    """Top-1 balance loss computed from raw logits.

    Soft fractions replace the hard counts and the mean top-1 probability
    divides the imbalance term, so flat probabilities raise the loss instead
    of satisfying it.
    """
    probs = softmax_probs(logits, tau)
    fhat = probs.mean(axis=0)
    pbar = float(probs.max(axis=1).mean())
    n_experts = probs.shape[1]
    return float(n_experts * np.dot(fhat, fhat) / pbar)


def global_batch_reduce(stats_list: list[LoadStats]) -> LoadStats:
    """Combine per-group micro-batch statistics into the global-batch view.

    Fractions and mean probabilities are averaged in fixed group order,
    counts are summed.  Groups must agree on num_experts and contribute
    equally sized batches, otherwise the mean of fractions would not equal
    the recount over the concatenated batch.
    """
    if not stats_list:
        raise ValueError("stats_list must not be empty")
    n_experts = stats_list[0].num_experts
    n_local = stats_list[0].n_tokens
    for s in stats_list[1:]:
        if s.num_experts != n_experts:
            raise ValueError("num_experts mismatch across groups")
        if s.n_tokens != n_local:
            raise ValueError("groups must contribute equal batch sizes")
    fractions = all_reduce_mean([s.fractions for s in stats_list])
    mean_probs = all_reduce_mean([s.mean_probs for s in stats_list])
    counts = np.zeros(n_experts, dtype=np.int64)
    for s in stats_list:
        counts += s.counts
    return LoadStats(
        fractions=fractions,
        mean_probs=mean_probs,
        counts=counts,
        n_tokens=n_local * len(stats_list),
        scope=GLOBAL_BATCH,
    )


def balance_gradient(
    strategy: BalanceStrategy,
    logits: np.ndarray,
    decision: RoutingDecision | None = None,
    stats: LoadStats | None = None,
    total_tokens: int | None = None,
) -> np.ndarray:
    """Gradient of alpha * balance loss with respect to the logits.

    For the conventional loss the routed fractions are treated as constants;
    only the probability path is differentiated.  stats defaults to the
    micro-batch statistics of the decision; pass reduced statistics for the
    global-batch scope.  total_tokens overrides the normalizing token count
    when the given logit rows are one group's share of a larger batch.
    """
    if strategy.kind in ("none", "loss_free"):
        raise ValueError(f"strategy {strategy.kind!r} has no balance gradient")
    logits = np.asarray(logits, dtype=np.float64)
    probs = softmax_probs(logits, strategy.tau)
    n_tokens, n_experts = probs.shape

    if strategy.kind == "top1_lbl":
        fhat = probs.mean(axis=0)
        top_idx = np.argmax(probs, axis=1)  # ties resolve to the lowest index
        pbar = float(probs[np.arange(n_tokens), top_idx].mean())
        ssq = float(np.dot(fhat, fhat))
        # dL/dP has a smooth term through fhat and a subgradient term through
        # the per-row max inside pbar.
        d_probs = np.broadcast_to(2.0 * n_experts * fhat / (n_tokens * pbar), probs.shape).copy()
        d_probs[np.arange(n_tokens), top_idx] -= n_experts * ssq / (pbar * pbar * n_tokens)
    else:
        if stats is None:
            if decision is None:
                raise ValueError("conventional balance gradient needs a decision or stats")
            stats = accumulate_load(decision, n_experts)
        denom = stats.n_tokens if total_tokens is None else total_tokens
        d_probs = np.broadcast_to(n_experts * stats.fractions / denom, probs.shape)

    # Chain through the temperature softmax row by row:
    # dL/dz_c = (1/tau) * P_c * (dL/dP_c - sum_i dL/dP_i * P_i).
    inner = np.einsum("ji,ji->j", d_probs, probs)
    d_logits = probs * (d_probs - inner[:, None]) / strategy.tau
    return strategy.alpha * d_logits


def bias_update(bias: np.ndarray, counts: np.ndarray, gamma: float) -> np.ndarray:
    """One loss-free control step on the selection bias.

    Experts that received fewer tokens than the mean are raised by gamma,
    experts above the mean are lowered, exact ties are left alone.  Returns a
    new vector; counts are never modified.
    """
    bias = np.asarray(bias, dtype=np.float64)
    counts = np.asarray(counts)
    if bias.shape != counts.shape:
        raise ValueError("bias and counts must have equal shapes")
    if not np.isfinite(gamma) or gamma < 0:
        raise ValueError("gamma must be finite and non-negative")
    mean = counts.mean()
    step = np.where(counts < mean, gamma, np.where(counts > mean, -gamma, 0.0))
    return bias + step
