"""A single mixture-of-experts layer: SwiGLU experts, dispatch, combine.

Forward and backward are written out by hand in numpy.  The backward pass is
checked against central finite differences in the test suite, so nothing here
may silently depend on an autodiff framework.

Dispatch is grouped per expert with token rows kept in ascending order and
experts processed in ascending index order; the combine step therefore sums
contributions in a fixed order and runs are bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .balance import BalanceStrategy
from .config import INIT_STD, LabConfig, LoadStats, TokenBatch
from .router import (
    RouterState,
    RoutingDecision,
    accumulate_load,
    compute_logits,
    init_router,
    select_top_k,
    softmax_probs,
)


@dataclass
class ExpertParams:
    """One SwiGLU feed-forward expert, no bias terms.

    w_gate and w_up project hidden -> intermediate, w_down projects back.
    """

    w_gate: np.ndarray  # (intermediate, hidden)
    w_up: np.ndarray    # (intermediate, hidden)
    w_down: np.ndarray  # (hidden, intermediate)

    def __post_init__(self):
        m, d = self.w_gate.shape
        if self.w_up.shape != (m, d):
            raise ValueError("w_up must match w_gate's shape")
        if self.w_down.shape != (d, m):
            raise ValueError("w_down must be the transpose shape of w_gate")


@dataclass
class MoELayer:
    router: RouterState
    experts: list[ExpertParams]
    layer_index: int = 0

    def __post_init__(self):
        if len(self.experts) != self.router.num_experts:
            raise ValueError("expert list length must equal the router's num_experts")

    @property
    def num_experts(self) -> int:
        return len(self.experts)


def init_layer(cfg: LabConfig, rng: np.random.Generator, layer_index: int = 0) -> MoELayer:
    """Fresh layer with N(0, INIT_STD^2) weights; draw order is fixed."""
    router = init_router(cfg, rng)
    m, d = cfg.expert_intermediate_size, cfg.hidden_size
    experts = []
    for _ in range(cfg.num_experts):
        experts.append(
            ExpertParams(
                w_gate=rng.normal(0.0, INIT_STD, size=(m, d)),
                w_up=rng.normal(0.0, INIT_STD, size=(m, d)),
                w_down=rng.normal(0.0, INIT_STD, size=(d, m)),
            )
        )
    return MoELayer(router=router, experts=experts, layer_index=layer_index)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # Split by sign so exp never overflows.
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _swish(z: np.ndarray) -> np.ndarray:
    return z * _sigmoid(z)


def swiglu_forward(x: np.ndarray, expert: ExpertParams) -> np.ndarray:
    """y = w_down @ (swish(w_gate x) * (w_up x)), for one vector or a batch."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    rows = x[None, :] if single else x
    h = rows @ expert.w_gate.T
    u = rows @ expert.w_up.T
    y = (_swish(h) * u) @ expert.w_down.T
    return y[0] if single else y


@dataclass
class _ExpertCache:
    rows: np.ndarray      # token rows routed here, ascending
    slots: np.ndarray     # which of the token's k slots selected this expert
    gates: np.ndarray     # combine weight per routed token
    h: np.ndarray         # pre-activation of the gate projection
    u: np.ndarray         # up projection
    y: np.ndarray         # expert output before gate scaling


@dataclass
class ForwardCache:
    batch: TokenBatch
    layer: MoELayer
    decision: RoutingDecision
    top_k: int
    temperature: float
    renormalize: bool
    per_expert: list[_ExpertCache | None]


@dataclass
class ForwardResult:
    outputs: np.ndarray
    decision: RoutingDecision
    stats: LoadStats
    cache: ForwardCache


@dataclass
class LayerGrads:
    d_input: np.ndarray
    d_gate_weights: np.ndarray
    d_experts: list[ExpertParams]


def moe_forward(
    batch: TokenBatch,
    layer: MoELayer,
    top_k: int,
    strategy: BalanceStrategy | None = None,
    temperature: float = 1.0,
    renormalize: bool = True,
    fp32_gating: bool = False,
) -> ForwardResult:
    """Route a batch, run the selected experts, combine with gate values.

    Under the loss-free strategy the selection scores are the logits shifted
    by the router's expert bias; probabilities (and therefore gate values and
    load statistics) always come from the raw logits.  There is no capacity
    limit and no token dropping.
    """
    logits = compute_logits(batch, layer.router, fp32=fp32_gating)
    probs = softmax_probs(logits, temperature)
    if strategy is not None and strategy.kind == "loss_free":
        scores = logits + layer.router.expert_bias[None, :]
    else:
        scores = logits
    decision = select_top_k(scores, probs, top_k, renormalize=renormalize, logits=logits)
    stats = accumulate_load(decision, layer.num_experts)

    n, d = batch.embeddings.shape
    outputs = np.zeros((n, d))
    per_expert: list[_ExpertCache | None] = [None] * layer.num_experts
    for e in range(layer.num_experts):
        hit = decision.assignments == e
        rows = np.nonzero(hit.any(axis=1))[0]
        if rows.size == 0:
            continue
        slots = np.argmax(hit[rows], axis=1)
        gates = decision.gate_values[rows, slots]
        x_e = batch.embeddings[rows]
        expert = layer.experts[e]
        h = x_e @ expert.w_gate.T
        u = x_e @ expert.w_up.T
        y = (_swish(h) * u) @ expert.w_down.T
        outputs[rows] += gates[:, None] * y
        per_expert[e] = _ExpertCache(rows=rows, slots=slots, gates=gates, h=h, u=u, y=y)

    cache = ForwardCache(
        batch=batch,
        layer=layer,
        decision=decision,
        top_k=top_k,
        temperature=temperature,
        renormalize=renormalize,
        per_expert=per_expert,
    )
    return ForwardResult(outputs=outputs, decision=decision, stats=stats, cache=cache)


def moe_backward(
    upstream: np.ndarray,
    cache: ForwardCache,
    balance_logit_grad: np.ndarray | None = None,
) -> LayerGrads:
    """Analytic gradients of the layer given upstream output gradients.

    balance_logit_grad, when given, is added to the task-loss logit gradient
    before it reaches the gate weights and the input, which is how a balance
    strategy's alpha-scaled gradient joins the total.  Experts that received
    no tokens get exactly zero parameter gradients.
    """
    upstream = np.asarray(upstream, dtype=np.float64)
    layer = cache.layer
    decision = cache.decision
    x = cache.batch.embeddings
    n, d = x.shape
    k = cache.top_k

    d_input = np.zeros((n, d))
    d_experts = []
    d_gates = np.zeros((n, k))  # gradient wrt the combine weights

    for e in range(layer.num_experts):
        ec = cache.per_expert[e]
        expert = layer.experts[e]
        if ec is None:
            d_experts.append(
                ExpertParams(
                    w_gate=np.zeros_like(expert.w_gate),
                    w_up=np.zeros_like(expert.w_up),
                    w_down=np.zeros_like(expert.w_down),
                )
            )
            continue
        up_e = upstream[ec.rows]
        # Combine-weight path: out += g * y  =>  dL/dg = <upstream, y>.
        d_gates[ec.rows, ec.slots] = np.einsum("ij,ij->i", up_e, ec.y)
        # Expert path with upstream scaled by the gate value.
        dy = up_e * ec.gates[:, None]
        sig1 = _sigmoid(ec.h)
        sw = ec.h * sig1
        da = dy @ expert.w_down
        d_w_down = dy.T @ (sw * ec.u)
        dh = da * ec.u * sig1 * (1.0 + ec.h * (1.0 - sig1))
        du = da * sw
        x_e = x[ec.rows]
        d_experts.append(
            ExpertParams(w_gate=dh.T @ x_e, w_up=du.T @ x_e, w_down=d_w_down)
        )
        d_input[ec.rows] += dh @ expert.w_gate + du @ expert.w_up

    # Gate values back to probabilities.
    d_probs = np.zeros((n, decision.num_experts))
    sel = decision.assignments
    flat = np.arange(n)[:, None]
    if k == 1 or not cache.renormalize:
        np.add.at(d_probs, (flat, sel), d_gates)
    else:
        # g = q / sum(q) over the selected entries.
        q = np.take_along_axis(decision.probs, sel, axis=1)
        s = q.sum(axis=1, keepdims=True)
        g = q / s
        dq = (d_gates - (d_gates * g).sum(axis=1, keepdims=True)) / s
        np.add.at(d_probs, (flat, sel), dq)

    # Softmax jacobian, then optional balance contribution.
    probs = decision.probs
    inner = np.einsum("ji,ji->j", d_probs, probs)
    d_logits = probs * (d_probs - inner[:, None]) / cache.temperature
    if balance_logit_grad is not None:
        d_logits = d_logits + balance_logit_grad

    d_gate_weights = x.T @ d_logits
    d_input += d_logits @ layer.router.gate_weights.T
    return LayerGrads(d_input=d_input, d_gate_weights=d_gate_weights, d_experts=d_experts)
