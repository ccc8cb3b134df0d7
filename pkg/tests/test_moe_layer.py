"""MoE layer oracles: SwiGLU forward, dispatch/combine, full backward FD check.

Every oracle here is written as plain python loops over scalars so the
vectorized implementation is compared against an independent restatement.
"""

import math

import numpy as np
import pytest

from moelab.balance import BalanceStrategy, balance_gradient
from moelab.config import LabConfig, TokenBatch
from moelab.moe_layer import (
    ExpertParams,
    MoELayer,
    init_layer,
    moe_backward,
    moe_forward,
    swiglu_forward,
)
from moelab.router import RouterState


def scalar_sigmoid(z):
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


def scalar_swiglu(x, expert):
    """Per-element SwiGLU: y = W2 (swish(W1 x) * (W3 x))."""
    m, d = expert.w_gate.shape
    h = [sum(expert.w_gate[j, k] * x[k] for k in range(d)) for j in range(m)]
    u = [sum(expert.w_up[j, k] * x[k] for k in range(d)) for j in range(m)]
    a = [h[j] * scalar_sigmoid(h[j]) * u[j] for j in range(m)]
    return np.array(
        [sum(expert.w_down[i, j] * a[j] for j in range(m)) for i in range(d)]
    )


def oracle_topk(scores_row, k):
    order = sorted(range(len(scores_row)), key=lambda i: (-scores_row[i], i))
    return order[:k]


def random_expert(rng, d, m, scale=1.0):
    return ExpertParams(
        w_gate=rng.normal(size=(m, d)) * scale,
        w_up=rng.normal(size=(m, d)) * scale,
        w_down=rng.normal(size=(d, m)) * scale,
    )


def random_layer(rng, d, m, n_experts, weight_scale=0.5):
    router = RouterState(
        gate_weights=rng.normal(size=(d, n_experts)),
        expert_bias=np.zeros(n_experts),
    )
    experts = [random_expert(rng, d, m, weight_scale) for _ in range(n_experts)]
    return MoELayer(router=router, experts=experts)


class TestSwigluForward:
    def test_zero_preserved(self):
        e = random_expert(np.random.default_rng(0), 4, 3)
        assert np.array_equal(swiglu_forward(np.zeros(4), e), np.zeros(4))

    def test_unit_weights_hand_value(self):
        # d = m = 1, all weights 1: y = swish(1) = sigmoid(1) = 0.73105857863...
        e = ExpertParams(w_gate=np.ones((1, 1)), w_up=np.ones((1, 1)), w_down=np.ones((1, 1)))
        y = swiglu_forward(np.ones(1), e)
        assert abs(y[0] - 0.7310585786300049) < 1e-12

    def test_matches_scalar_loop_oracle(self):
        rng = np.random.default_rng(42)
        e = random_expert(rng, 5, 4)
        for _ in range(5):
            x = rng.normal(size=5)
            assert np.max(np.abs(swiglu_forward(x, e) - scalar_swiglu(x, e))) < 1e-12

    def test_batch_rows_equal_single_calls(self):
        rng = np.random.default_rng(3)
        e = random_expert(rng, 6, 4)
        xs = rng.normal(size=(7, 6))
        batched = swiglu_forward(xs, e)
        for j in range(7):
            # Same values; bitwise equality is not promised across the
            # batched and single-row code paths.
            assert np.max(np.abs(batched[j] - swiglu_forward(xs[j], e))) < 1e-12

    def test_finite_under_extreme_preactivations(self):
        rng = np.random.default_rng(9)
        e = random_expert(rng, 4, 3)
        y = swiglu_forward(rng.normal(size=4) * 1e3, e)
        assert np.all(np.isfinite(y))


class TestMoeForward:
    def test_matches_per_token_oracle_k1(self):
        self._check_against_oracle(k=1, renormalize=True)

    def test_matches_per_token_oracle_k2_renormalized(self):
        self._check_against_oracle(k=2, renormalize=True)

    def test_matches_per_token_oracle_k2_raw(self):
        self._check_against_oracle(k=2, renormalize=False)

    def _check_against_oracle(self, k, renormalize):
        rng = np.random.default_rng(77)
        d, m, n_experts, n = 4, 3, 3, 6
        layer = random_layer(rng, d, m, n_experts)
        emb = rng.normal(size=(n, d))
        res = moe_forward(TokenBatch(emb), layer, k, renormalize=renormalize)

        counts = [0] * n_experts
        for j in range(n):
            logits = [
                sum(emb[j, a] * layer.router.gate_weights[a, i] for a in range(d))
                for i in range(n_experts)
            ]
            zmax = max(logits)
            exps = [math.exp(z - zmax) for z in logits]
            probs = [e / sum(exps) for e in exps]
            chosen = oracle_topk(logits, k)
            gates = [probs[i] for i in chosen]
            if renormalize and k > 1:
                total = sum(gates)
                gates = [g / total for g in gates]
            expected = np.zeros(d)
            for g, i in zip(gates, chosen):
                expected += g * scalar_swiglu(emb[j], layer.experts[i])
                counts[i] += 1
            assert np.max(np.abs(res.outputs[j] - expected)) < 1e-12
            assert list(res.decision.assignments[j]) == chosen
        assert list(res.stats.counts) == counts

    def test_token_conservation(self):
        rng = np.random.default_rng(5)
        layer = random_layer(rng, 5, 4, 4)
        for k in (1, 2, 4):
            res = moe_forward(TokenBatch(rng.normal(size=(9, 5))), layer, k)
            assert int(res.stats.counts.sum()) == k * 9

    def test_scaled_identity_experts(self):
        # Tokens of the form (t, 1).  Saturated gate rows make swish(50) act
        # as the constant 50, the up projection passes the token through, and
        # w_down = (c / 50) I gives swiglu(x) = c x on those tokens.
        def scaling_expert(c):
            return ExpertParams(
                w_gate=np.array([[0.0, 50.0], [0.0, 50.0]]),
                w_up=np.eye(2),
                w_down=(c / 50.0) * np.eye(2),
            )

        router = RouterState(
            gate_weights=np.array([[0.0, 0.0], [5.0, -5.0]]),
            expert_bias=np.zeros(2),
        )
        layer = MoELayer(router=router, experts=[scaling_expert(2.0), scaling_expert(3.0)])
        emb = np.array([[1.0, 1.0], [1.5, 1.0], [2.0, 1.0]])
        res = moe_forward(TokenBatch(emb), layer, 1)
        # Constant logits (5, -5) route everything to expert 0.
        assert np.all(res.decision.assignments == 0)
        p0 = 1.0 / (1.0 + math.exp(-10.0))
        assert np.max(np.abs(res.outputs - p0 * 2.0 * emb)) < 1e-10

    def test_gate_scaling_divides_out(self):
        # Dividing output rows by the gate value recovers the bare expert.
        rng = np.random.default_rng(12)
        layer = random_layer(rng, 4, 3, 3)
        emb = rng.normal(size=(5, 4))
        res = moe_forward(TokenBatch(emb), layer, 1)
        for j in range(5):
            e = int(res.decision.assignments[j, 0])
            bare = swiglu_forward(emb[j], layer.experts[e])
            assert np.max(np.abs(res.outputs[j] / res.decision.gate_values[j, 0] - bare)) < 1e-9

    def test_full_activation_convex_combination(self):
        rng = np.random.default_rng(15)
        layer = random_layer(rng, 3, 2, 2)
        emb = rng.normal(size=(4, 3))
        res = moe_forward(TokenBatch(emb), layer, 2, renormalize=True)
        assert np.max(np.abs(res.decision.gate_values.sum(axis=1) - 1.0)) < 1e-12
        for j in range(4):
            expected = np.zeros(3)
            for slot in range(2):
                e = int(res.decision.assignments[j, slot])
                expected += res.decision.gate_values[j, slot] * swiglu_forward(
                    emb[j], layer.experts[e]
                )
            assert np.max(np.abs(res.outputs[j] - expected)) < 1e-12

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(23)
        layer = random_layer(rng, 5, 4, 4)
        emb = rng.normal(size=(10, 5))
        perm = rng.permutation(10)
        out = moe_forward(TokenBatch(emb), layer, 1).outputs
        out_perm = moe_forward(TokenBatch(emb[perm]), layer, 1).outputs
        assert np.array_equal(out_perm, out[perm])

    def test_loss_free_bias_steers_selection_only(self):
        rng = np.random.default_rng(31)
        layer = random_layer(rng, 4, 3, 3)
        emb = rng.normal(size=(6, 4))
        plain = moe_forward(TokenBatch(emb), layer, 1)
        layer.router.expert_bias = np.array([0.0, 0.0, 50.0])
        biased = moe_forward(
            TokenBatch(emb), layer, 1, strategy=BalanceStrategy(kind="loss_free")
        )
        assert np.all(biased.decision.assignments == 2)
        # Probabilities are untouched by the bias.
        assert np.array_equal(biased.decision.probs, plain.decision.probs)
        assert np.array_equal(
            biased.decision.gate_values[:, 0], plain.decision.probs[:, 2]
        )

    def test_bias_ignored_without_loss_free_strategy(self):
        rng = np.random.default_rng(32)
        layer = random_layer(rng, 4, 3, 3)
        emb = rng.normal(size=(6, 4))
        plain = moe_forward(TokenBatch(emb), layer, 1)
        layer.router.expert_bias = np.array([0.0, 0.0, 50.0])
        unbiased = moe_forward(
            TokenBatch(emb), layer, 1, strategy=BalanceStrategy(kind="lbl_global_batch")
        )
        assert np.array_equal(unbiased.decision.assignments, plain.decision.assignments)


def total_loss(emb, layer, k, upstream_seed, strategy=None, temperature=1.0, renormalize=True):
    """Scalar probe loss: <outputs, R> plus the active balance loss."""
    res = moe_forward(
        TokenBatch(emb),
        layer,
        k,
        strategy=strategy,
        temperature=temperature,
        renormalize=renormalize,
    )
    r = np.random.default_rng(upstream_seed).normal(size=res.outputs.shape)
    value = float(np.sum(res.outputs * r))
    if strategy is not None and strategy.has_loss:
        logits = res.decision.logits
        if strategy.kind == "top1_lbl":
            probs = np.exp(logits / strategy.tau)
            probs /= probs.sum(axis=1, keepdims=True)
            fhat = probs.mean(axis=0)
            pbar = probs.max(axis=1).mean()
            value += strategy.alpha * logits.shape[1] * float(np.dot(fhat, fhat)) / pbar
        else:
            probs = np.exp(logits / strategy.tau)
            probs /= probs.sum(axis=1, keepdims=True)
            f = res.stats.fractions
            value += strategy.alpha * logits.shape[1] * float(np.dot(f, probs.mean(axis=0)))
    return value, r, res


def layer_param_tensors(layer):
    out = [("router", layer.router.gate_weights)]
    for e, expert in enumerate(layer.experts):
        out.append((f"e{e}.w_gate", expert.w_gate))
        out.append((f"e{e}.w_up", expert.w_up))
        out.append((f"e{e}.w_down", expert.w_down))
    return out


def analytic_grads(emb, layer, k, upstream_seed, strategy=None, temperature=1.0, renormalize=True):
    _, r, res = total_loss(emb, layer, k, upstream_seed, strategy, temperature, renormalize)
    bal = None
    if strategy is not None and strategy.has_loss:
        if strategy.kind == "top1_lbl":
            bal = balance_gradient(strategy, res.decision.logits)
        else:
            bal = balance_gradient(strategy, res.decision.logits, stats=res.stats)
    lg = moe_backward(r, res.cache, balance_logit_grad=bal)
    named = {"router": lg.d_gate_weights}
    for e, g in enumerate(lg.d_experts):
        named[f"e{e}.w_gate"] = g.w_gate
        named[f"e{e}.w_up"] = g.w_up
        named[f"e{e}.w_down"] = g.w_down
    return named, lg


def check_fd(emb, layer, k, strategy=None, temperature=1.0, renormalize=True, tol=1e-5):
    upstream_seed = 99
    named, _ = analytic_grads(emb, layer, k, upstream_seed, strategy, temperature, renormalize)
    h = 1e-6
    for name, tensor in layer_param_tensors(layer):
        fd = np.zeros_like(tensor)
        it = np.nditer(tensor, flags=["multi_index"])
        while not it.finished:
            idx = it.multi_index
            orig = tensor[idx]
            tensor[idx] = orig + h
            up, _, _ = total_loss(emb, layer, k, upstream_seed, strategy, temperature, renormalize)
            tensor[idx] = orig - h
            dn, _, _ = total_loss(emb, layer, k, upstream_seed, strategy, temperature, renormalize)
            tensor[idx] = orig
            fd[idx] = (up - dn) / (2 * h)
            it.iternext()
        err = np.max(np.abs(named[name] - fd)) / max(1.0, np.max(np.abs(fd)))
        assert err < tol, f"{name}: rel err {err:.3g}"


class TestMoeBackward:
    def test_zero_upstream_zero_grads(self):
        rng = np.random.default_rng(1)
        layer = random_layer(rng, 4, 3, 3)
        res = moe_forward(TokenBatch(rng.normal(size=(5, 4))), layer, 1)
        lg = moe_backward(np.zeros((5, 4)), res.cache)
        assert np.array_equal(lg.d_gate_weights, np.zeros((4, 3)))
        assert np.array_equal(lg.d_input, np.zeros((5, 4)))
        for g in lg.d_experts:
            assert np.array_equal(g.w_gate, np.zeros((3, 4)))

    def test_unrouted_expert_gets_exact_zero_grads(self):
        rng = np.random.default_rng(2)
        d, n = 4, 6
        emb = np.abs(rng.normal(size=(n, d))) + 0.1
        w = np.zeros((d, 3))
        w[0, 0] = 10.0  # positive first coordinate sends everything to expert 0
        layer = MoELayer(
            router=RouterState(gate_weights=w, expert_bias=np.zeros(3)),
            experts=[random_expert(rng, d, 3) for _ in range(3)],
        )
        res = moe_forward(TokenBatch(emb), layer, 1)
        assert np.array_equal(res.stats.counts, [n, 0, 0])
        lg = moe_backward(rng.normal(size=(n, d)), res.cache)
        for e in (1, 2):
            assert np.array_equal(lg.d_experts[e].w_gate, np.zeros((3, 4)))
            assert np.array_equal(lg.d_experts[e].w_up, np.zeros((3, 4)))
            assert np.array_equal(lg.d_experts[e].w_down, np.zeros((4, 3)))

    def test_fd_task_loss_only_k1(self):
        rng = np.random.default_rng(101)
        layer = random_layer(rng, 8, 6, 4)
        check_fd(rng.normal(size=(16, 8)), layer, k=1)

    def test_fd_task_loss_k2_renormalized(self):
        rng = np.random.default_rng(102)
        layer = random_layer(rng, 8, 6, 4)
        check_fd(rng.normal(size=(16, 8)), layer, k=2, renormalize=True)

    def test_fd_task_loss_k2_raw_gates(self):
        rng = np.random.default_rng(103)
        layer = random_layer(rng, 6, 5, 4)
        check_fd(rng.normal(size=(12, 6)), layer, k=2, renormalize=False)

    def test_fd_with_conventional_balance_term(self):
        rng = np.random.default_rng(104)
        layer = random_layer(rng, 8, 6, 4)
        strat = BalanceStrategy(kind="lbl_global_batch", alpha=0.05)
        check_fd(rng.normal(size=(16, 8)), layer, k=1, strategy=strat)

    def test_fd_with_top1_balance_term(self):
        rng = np.random.default_rng(105)
        layer = random_layer(rng, 8, 6, 4)
        strat = BalanceStrategy(kind="top1_lbl", alpha=0.05)
        check_fd(rng.normal(size=(16, 8)), layer, k=1, strategy=strat)

    def test_fd_nonunit_temperature(self):
        rng = np.random.default_rng(106)
        layer = random_layer(rng, 6, 4, 3)
        check_fd(rng.normal(size=(10, 6)), layer, k=1, temperature=1.7)

    def test_input_gradient_matches_fd(self):
        rng = np.random.default_rng(107)
        layer = random_layer(rng, 5, 4, 3)
        emb = rng.normal(size=(8, 5))
        upstream_seed = 99
        _, lg = analytic_grads(emb, layer, 1, upstream_seed)
        h = 1e-6
        fd = np.zeros_like(emb)
        for j in range(8):
            for a in range(5):
                up = emb.copy()
                up[j, a] += h
                dn = emb.copy()
                dn[j, a] -= h
                vu, _, _ = total_loss(up, layer, 1, upstream_seed)
                vd, _, _ = total_loss(dn, layer, 1, upstream_seed)
                fd[j, a] = (vu - vd) / (2 * h)
        err = np.max(np.abs(lg.d_input - fd)) / max(1.0, np.max(np.abs(fd)))
        assert err < 1e-5


class TestStructuralValidation:
    def test_expert_shape_rules(self):
        with pytest.raises(ValueError, match="w_up"):
            ExpertParams(w_gate=np.zeros((3, 2)), w_up=np.zeros((2, 3)), w_down=np.zeros((2, 3)))
        with pytest.raises(ValueError, match="w_down"):
            ExpertParams(w_gate=np.zeros((3, 2)), w_up=np.zeros((3, 2)), w_down=np.zeros((3, 2)))

    def test_layer_expert_count_rule(self):
        router = RouterState(gate_weights=np.zeros((2, 3)), expert_bias=np.zeros(3))
        e = ExpertParams(w_gate=np.zeros((2, 2)), w_up=np.zeros((2, 2)), w_down=np.zeros((2, 2)))
        with pytest.raises(ValueError, match="expert list length"):
            MoELayer(router=router, experts=[e, e])

    def test_init_layer_shapes_and_determinism(self):
        cfg = LabConfig(
            num_experts=3, top_k=1, hidden_size=5, expert_intermediate_size=4, num_layers=1
        )
        a = init_layer(cfg, np.random.default_rng(0))
        b = init_layer(cfg, np.random.default_rng(0))
        assert a.router.gate_weights.shape == (5, 3)
        assert len(a.experts) == 3
        assert a.experts[0].w_gate.shape == (4, 5)
        assert np.array_equal(a.router.gate_weights, b.router.gate_weights)
        assert np.array_equal(a.experts[2].w_down, b.experts[2].w_down)
