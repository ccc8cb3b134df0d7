"""Experiment harness: configuration, the training loop, checkpoints.

The model is a pipeline of MoE layers joined by residual connections (no
attention); the task loss is mean squared error against per-cluster targets.
One step samples a batch from the counter-based step stream, runs every layer
at its scheduled expert count, derives per-group statistics from contiguous
shards, reduces them to the global-batch view, applies the active balancing
strategy, and takes one AdamW step.  Because the random stream is re-keyed
from (seed, step), a checkpointed run resumed mid-way is bit-identical to an
uninterrupted one.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .balance import (
    BalanceStrategy,
    STRATEGY_KINDS,
    balance_gradient,
    bias_update,
    conventional_lbl,
    global_batch_reduce,
    top1_lbl,
)
from .config import LabConfig, TokenBatch, desk_lab_config, validate_config
from .metrics import RunRecord
from .moe_layer import ExpertParams, MoELayer, init_layer, moe_backward, moe_forward
from .optim import OptimizerState, adamw_step
from .parallel import group_rows
from .router import RouterState, accumulate_load
from .rng import init_stream, step_stream
from .schedule import (
    BatchRamp,
    LrSchedule,
    SparsitySchedule,
    activated_experts_at,
    batch_size_at,
    learning_rate_at,
    resolve_token_budget,
)
from .task import SyntheticTask, TaskConfig, blur_layer_input, make_task, sample_batch

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class LrSettings:
    """Learning-rate schedule shape; total_steps is supplied by the run.

    warmup_steps None means one twentieth of the run (rounded down, so very
    short smoke runs simply skip warmup), which keeps small configs valid
    without a separate schedule entry.
    """

    warmup_steps: int | None = None
    peak_lr: float = 1e-2
    stable_fraction: float = 0.6
    mid_lr: float = 6e-3
    mid_fraction: float = 0.3
    final_lr: float = 1e-3

    def schedule(self, total_steps: int) -> LrSchedule:
        values = asdict(self)
        if values["warmup_steps"] is None:
            values["warmup_steps"] = total_steps // 20
        return LrSchedule(total_steps=total_steps, **values)


def _from_dict(cls, data, path):
    """Build a flat dataclass from a dict, rejecting unknown keys."""
    if not isinstance(data, dict):
        raise ValueError(f"{path} must be an object")
    known = {f.name for f in fields(cls)}
    for key in data:
        if key not in known:
            raise ValueError(f"unknown key: {path}.{key}")
    converted = {}
    for f in fields(cls):
        if f.name in data:
            value = data[f.name]
            if isinstance(value, list):
                value = tuple(value)
            converted[f.name] = value
    return cls(**converted)


@dataclass(frozen=True)
class RunConfig:
    """Complete description of one experiment run."""

    lab: LabConfig = field(default_factory=desk_lab_config)
    task: TaskConfig = field(default_factory=TaskConfig)
    strategy: str = "lbl_global_batch"
    steps: int = 2000
    batch_size: int = 256
    lr: LrSettings = field(default_factory=LrSettings)
    sparsity: SparsitySchedule | None = None
    batch_ramp: BatchRamp | None = None
    snapshot_every: int = 50
    eval_tokens: int = 2048
    tracked_layers: tuple[int, ...] | None = None
    run_id: str | None = None

    def validate(self) -> "RunConfig":
        validate_config(self.lab)
        if self.strategy not in STRATEGY_KINDS:
            raise ValueError(f"unknown balance strategy {self.strategy!r}")
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be a positive integer")
        groups = self.lab.num_parallel_groups
        if self.batch_size % groups:
            raise ValueError("batch_size must be divisible by num_parallel_groups")
        if self.batch_ramp is not None and self.batch_ramp.granularity % groups:
            raise ValueError("batch_ramp granularity must be divisible by num_parallel_groups")
        if self.sparsity is not None:
            self.sparsity.validate_for(self.lab)
        if self.snapshot_every < 1:
            raise ValueError("snapshot_every must be a positive integer")
        if self.eval_tokens < 1:
            raise ValueError("eval_tokens must be a positive integer")
        for layer in self.tracked_layers or ():
            if not 0 <= layer < self.lab.num_layers:
                raise ValueError("tracked_layers must name existing layers")
        if self.task.layer_difficulty is not None:
            if len(self.task.layer_difficulty) != self.lab.num_layers:
                raise ValueError("layer_difficulty length must equal num_layers")
        # Building the schedule validates its own invariants.
        self.lr.schedule(max(1, self.steps))
        return self

    def resolved_tracked_layers(self) -> tuple[int, ...]:
        if self.tracked_layers is not None:
            return tuple(sorted(set(self.tracked_layers)))
        n = self.lab.num_layers
        return tuple(sorted({0, n // 2, n - 1}))

    def resolved_run_id(self) -> str:
        return self.run_id or f"{self.strategy}_seed{self.lab.seed}"

    def to_dict(self) -> dict:
        out = {
            "lab": asdict(self.lab),
            "task": asdict(self.task),
            "strategy": self.strategy,
            "steps": self.steps,
            "batch_size": self.batch_size,
            "lr": asdict(self.lr),
            "sparsity": None if self.sparsity is None else asdict(self.sparsity),
            "batch_ramp": None if self.batch_ramp is None else asdict(self.batch_ramp),
            "snapshot_every": self.snapshot_every,
            "eval_tokens": self.eval_tokens,
            "tracked_layers": None if self.tracked_layers is None else list(self.tracked_layers),
            "run_id": self.run_id,
        }
        if out["task"]["layer_difficulty"] is not None:
            out["task"]["layer_difficulty"] = list(out["task"]["layer_difficulty"])
        if out["sparsity"] is not None:
            out["sparsity"]["early_counts"] = list(out["sparsity"]["early_counts"])
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        if not isinstance(data, dict):
            raise ValueError("run config must be an object")
        known = {f.name for f in fields(cls)}
        for key in data:
            if key not in known:
                raise ValueError(f"unknown key: {key}")
        kwargs = {}
        if "lab" in data:
            kwargs["lab"] = _from_dict(LabConfig, data["lab"], "lab")
        if "task" in data:
            kwargs["task"] = _from_dict(TaskConfig, data["task"], "task")
        if "lr" in data:
            kwargs["lr"] = _from_dict(LrSettings, data["lr"], "lr")
        if data.get("sparsity") is not None:
            kwargs["sparsity"] = _from_dict(SparsitySchedule, data["sparsity"], "sparsity")
        if data.get("batch_ramp") is not None:
            kwargs["batch_ramp"] = _from_dict(BatchRamp, data["batch_ramp"], "batch_ramp")
        for name in ("strategy", "steps", "batch_size", "snapshot_every", "eval_tokens", "run_id"):
            if name in data:
                kwargs[name] = data[name]
        if data.get("tracked_layers") is not None:
            kwargs["tracked_layers"] = tuple(data["tracked_layers"])
        return cls(**kwargs).validate()


def default_run_config(**overrides) -> RunConfig:
    """Desk-scale defaults: trains in well under a minute per 1000 steps."""
    return replace(RunConfig(), **overrides).validate()


@dataclass
class TrainState:
    layers: list[MoELayer]
    params: dict[str, np.ndarray]
    opt: OptimizerState
    step: int = 0
    tokens_consumed: int = 0


@dataclass
class RunResult:
    record: RunRecord
    state: TrainState
    final_decisions: dict[int, np.ndarray] = field(default_factory=dict)


def _stacked_layer(raw: MoELayer, layer_index: int, params: dict) -> MoELayer:
    """Re-store expert weights as stacked arrays; experts become views."""
    prefix = f"layer{layer_index:02d}"
    w_gate = np.stack([e.w_gate for e in raw.experts])
    w_up = np.stack([e.w_up for e in raw.experts])
    w_down = np.stack([e.w_down for e in raw.experts])
    params[f"{prefix}.router"] = raw.router.gate_weights
    params[f"{prefix}.w_gate"] = w_gate
    params[f"{prefix}.w_up"] = w_up
    params[f"{prefix}.w_down"] = w_down
    experts = [
        ExpertParams(w_gate=w_gate[e], w_up=w_up[e], w_down=w_down[e])
        for e in range(len(raw.experts))
    ]
    return MoELayer(router=raw.router, experts=experts, layer_index=layer_index)


def init_train_state(cfg: RunConfig) -> TrainState:
    rng = init_stream(cfg.lab.seed)
    params: dict[str, np.ndarray] = {}
    layers = [
        _stacked_layer(init_layer(cfg.lab, rng, l), l, params)
        for l in range(cfg.lab.num_layers)
    ]
    return TrainState(layers=layers, params=params, opt=OptimizerState())


def _strategy(cfg: RunConfig) -> BalanceStrategy:
    lab = cfg.lab
    return BalanceStrategy(
        kind=cfg.strategy,
        alpha=lab.lbl_coefficient,
        tau=lab.temperature,
        gamma=lab.bias_step,
    )


def run_experiment(
    cfg: RunConfig,
    state: TrainState | None = None,
    task: SyntheticTask | None = None,
    until_step: int | None = None,
) -> RunResult:
    """Run (or continue) an experiment to cfg.steps and return its record.

    state continues a previous run (see checkpoint_save / checkpoint_load);
    the returned record covers only the newly executed steps.  until_step
    pauses the run before cfg.steps while every schedule still follows the
    full config, so checkpointing at the pause and continuing reproduces the
    uninterrupted run exactly.  Every call ends with one evaluation forward
    pass on cfg.eval_tokens fresh tokens, recorded as snapshots at the
    current step; batch-to-batch count noise is too coarse for end-state
    distribution claims at desk batch sizes.  A call with no steps to
    execute records only that evaluation.
    """
    cfg.validate()
    lab = cfg.lab
    if task is None:
        task = make_task(lab, cfg.task)
    if state is None:
        state = init_train_state(cfg)
    strat = _strategy(cfg)
    n_layers = lab.num_layers
    groups = lab.num_parallel_groups
    tracked = cfg.resolved_tracked_layers()
    lr_schedule = cfg.lr.schedule(max(1, cfg.steps))
    budget = resolve_token_budget(cfg.steps, cfg.batch_size, cfg.batch_ramp)
    record = RunRecord(
        tracked_layers=tracked,
        meta={
            "run_id": cfg.resolved_run_id(),
            "strategy": cfg.strategy,
            "seed": lab.seed,
            "steps": cfg.steps,
            "progress_units": "tokens",
            "config": cfg.to_dict(),
        },
    )
    result = RunResult(record=record, state=state)

    stop = cfg.steps if until_step is None else min(until_step, cfg.steps)
    if state.step >= stop:
        _eval_snapshot(cfg, state, task, strat, record)
        return result

    for step in range(state.step, stop):
        rng = step_stream(lab.seed, step)
        progress = min(1.0, state.tokens_consumed / budget) if budget else 0.0
        if cfg.batch_ramp is not None:
            n_tokens = batch_size_at(progress, cfg.batch_ramp)
        else:
            n_tokens = cfg.batch_size
        if n_tokens % groups:
            raise ValueError("scheduled batch size is not divisible by num_parallel_groups")
        embeddings, _, targets = sample_batch(task, rng, n_tokens)
        if cfg.sparsity is not None:
            ks = [
                min(activated_experts_at(l, progress, cfg.sparsity), lab.num_experts)
                for l in range(n_layers)
            ]
        else:
            ks = [lab.top_k] * n_layers
        lr_t = learning_rate_at(step, lr_schedule)

        # Forward through the residual pipeline.
        stream = embeddings
        per_layer = []
        for l in range(n_layers):
            x_in = blur_layer_input(task, l, stream, rng)
            res = moe_forward(
                TokenBatch(x_in),
                state.layers[l],
                ks[l],
                strategy=strat,
                temperature=lab.temperature,
                renormalize=lab.renormalize_gates,
                fp32_gating=lab.fp32_gating,
            )
            local_stats = [
                accumulate_load(res.decision, lab.num_experts, rows=group_rows(n_tokens, groups, g))
                for g in range(groups)
            ]
            gstats = global_batch_reduce(local_stats)
            if int(gstats.counts.sum()) != ks[l] * n_tokens:
                raise RuntimeError("token conservation violated")
            per_layer.append((res, local_stats, gstats))
            stream = stream + res.outputs

        diff = stream - targets
        task_loss = float(np.mean(diff * diff))
        d_stream = (2.0 / diff.size) * diff

        balance_values = []
        for res, local_stats, gstats in per_layer:
            if strat.kind == "lbl_micro_batch":
                balance_values.append(
                    float(np.mean([conventional_lbl(s) for s in local_stats]))
                )
            elif strat.kind == "top1_lbl":
                balance_values.append(top1_lbl(res.decision.logits, strat.tau))
            else:
                # Conventional global-batch value; for none / loss_free this
                # is a passive diagnostic, not an optimized loss.
                balance_values.append(conventional_lbl(gstats))
        balance_loss = float(np.mean(balance_values))

        # Backward through the pipeline, accumulating parameter gradients.
        grads: dict[str, np.ndarray] = {}
        d_out = d_stream
        for l in range(n_layers - 1, -1, -1):
            res, local_stats, gstats = per_layer[l]
            bal_grad = None
            if strat.has_loss:
                if strat.kind == "lbl_global_batch":
                    bal_grad = balance_gradient(strat, res.decision.logits, stats=gstats)
                elif strat.kind == "top1_lbl":
                    bal_grad = balance_gradient(strat, res.decision.logits)
                else:
                    bal_grad = np.zeros_like(res.decision.logits)
                    for g in range(groups):
                        rows = group_rows(n_tokens, groups, g)
                        bal_grad[rows] = balance_gradient(
                            strat,
                            res.decision.logits[rows],
                            stats=local_stats[g],
                            total_tokens=n_tokens,
                        )
            lg = moe_backward(d_out, res.cache, balance_logit_grad=bal_grad)
            prefix = f"layer{l:02d}"
            grads[f"{prefix}.router"] = lg.d_gate_weights
            grads[f"{prefix}.w_gate"] = np.stack([g.w_gate for g in lg.d_experts])
            grads[f"{prefix}.w_up"] = np.stack([g.w_up for g in lg.d_experts])
            grads[f"{prefix}.w_down"] = np.stack([g.w_down for g in lg.d_experts])
            d_out = d_out + lg.d_input

        adamw_step(state.params, grads, state.opt, lr_t)

        if strat.kind == "loss_free":
            for l in range(n_layers):
                router = state.layers[l].router
                router.expert_bias = bias_update(
                    router.expert_bias, per_layer[l][2].counts, strat.gamma
                )

        per_layer_log = {}
        for l in tracked:
            gstats = per_layer[l][2]
            bias_norm = float(np.max(np.abs(state.layers[l].router.expert_bias)))
            per_layer_log[l] = (ks[l], gstats.counts, bias_norm)
        record.append_step(step, task_loss, balance_loss, lr_t, n_tokens, per_layer_log)
        if step % cfg.snapshot_every == 0 or step == cfg.steps - 1:
            for l in tracked:
                record.add_snapshot(step, l, per_layer[l][2])

        state.tokens_consumed += n_tokens
        state.step = step + 1
        if step == cfg.steps - 1:
            result.final_decisions = {
                l: per_layer[l][0].decision.assignments.copy() for l in range(n_layers)
            }
    _eval_snapshot(cfg, state, task, strat, record)
    return result


def _eval_snapshot(cfg, state, task, strat, record) -> None:
    """Forward-only pass on a fresh batch, recorded at the current step.

    Uses the step stream the next training step would use, so it never
    collides with draws already consumed by training.
    """
    lab = cfg.lab
    rng = step_stream(lab.seed, state.step)
    embeddings, _, _ = sample_batch(task, rng, cfg.eval_tokens)
    stream = embeddings
    for l in range(lab.num_layers):
        x_in = blur_layer_input(task, l, stream, rng)
        res = moe_forward(
            TokenBatch(x_in),
            state.layers[l],
            min(lab.top_k, lab.num_experts),
            strategy=strat,
            temperature=lab.temperature,
            renormalize=lab.renormalize_gates,
            fp32_gating=lab.fp32_gating,
        )
        if l in record.tracked_layers:
            record.add_snapshot(state.step, l, res.stats)
        stream = stream + res.outputs


def checkpoint_save(path, cfg: RunConfig, state: TrainState) -> None:
    """Versioned binary checkpoint: named tensors plus a JSON metadata blob."""
    arrays = {}
    for name, value in state.params.items():
        arrays[f"param::{name}"] = value
    for name, value in state.opt.m.items():
        arrays[f"m::{name}"] = value
    for name, value in state.opt.v.items():
        arrays[f"v::{name}"] = value
    for l, layer in enumerate(state.layers):
        arrays[f"bias::layer{l:02d}"] = layer.router.expert_bias
    meta = {
        "version": CHECKPOINT_VERSION,
        "step": state.step,
        "tokens_consumed": state.tokens_consumed,
        "opt_t": state.opt.t,
        "config": cfg.to_dict(),
    }
    arrays["meta"] = np.array(json.dumps(meta, sort_keys=True))
    np.savez(path, **arrays)


def checkpoint_load(path, cfg: RunConfig) -> TrainState:
    """Restore a TrainState; refuses checkpoints with a changed model shape."""
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["meta"]))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')!r}")
        stored_lab = meta["config"]["lab"]
        for key in ("num_experts", "hidden_size", "expert_intermediate_size", "num_layers"):
            if stored_lab[key] != getattr(cfg.lab, key):
                raise ValueError(
                    f"{key} mismatch: checkpoint has {stored_lab[key]}, "
                    f"config has {getattr(cfg.lab, key)}"
                )
        params = {
            key[len("param::"):]: data[key].copy()
            for key in data.files
            if key.startswith("param::")
        }
        m = {key[len("m::"):]: data[key].copy() for key in data.files if key.startswith("m::")}
        v = {key[len("v::"):]: data[key].copy() for key in data.files if key.startswith("v::")}
        biases = {
            int(key.split("layer")[1]): data[key].copy()
            for key in data.files
            if key.startswith("bias::")
        }
    layers = []
    for l in range(cfg.lab.num_layers):
        prefix = f"layer{l:02d}"
        w_gate = params[f"{prefix}.w_gate"]
        w_up = params[f"{prefix}.w_up"]
        w_down = params[f"{prefix}.w_down"]
        experts = [
            ExpertParams(w_gate=w_gate[e], w_up=w_up[e], w_down=w_down[e])
            for e in range(cfg.lab.num_experts)
        ]
        router = RouterState(gate_weights=params[f"{prefix}.router"], expert_bias=biases[l])
        layers.append(MoELayer(router=router, experts=experts, layer_index=l))
    opt = OptimizerState(t=meta["opt_t"], m=m, v=v)
    return TrainState(
        layers=layers,
        params=params,
        opt=opt,
        step=meta["step"],
        tokens_consumed=meta["tokens_consumed"],
    )
