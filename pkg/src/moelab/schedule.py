"""Training schedules: progressive sparsification, learning rate, batch ramp.

Progress arguments are fractions of the token budget (not of the step count);
with a batch-size ramp the two differ, and the corpus-fraction reading is the
one the schedules are defined in.  The learning-rate schedule alone is indexed
by optimizer step, with its phase boundaries at fractions of total_steps.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import LabConfig

# Additional activated parameters outside the expert weights at the reference
# scale, calibrated so the progressive-to-target activated-parameter ratio of
# the 96-expert configuration lands exactly on 0.50/0.65.
REFERENCE_NON_EXPERT_PARAMS = 179_306_496


@dataclass(frozen=True)
class SparsitySchedule:
    """Per-layer activated expert counts before and after the sparsity switch."""

    early_counts: tuple[int, ...] = (8, 8, 6, 6, 4, 4, 2, 2)
    default_count: int = 1
    switch_fraction: float = 0.9

    def __post_init__(self):
        if self.default_count < 1:
            raise ValueError("default_count must be a positive integer")
        for c in self.early_counts:
            if c < self.default_count:
                raise ValueError("early_counts must not fall below default_count")
        if not 0.0 < self.switch_fraction <= 1.0:
            raise ValueError("switch_fraction must lie in (0, 1]")

    def validate_for(self, cfg: LabConfig) -> None:
        top = max(self.early_counts, default=self.default_count)
        if top > cfg.num_experts:
            raise ValueError("early_counts exceed num_experts")


def activated_experts_at(layer: int, progress: float, schedule: SparsitySchedule) -> int:
    """Activated expert count for one layer at the given token-budget fraction."""
    if layer < 0:
        raise ValueError("layer must be non-negative")
    if not 0.0 <= progress <= 1.0:
        raise ValueError("progress must lie in [0, 1]")
    if progress < schedule.switch_fraction and layer < len(schedule.early_counts):
        return schedule.early_counts[layer]
    return schedule.default_count


@dataclass(frozen=True)
class LrSchedule:
    """Warmup, stable, and two cosine decay phases.

    warmup_steps counts optimizer steps inside the stable window; the phase
    fractions (stable, mid, and the implied final remainder) partition
    total_steps and must sum to one.
    """

    total_steps: int
    warmup_steps: int = 2000
    peak_lr: float = 2.6e-4
    stable_fraction: float = 0.6
    mid_lr: float = 1.6e-4
    mid_fraction: float = 0.3
    final_lr: float = 2.6e-5

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValueError("total_steps must be a positive integer")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be non-negative")
        if self.peak_lr <= 0 or self.mid_lr <= 0 or self.final_lr <= 0:
            raise ValueError("learning rates must be positive")
        if not 0.0 < self.stable_fraction < 1.0 or not 0.0 < self.mid_fraction < 1.0:
            raise ValueError("phase fractions must lie in (0, 1)")
        if self.stable_fraction + self.mid_fraction >= 1.0:
            raise ValueError("stable_fraction + mid_fraction must leave a final phase")
        if self.warmup_steps > self.stable_fraction * self.total_steps:
            raise ValueError("warmup_steps must fit inside the stable phase")

    @property
    def final_fraction(self) -> float:
        return 1.0 - self.stable_fraction - self.mid_fraction


def learning_rate_at(step: int, schedule: LrSchedule) -> float:
    """Piecewise learning rate: linear warmup, constant, cosine, cosine."""
    s = schedule
    if step < 0 or step > s.total_steps:
        raise ValueError("step outside [0, total_steps]")
    if s.warmup_steps > 0 and step < s.warmup_steps:
        return s.peak_lr * step / s.warmup_steps
    stable_end = s.stable_fraction * s.total_steps
    mid_end = (s.stable_fraction + s.mid_fraction) * s.total_steps
    if step <= stable_end:
        return s.peak_lr
    if step <= mid_end:
        frac = (step - stable_end) / (mid_end - stable_end)
        return s.mid_lr + 0.5 * (s.peak_lr - s.mid_lr) * (1.0 + np.cos(np.pi * frac))
    frac = (step - mid_end) / (s.total_steps - mid_end)
    return s.final_lr + 0.5 * (s.mid_lr - s.final_lr) * (1.0 + np.cos(np.pi * frac))


def desk_lr_schedule(total_steps: int) -> LrSchedule:
    """Same shape as the reference schedule, scaled to a desk run."""
    return LrSchedule(
        total_steps=total_steps,
        warmup_steps=max(1, total_steps // 20),
        peak_lr=1e-2,
        mid_lr=6e-3,
        final_lr=1e-3,
    )


@dataclass(frozen=True)
class BatchRamp:
    """Linear global-batch ramp over the first ramp_fraction of the tokens."""

    initial: int = 1920
    final: int = 7680
    ramp_fraction: float = 0.4
    granularity: int = 8

    def __post_init__(self):
        if self.initial < 1 or self.final < self.initial:
            raise ValueError("need 1 <= initial <= final")
        if not 0.0 < self.ramp_fraction <= 1.0:
            raise ValueError("ramp_fraction must lie in (0, 1]")
        if self.granularity < 1:
            raise ValueError("granularity must be a positive integer")
        if self.initial % self.granularity or self.final % self.granularity:
            raise ValueError("initial and final must be multiples of granularity")


def batch_size_at(progress: float, ramp: BatchRamp) -> int:
    """Global batch size at the given token-budget fraction, rounded to the
    micro-batch granularity."""
    if not 0.0 <= progress <= 1.0:
        raise ValueError("progress must lie in [0, 1]")
    if progress >= ramp.ramp_fraction:
        return ramp.final
    raw = ramp.initial + (ramp.final - ramp.initial) * (progress / ramp.ramp_fraction)
    return int(round(raw / ramp.granularity)) * ramp.granularity


def activated_params(
    cfg: LabConfig,
    schedule: SparsitySchedule,
    progress: float,
    non_expert_params: int = 0,
) -> int:
    """Activated parameter count at the given progress.

    Each activated expert contributes its three projection matrices,
    3 * hidden_size * expert_intermediate_size; non_expert_params is a fixed
    additive term for everything outside the experts.
    """
    per_expert = 3 * cfg.hidden_size * cfg.expert_intermediate_size
    total = 0
    for layer in range(cfg.num_layers):
        k = activated_experts_at(layer, progress, schedule)
        total += min(k, cfg.num_experts) * per_expert
    return total + int(non_expert_params)


def resolve_token_budget(steps: int, batch_size: int, ramp: BatchRamp | None) -> int:
    """Total tokens a run will consume.

    With a ramp the budget is self-referential (batch size depends on the
    consumed fraction of the budget), so it is resolved by damped fixed-point
    iteration; without one it is simply steps * batch_size.
    """
    if steps < 0:
        raise ValueError("steps must be non-negative")
    if ramp is None:
        return steps * batch_size
    if steps == 0:
        return 0

    def consumed(budget: float) -> int:
        total = 0
        for _ in range(steps):
            total += batch_size_at(min(1.0, total / budget), ramp)
        return total

    budget = float(steps * ramp.final)
    for _ in range(60):
        budget = 0.5 * (budget + consumed(budget))
    return consumed(budget)
