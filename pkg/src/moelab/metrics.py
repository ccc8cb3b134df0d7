"""Run records, deviation metrics, CSV emission and vector plots.

The CSV schema is a public contract.  metrics.csv has one row per logged step
with the columns, in order:

    step, task_loss, balance_loss, lr, batch_size,
    then for each tracked layer L (ascending):
    layerL_k, layerL_max_dev, layerL_min_dev, layerL_bias_norm

snapshots.csv holds the periodic per-expert distributions:

    step, layer, expert, count, fraction, mean_prob

Floats are rendered with nine significant digits ("%.9g"), rows end with a
plain newline, and no timestamps are written, so a repeated run produces byte
identical files.  Every emitted SVG carries its plotted series as a trailing
XML comment (marker "moelab-data:"), which keeps the images self-contained
and lets tools recover the numbers without a rendering step.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .config import LoadStats

DATA_MARKER = "moelab-data:"


def relative_deviation(counts: np.ndarray, num_experts: int | None = None) -> np.ndarray:
    """Per-expert load deviation relative to the uniform share.

    0 means exactly balanced, -1 means starved (zero tokens), positive values
    are overload multiples of the fair share.
    """
    counts = np.asarray(counts, dtype=np.float64)
    n_experts = counts.shape[0] if num_experts is None else num_experts
    total = counts.sum()
    if total <= 0:
        raise ValueError("cannot compute deviations for an empty batch")
    uniform = total / n_experts
    return (counts - uniform) / uniform


def max_min_deviation(history) -> tuple[list[float], list[float]]:
    """Per-step (max, min) relative deviation over a stats or counts history."""
    maxima, minima = [], []
    for entry in history:
        counts = entry.counts if isinstance(entry, LoadStats) else np.asarray(entry)
        dev = relative_deviation(counts)
        maxima.append(float(dev.max()))
        minima.append(float(dev.min()))
    return maxima, minima


@dataclass
class Snapshot:
    step: int
    layer: int
    counts: np.ndarray
    fractions: np.ndarray
    mean_probs: np.ndarray


@dataclass
class RunRecord:
    """Everything one run logs, in memory; CSV emission serializes a subset."""

    tracked_layers: tuple[int, ...]
    meta: dict = field(default_factory=dict)
    steps: list[int] = field(default_factory=list)
    task_loss: list[float] = field(default_factory=list)
    balance_loss: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    batch_size: list[int] = field(default_factory=list)
    layer_k: dict[int, list[int]] = field(default_factory=dict)
    max_dev: dict[int, list[float]] = field(default_factory=dict)
    min_dev: dict[int, list[float]] = field(default_factory=dict)
    bias_norm: dict[int, list[float]] = field(default_factory=dict)
    layer_counts: dict[int, list[np.ndarray]] = field(default_factory=dict)
    snapshots: list[Snapshot] = field(default_factory=list)

    def __post_init__(self):
        self.tracked_layers = tuple(sorted(self.tracked_layers))
        for layer in self.tracked_layers:
            self.layer_k.setdefault(layer, [])
            self.max_dev.setdefault(layer, [])
            self.min_dev.setdefault(layer, [])
            self.bias_norm.setdefault(layer, [])
            self.layer_counts.setdefault(layer, [])

    def append_step(self, step, task_loss, balance_loss, lr, batch_size, per_layer):
        """Add one step row; per_layer maps layer -> (k, counts, bias_norm)."""
        if self.steps and step <= self.steps[-1]:
            raise ValueError("step indices must be strictly increasing")
        if set(per_layer) != set(self.tracked_layers):
            raise ValueError("per_layer keys must equal the tracked layer set")
        self.steps.append(int(step))
        self.task_loss.append(float(task_loss))
        self.balance_loss.append(float(balance_loss))
        self.lr.append(float(lr))
        self.batch_size.append(int(batch_size))
        for layer, (k, counts, bias) in per_layer.items():
            counts = np.asarray(counts)
            dev = relative_deviation(counts)
            self.layer_k[layer].append(int(k))
            self.max_dev[layer].append(float(dev.max()))
            self.min_dev[layer].append(float(dev.min()))
            self.bias_norm[layer].append(float(bias))
            self.layer_counts[layer].append(counts.copy())

    def add_snapshot(self, step: int, layer: int, stats: LoadStats):
        if layer not in self.tracked_layers:
            raise ValueError(f"layer {layer} is not tracked")
        self.snapshots.append(
            Snapshot(
                step=int(step),
                layer=int(layer),
                counts=np.asarray(stats.counts).copy(),
                fractions=np.asarray(stats.fractions).copy(),
                mean_probs=np.asarray(stats.mean_probs).copy(),
            )
        )

    def final_snapshot(self, layer: int) -> Snapshot | None:
        found = [s for s in self.snapshots if s.layer == layer]
        return found[-1] if found else None


def _fmt(value) -> str:
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return "%.9g" % float(value)


def csv_header(tracked_layers) -> list[str]:
    cols = ["step", "task_loss", "balance_loss", "lr", "batch_size"]
    for layer in sorted(tracked_layers):
        cols += [
            f"layer{layer}_k",
            f"layer{layer}_max_dev",
            f"layer{layer}_min_dev",
            f"layer{layer}_bias_norm",
        ]
    return cols


def emit_csv(record: RunRecord, path) -> None:
    """Write the per-step series as deterministic CSV (schema in module docs)."""
    lines = [",".join(csv_header(record.tracked_layers))]
    for i, step in enumerate(record.steps):
        row = [
            str(step),
            _fmt(record.task_loss[i]),
            _fmt(record.balance_loss[i]),
            _fmt(record.lr[i]),
            str(record.batch_size[i]),
        ]
        for layer in record.tracked_layers:
            row += [
                str(record.layer_k[layer][i]),
                _fmt(record.max_dev[layer][i]),
                _fmt(record.min_dev[layer][i]),
                _fmt(record.bias_norm[layer][i]),
            ]
        lines.append(",".join(row))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def emit_snapshots_csv(record: RunRecord, path) -> None:
    lines = ["step,layer,expert,count,fraction,mean_prob"]
    for snap in record.snapshots:
        for e in range(snap.counts.shape[0]):
            lines.append(
                ",".join(
                    [
                        str(snap.step),
                        str(snap.layer),
                        str(e),
                        str(int(snap.counts[e])),
                        _fmt(snap.fractions[e]),
                        _fmt(snap.mean_probs[e]),
                    ]
                )
            )
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def _save_svg_with_data(fig, path, payload: dict) -> None:
    fig.savefig(path, format="svg")
    blob = json.dumps(payload, sort_keys=True)
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(f"\n<!-- {DATA_MARKER} {blob} -->\n")


def read_svg_data(path) -> dict:
    """Recover the data series embedded in an emitted SVG."""
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    start = text.rindex(DATA_MARKER) + len(DATA_MARKER)
    end = text.index("-->", start)
    return json.loads(text[start:end].strip())


def _pyplot():
    import matplotlib

    matplotlib.use("Agg", force=False)
    import matplotlib.pyplot as plt

    return plt


def emit_plots(record: RunRecord, out_dir, run_id: str = "run") -> list[str]:
    """Deviation-versus-step chart per tracked layer plus final-step f and p
    distributions.  Single-step records get the distribution charts only."""
    import os

    plt = _pyplot()
    os.makedirs(out_dir, exist_ok=True)
    written = []

    if len(record.steps) >= 2:
        for layer in record.tracked_layers:
            fig, ax = plt.subplots(figsize=(6, 3.5))
            ax.plot(record.steps, record.max_dev[layer], label="max deviation")
            ax.plot(record.steps, record.min_dev[layer], label="min deviation")
            ax.axhline(0.0, color="gray", lw=0.6)
            ax.set_xlabel("step")
            ax.set_ylabel("relative deviation")
            ax.set_title(f"{run_id} layer {layer} load deviation")
            ax.legend(loc="best", fontsize=8)
            path = os.path.join(out_dir, f"{run_id}_layer{layer}_deviation.svg")
            _save_svg_with_data(
                fig,
                path,
                {
                    "kind": "deviation",
                    "layer": layer,
                    "steps": record.steps,
                    "max_dev": record.max_dev[layer],
                    "min_dev": record.min_dev[layer],
                },
            )
            plt.close(fig)
            written.append(path)

    for layer in record.tracked_layers:
        snap = record.final_snapshot(layer)
        if snap is None:
            continue
        experts = np.arange(snap.counts.shape[0])
        fig, axes = plt.subplots(1, 2, figsize=(8, 3))
        axes[0].bar(experts, snap.fractions, color="tab:blue")
        axes[0].set_title(f"layer {layer} routed fraction f")
        axes[1].bar(experts, snap.mean_probs, color="tab:orange")
        axes[1].set_title(f"layer {layer} mean gating prob p")
        for ax in axes:
            ax.set_xlabel("expert")
        fig.suptitle(f"{run_id} step {snap.step}")
        path = os.path.join(out_dir, f"{run_id}_layer{layer}_distribution.svg")
        _save_svg_with_data(
            fig,
            path,
            {
                "kind": "distribution",
                "layer": layer,
                "step": snap.step,
                "fractions": snap.fractions.tolist(),
                "mean_probs": snap.mean_probs.tolist(),
            },
        )
        plt.close(fig)
        written.append(path)
    return written


def emit_overlay_plot(series_by_label: dict, layer: int, path) -> None:
    """Overlay max-deviation curves from several runs in one chart.

    series_by_label maps a run label to (steps, max_dev) sequences; the step
    grids must already agree.
    """
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 3.5))
    payload = {"kind": "overlay", "layer": layer, "series": {}}
    for label, (steps, max_dev) in series_by_label.items():
        ax.plot(steps, max_dev, label=label)
        payload["series"][label] = {"steps": list(steps), "max_dev": list(max_dev)}
    ax.set_xlabel("step")
    ax.set_ylabel("max relative deviation")
    ax.set_title(f"layer {layer} max load deviation")
    ax.legend(loc="best", fontsize=8)
    _save_svg_with_data(fig, path, payload)
    plt.close(fig)
