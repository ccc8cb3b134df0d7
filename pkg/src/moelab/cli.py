"""Command-line front end.

Exit codes: 0 on success, 1 on runtime failure, 2 on usage or config errors.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

from .harness import RunConfig, checkpoint_save, default_run_config, run_experiment
from .metrics import csv_header, emit_csv, emit_overlay_plot, emit_plots, emit_snapshots_csv
from .parallel import DTYPE_BYTES, ep_traffic


class UsageError(Exception):
    pass


def _parse_override(text: str) -> tuple[list[str], object]:
    if "=" not in text:
        raise UsageError(f"override {text!r} must look like key=value")
    key, raw = text.split("=", 1)
    key = key.strip()
    if not key:
        raise UsageError(f"override {text!r} has an empty key")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.split("."), value


def _apply_override(data: dict, path: list[str], value) -> None:
    node = data
    for part in path[:-1]:
        nxt = node.get(part)
        if nxt is None:
            nxt = node[part] = {}
        if not isinstance(nxt, dict):
            raise UsageError(f"cannot descend into {'.'.join(path)}")
        node = nxt
    node[path[-1]] = value


def load_run_config(path: str, overrides: list[str]) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file is not valid JSON: {exc}")
    for text in overrides:
        key_path, value = _parse_override(text)
        _apply_override(data, key_path, value)
    try:
        return RunConfig.from_dict(data)
    except (ValueError, TypeError) as exc:
        raise UsageError(str(exc))


def cmd_run(args) -> int:
    cfg = load_run_config(args.config, args.set or [])
    out_dir = args.out or f"{cfg.resolved_run_id()}_out"
    os.makedirs(out_dir, exist_ok=True)
    result = run_experiment(cfg)
    with open(os.path.join(out_dir, "resolved_config.json"), "w", encoding="utf-8") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    emit_csv(result.record, os.path.join(out_dir, "metrics.csv"))
    emit_snapshots_csv(result.record, os.path.join(out_dir, "snapshots.csv"))
    emit_plots(result.record, os.path.join(out_dir, "plots"), cfg.resolved_run_id())
    checkpoint_save(os.path.join(out_dir, "checkpoint.npz"), cfg, result.state)
    record = result.record
    if record.steps:
        print(
            f"{cfg.resolved_run_id()}: {len(record.steps)} steps, "
            f"final task loss {record.task_loss[-1]:.6g}, "
            f"final balance loss {record.balance_loss[-1]:.6g}"
        )
    else:
        print(f"{cfg.resolved_run_id()}: no steps executed, wrote initial snapshot")
    print(f"outputs in {out_dir}")
    return 0


def _load_metrics(run_dir: str) -> tuple[str, list[str], dict[str, list[float]]]:
    path = os.path.join(run_dir, "metrics.csv")
    if not os.path.exists(path):
        raise UsageError(f"no metrics.csv in {run_dir}")
    label = os.path.basename(os.path.normpath(run_dir))
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        columns = list(reader.fieldnames or [])
        series: dict[str, list[float]] = {name: [] for name in columns}
        for row in reader:
            for name in columns:
                series[name].append(float(row[name]))
    return label, columns, series


def cmd_compare(args) -> int:
    if len(args.run_dirs) < 2:
        raise UsageError("compare needs at least two run directories")
    runs = [_load_metrics(d) for d in args.run_dirs]
    base_label, base_cols, base = runs[0]
    for label, cols, series in runs[1:]:
        if series["step"] != base["step"]:
            raise UsageError(f"step grids differ between {base_label} and {label}")
    common = [c for c in base_cols if all(c in cols for _, cols, _ in runs)]
    os.makedirs(args.out, exist_ok=True)

    layers = sorted(
        int(c[len("layer"):-len("_max_dev")])
        for c in common
        if c.startswith("layer") and c.endswith("_max_dev")
    )
    for layer in layers:
        series_by_label = {
            label: (series["step"], series[f"layer{layer}_max_dev"])
            for label, _, series in runs
        }
        emit_overlay_plot(
            series_by_label, layer, os.path.join(args.out, f"compare_layer{layer}_max_dev.svg")
        )

    # Summary: final value of every shared metric column per run, plus the
    # largest absolute series difference against the first run.
    metric_cols = [c for c in common if c != "step"]
    lines = ["run," + ",".join(metric_cols)]
    for label, _, series in runs:
        lines.append(label + "," + ",".join("%.9g" % series[c][-1] for c in metric_cols))
    for label, _, series in runs[1:]:
        diffs = [
            max(abs(a - b) for a, b in zip(series[c], base[c]))
            for c in metric_cols
        ]
        lines.append(f"max_abs_diff({label})," + ",".join("%.9g" % d for d in diffs))
    summary = "\n".join(lines) + "\n"
    with open(os.path.join(args.out, "summary.csv"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(summary)
    print(summary, end="")
    print(f"outputs in {args.out}")
    return 0


def cmd_traffic(args) -> int:
    if args.dtype not in DTYPE_BYTES:
        raise UsageError(
            f"unknown dtype {args.dtype!r}, expected one of {sorted(DTYPE_BYTES)}"
        )
    try:
        bytes_moved = ep_traffic(args.micro_batch, args.top_k, args.hidden_size, DTYPE_BYTES[args.dtype])
    except ValueError as exc:
        raise UsageError(str(exc))
    print(bytes_moved)
    return 0


def cmd_dump_defaults(args) -> int:
    print(json.dumps(default_run_config().to_dict(), indent=2, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="moelab",
        description="Desk-scale mixture-of-experts routing laboratory",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute one experiment from a config file")
    p_run.add_argument("config", help="path to a JSON run config")
    p_run.add_argument(
        "--set",
        action="append",
        metavar="KEY=VALUE",
        help="override a config entry with a dotted key, e.g. lab.seed=3",
    )
    p_run.add_argument("-o", "--out", help="output directory (default: <run_id>_out)")
    p_run.set_defaults(func=cmd_run)

    p_cmp = sub.add_parser("compare", help="compare finished runs on one step grid")
    p_cmp.add_argument("run_dirs", nargs="+", help="run output directories")
    p_cmp.add_argument("-o", "--out", default="compare_out", help="output directory")
    p_cmp.set_defaults(func=cmd_compare)

    p_tr = sub.add_parser("traffic", help="expert-parallel dispatch bytes per device")
    p_tr.add_argument("micro_batch", type=int)
    p_tr.add_argument("top_k", type=int)
    p_tr.add_argument("hidden_size", type=int)
    p_tr.add_argument("dtype", help="fp16, bf16, fp32 or fp64")
    p_tr.set_defaults(func=cmd_traffic)

    p_dump = sub.add_parser("dump-defaults", help="print the default run config")
    p_dump.set_defaults(func=cmd_dump_defaults)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
