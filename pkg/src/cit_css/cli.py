"""Command-line entry point.

Subcommands: gen-data (export the synthetic dataset), train (continual
run), oracle (joint-training ceiling), eval (score a snapshot on an
exported dataset), compare (delta report + SVG curve for two result
files). Configs are TOML; every run echoes its resolved configuration as
JSON before doing work. CIT_CSS_OUTPUT overrides the configured
output_dir. Exit codes: 0 ok, 2 config problem, 3 numeric abort,
4 snapshot mismatch, 5 comparison mismatch.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .errors import ComparisonError, NumericAbort, SnapshotFormatError
from .losses import DistillConfig
from .model import ModelConfig, ModelSnapshot
from .pipeline import (
    RESULTS_FORMAT_VERSION,
    TEST_INDEX_OFFSET,
    EvalConfig,
    ExperimentConfig,
    ScheduleSpec,
    TrainConfig,
    evaluate_model,
    run_experiment,
    validate_results_schema,
)
from .schedule import schedule_from_json
from .synthdata import SynthConfig, export_dataset, generate_dataset, load_exported_dataset

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_SNAPSHOT = 4
EXIT_COMPARE = 5


def _build_section(cls, doc: dict, where: str):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ValueError(f"unknown keys {unknown} in [{where}]")
    return cls(**doc)


def load_experiment_config(
    path, *, mode: str | None = None, labels: str | None = None
) -> ExperimentConfig:
    """Parse a TOML experiment config, apply CLI/env overrides, and fill
    every omitted field with its default."""
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"config file not found: {p}")
    doc = tomllib.loads(p.read_text())
    known_top = {"output_dir", "train_samples", "test_samples", "oracle",
                 "synth", "schedule", "train", "eval", "model"}
    unknown = sorted(set(doc) - known_top)
    if unknown:
        raise ValueError(f"unknown top-level keys {unknown} in {p}")

    train_doc = dict(doc.get("train", {}))
    distill_doc = dict(train_doc.pop("distill", {}))
    if mode is not None:
        train_doc["pipeline_mode"] = mode
    if labels is not None:
        train_doc["label_mode"] = labels
    train_doc["distill"] = _build_section(DistillConfig, distill_doc, "train.distill")

    output_dir = os.environ.get("CIT_CSS_OUTPUT") or doc.get("output_dir")
    if not output_dir:
        raise ValueError(f"{p}: output_dir missing (set it or export CIT_CSS_OUTPUT)")
    return ExperimentConfig(
        output_dir=str(output_dir),
        synth=_build_section(SynthConfig, dict(doc.get("synth", {})), "synth"),
        schedule=_build_section(ScheduleSpec, dict(doc.get("schedule", {})), "schedule"),
        train=_build_section(TrainConfig, train_doc, "train"),
        eval=_build_section(EvalConfig, dict(doc.get("eval", {})), "eval"),
        model=_build_section(ModelConfig, dict(doc.get("model", {})), "model"),
        train_samples=doc.get("train_samples", 2000),
        test_samples=doc.get("test_samples", 400),
        oracle=doc.get("oracle", False),
    )


def _prepare_output(out: Path, force: bool) -> None:
    if out.exists() and any(out.iterdir()) and not force:
        raise FileExistsError(f"output dir {out} is not empty (use --force to reuse)")
    out.mkdir(parents=True, exist_ok=True)


def cmd_gen_data(args) -> int:
    cfg = load_experiment_config(args.config)
    out = Path(cfg.output_dir)
    _prepare_output(out, args.force)
    (out / "config.json").write_text(
        json.dumps({"format_version": RESULTS_FORMAT_VERSION, **cfg.to_json_dict()},
                   indent=2, sort_keys=True) + "\n"
    )
    train = generate_dataset(cfg.synth, cfg.train_samples, start_index=0)
    test = generate_dataset(cfg.synth, cfg.test_samples, start_index=TEST_INDEX_OFFSET)
    train_manifest = export_dataset(train, cfg.synth, out / "train")
    test_manifest = export_dataset(test, cfg.synth, out / "test")
    print(json.dumps(
        {"output_dir": str(out),
         "train_digest": train_manifest["digest"],
         "test_digest": test_manifest["digest"]},
        sort_keys=True,
    ))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_experiment_config(args.config, mode=args.mode, labels=args.labels)
    doc = run_experiment(cfg, force=args.force)
    final = doc["tasks"][-1]["group_miou"]
    print(json.dumps(
        {"results": str(Path(cfg.output_dir) / "results.json"), "final_group_miou": final},
        sort_keys=True,
    ))
    return EXIT_OK


def cmd_oracle(args) -> int:
    cfg = load_experiment_config(args.config)
    joint = ScheduleSpec(cfg.schedule.total, cfg.schedule.total, 1, cfg.schedule.protocol)
    cfg = dataclasses.replace(cfg, schedule=joint, oracle=False)
    doc = run_experiment(cfg, force=args.force)
    final = doc["tasks"][-1]["group_miou"]
    print(json.dumps(
        {"results": str(Path(cfg.output_dir) / "results.json"), "joint_group_miou": final},
        sort_keys=True,
    ))
    return EXIT_OK


def cmd_eval(args) -> int:
    snap = ModelSnapshot.load(args.snapshot_dir)
    samples, _manifest = load_exported_dataset(args.dataset_dir)
    if "schedule" not in snap.manifest:
        raise SnapshotFormatError("snapshot manifest has no schedule record")
    schedule = schedule_from_json(snap.manifest["schedule"])
    metrics = evaluate_model(
        snap,
        samples,
        schedule,
        snap.task_index,
        tau=args.tau,
        include_background=args.include_background,
    )
    print(json.dumps(metrics.to_json_dict(), sort_keys=True))
    return EXIT_OK


def _delta(a: float | None, b: float | None) -> float | None:
    if a is None or b is None:
        return None
    return a - b


def render_comparison_svg(series_a, series_b, label_a: str, label_b: str) -> str:
    """Line chart of base-group mIoU vs task index for two runs. The raw
    numbers ride along in a comment so the artifact stays diffable."""
    width, height, margin = 480, 320, 48
    xs = sorted({int(t) for t, _ in series_a} | {int(t) for t, _ in series_b})
    span = max(max(xs), 1)

    def px(t):
        return margin + (width - 2 * margin) * (t / span)

    def py(v):
        return height - margin - (height - 2 * margin) * v

    def polyline(series, color):
        pts = " ".join(f"{px(t):.1f},{py(v):.1f}" for t, v in series if v is not None)
        return (f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{pts}"/>')

    by_t_a = {int(t): v for t, v in series_a}
    by_t_b = {int(t): v for t, v in series_b}
    rows = ["task_index,base_a,base_b"]
    for t in xs:
        fa, fb = by_t_a.get(t), by_t_b.get(t)
        rows.append(f"{t},{'' if fa is None else repr(fa)},{'' if fb is None else repr(fb)}")
    table = "\n".join(rows)

    ticks = []
    for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
        y = py(frac)
        ticks.append(
            f'<line x1="{margin}" y1="{y:.1f}" x2="{width - margin}" y2="{y:.1f}" '
            f'stroke="#ddd" stroke-width="1"/>'
            f'<text x="{margin - 6}" y="{y + 4:.1f}" text-anchor="end" font-size="10">{frac:g}</text>'
        )
    for t in xs:
        x = px(t)
        ticks.append(
            f'<text x="{x:.1f}" y="{height - margin + 16}" text-anchor="middle" font-size="10">{t}</text>'
        )
    return (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif">\n'
        f"<!--\n{table}\n-->\n"
        f'<rect width="{width}" height="{height}" fill="white"/>\n'
        + "\n".join(ticks)
        + "\n"
        + polyline(sorted(by_t_a.items()), "#1f77b4")
        + "\n"
        + polyline(sorted(by_t_b.items()), "#d62728")
        + "\n"
        f'<text x="{margin}" y="{margin - 24}" font-size="12">base-group mIoU by task</text>\n'
        f'<text x="{margin}" y="{margin - 10}" font-size="11" fill="#1f77b4">{label_a}</text>\n'
        f'<text x="{margin + 160}" y="{margin - 10}" font-size="11" fill="#d62728">{label_b}</text>\n'
        f'<text x="{width / 2:.0f}" y="{height - 10}" text-anchor="middle" font-size="11">task index</text>\n'
        "</svg>\n"
    )


def cmd_compare(args) -> int:
    doc_a = json.loads(Path(args.results_a).read_text())
    doc_b = json.loads(Path(args.results_b).read_text())
    validate_results_schema(doc_a)
    validate_results_schema(doc_b)
    if doc_a["schedule"] != doc_b["schedule"]:
        raise ComparisonError("schedules differ; runs are not comparable")
    if doc_a["dataset_digest"] != doc_b["dataset_digest"]:
        raise ComparisonError("dataset digests differ; runs are not comparable")

    per_task = []
    for block_a, block_b in zip(doc_a["tasks"], doc_b["tasks"]):
        per_task.append(
            {
                "task_index": block_a["task_index"],
                **{
                    g: _delta(block_a["group_miou"][g], block_b["group_miou"][g])
                    for g in ("base", "new", "all")
                },
            }
        )
    final_a, final_b = doc_a["tasks"][-1]["group_miou"], doc_b["tasks"][-1]["group_miou"]
    svg = render_comparison_svg(
        doc_a["forgetting"]["series"],
        doc_b["forgetting"]["series"],
        label_a=str(args.results_a),
        label_b=str(args.results_b),
    )
    Path(args.svg).write_text(svg)
    report = {
        "format_version": RESULTS_FORMAT_VERSION,
        "a": str(args.results_a),
        "b": str(args.results_b),
        "per_task_deltas": per_task,
        "base_final_delta": _delta(final_a["base"], final_b["base"]),
        "new_final_delta": _delta(final_a["new"], final_b["new"]),
        "all_final_delta": _delta(final_a["all"], final_b["all"]),
        "forgetting_drop_delta": _delta(
            doc_a["forgetting"]["final_drop"], doc_b["forgetting"]["final_drop"]
        ),
        "svg": str(args.svg),
    }
    print(json.dumps(report, sort_keys=True))
    return EXIT_OK


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cit-css",
        description="continual semantic segmentation with class-independent heads",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate and export the synthetic dataset")
    p.add_argument("config")
    p.add_argument("--force", action="store_true", help="reuse a non-empty output dir")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="run the continual training experiment")
    p.add_argument("config")
    p.add_argument("--mode", choices=("accumulative", "iterative"), default=None)
    p.add_argument("--labels", choices=("soft", "pseudo"), default=None)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("oracle", help="joint training on all classes (ceiling)")
    p.add_argument("config")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("eval", help="evaluate a snapshot on an exported dataset")
    p.add_argument("snapshot_dir")
    p.add_argument("dataset_dir")
    p.add_argument("--tau", type=float, default=0.5)
    p.add_argument("--include-background", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="delta report for two results.json files")
    p.add_argument("results_a")
    p.add_argument("results_b")
    p.add_argument("--svg", default="compare.svg")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except NumericAbort as exc:
        print(
            json.dumps({"error": str(exc), "diagnostics": exc.diagnostics}, sort_keys=True),
            file=sys.stderr,
        )
        return EXIT_NUMERIC
    except SnapshotFormatError as exc:
        print(f"snapshot mismatch: {exc}", file=sys.stderr)
        return EXIT_SNAPSHOT
    except ComparisonError as exc:
        print(f"comparison mismatch: {exc}", file=sys.stderr)
        return EXIT_COMPARE
    except (
        FileNotFoundError,
        FileExistsError,
        NotADirectoryError,
        IsADirectoryError,
        KeyError,
        TypeError,
        ValueError,
        tomllib.TOMLDecodeError,
    ) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
