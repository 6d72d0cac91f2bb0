"""Single entry point for batch use: `selfdistill <subcommand>`.

Every subcommand is a thin shell over one library operation. Exit codes:
0 success, 1 usage error, 2 data/validation error, 3 plugin/protocol error.
`--json` switches stdout to a machine-parseable document.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import sim
from .curation import CurationConfig, curate
from .errors import PluginError, ProtocolError, SelfDistillError
from .formats import (
    load_annotations,
    load_detections,
    load_manifest,
    load_skeletons,
    save_annotations,
    save_detections,
    save_manifest,
)
from .keypoints import face_boxes_from_skeleton_set
from .metrics import MetricsConfig, MetricsReport, evaluate
from .orchestrator import (
    IterationRecord,
    PipelineConfig,
    load_state,
    resume_pipeline,
    run_pipeline,
)
from .protocol import PluginSession
from .pseudolabel import FilterConfig, filter_top_detections

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_PLUGIN = 3


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on usage errors; this tool reserves 2 for data errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _print_json(doc: dict) -> None:
    print(json.dumps(doc, indent=2))


def _fmt(value: float | None) -> str:
    return "-" if value is None else f"{value:.4f}"


# ---------------------------------------------------------------------------
# eval


def _metrics_config(args) -> MetricsConfig:
    kwargs = {}
    if args.thresholds:
        kwargs["iou_thresholds"] = tuple(float(t) for t in args.thresholds.split(","))
    if args.recall_points:
        kwargs["recall_points"] = args.recall_points
    if args.max_dets:
        kwargs["max_detections_per_image"] = args.max_dets
    return MetricsConfig(**kwargs)


def _print_report_table(report: MetricsReport) -> None:
    columns = report.columns()
    widths = [max(len(name), 8) for name in columns]
    print("  ".join(name.rjust(w) for name, w in zip(columns, widths)))
    print("  ".join(f"{value:.4f}".rjust(w) for value, w in zip(columns.values(), widths)))


def cmd_eval(args) -> int:
    manifest = load_manifest(args.manifest) if args.manifest else None
    detections = load_detections(args.det, manifest=manifest)
    ground_truth = load_annotations(args.gt, manifest=manifest)
    report = evaluate(detections, ground_truth, _metrics_config(args))
    if args.json:
        _print_json({"format_version": 1, "columns": report.columns(), "report": report.to_json_dict()})
    else:
        _print_report_table(report)
    return EXIT_OK


# ---------------------------------------------------------------------------
# facesfrompose


def cmd_facesfrompose(args) -> int:
    skeletons = load_skeletons(args.skeletons)
    manifest = load_manifest(args.manifest) if args.manifest else None
    detections = face_boxes_from_skeleton_set(
        skeletons,
        box_size=args.box_size,
        min_confidence=args.min_confidence,
        manifest=manifest,
    )
    save_detections(detections, args.out)
    if args.json:
        _print_json(
            {
                "format_version": 1,
                "n_skeletons": len(skeletons),
                "n_detections": len(detections),
                "output": str(args.out),
            }
        )
    else:
        print(f"{len(detections)} face boxes from {len(skeletons)} skeletons -> {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# curate


def _read_exclude_ids(path: str | None) -> list[str]:
    if not path:
        return []
    ids = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            ids.append(line)
    return ids


def cmd_curate(args) -> int:
    manifest = load_manifest(args.manifest)
    skeletons = load_skeletons(args.skeletons)
    config = CurationConfig(per_bucket_quota=args.quota)
    curated = curate(manifest, skeletons, config, exclude_ids=_read_exclude_ids(args.exclude_ids))
    save_manifest(curated, args.out)
    if args.json:
        _print_json(
            {
                "format_version": 1,
                "n_input_images": len(manifest),
                "n_selected": len(curated),
                "per_bucket_quota": args.quota,
                "output": str(args.out),
            }
        )
    else:
        print(f"kept {len(curated)} of {len(manifest)} images -> {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# filter


def cmd_filter(args) -> int:
    manifest = load_manifest(args.manifest)
    detections = load_detections(args.detections, manifest=manifest)
    config = FilterConfig(multiplier=args.multiplier, minimum_score=args.min_score)
    annotations, stats = filter_top_detections(detections, manifest, config, iteration=args.iteration)
    save_annotations(annotations, args.out)
    if args.stats_out:
        Path(args.stats_out).write_text(json.dumps(stats.to_json_dict(), indent=2) + "\n")
    if args.json:
        _print_json({"format_version": 1, "output": str(args.out), **stats.to_json_dict()})
    else:
        print(
            f"kept {stats.n_selected}/{stats.n_input_detections} detections "
            f"(cutoff {stats.score_cutoff:.4f}) -> {args.out}"
        )
    return EXIT_OK


# ---------------------------------------------------------------------------
# selftrain


def _load_config_file(path: str) -> dict:
    text = Path(path).read_text(encoding="utf-8")
    if path.endswith(".toml"):
        try:
            import tomllib
        except ImportError as exc:  # tomllib ships with Python 3.11+
            raise SelfDistillError("TOML config files need Python 3.11+; use JSON") from exc
        return tomllib.loads(text)
    return json.loads(text)


def _pipeline_config(args) -> PipelineConfig:
    # precedence: flags > config file > defaults
    doc = _load_config_file(args.config) if args.config else {}
    overrides = {
        "iterations": args.iterations,
        "batches_before_relabel": args.batches,
        "workdir": args.workdir,
        "relabel": args.relabel,
        "eval_every_iteration": args.eval_every_iteration,
        "seed": args.seed,
        "score_floor": args.score_floor,
    }
    for key, value in overrides.items():
        if value is not None:
            doc[key] = value
    filter_doc = doc.setdefault("filter", {})
    if args.multiplier is not None:
        filter_doc["multiplier"] = args.multiplier
    if args.min_score is not None:
        filter_doc["minimum_score"] = args.min_score
    for required in ("iterations", "batches_before_relabel", "workdir"):
        if required not in doc:
            raise SelfDistillError(f"selftrain needs {required!r} from --config or flags")
    return PipelineConfig.from_json_dict(doc)


def _records_table(
    records: list[IterationRecord], batches: int, baseline: MetricsReport | None
) -> str:
    header = ["Iteration", "Batches", "PseudoLabels", "Cutoff"]
    metric_names = []
    any_report = baseline or next((r.metrics for r in records if r.metrics), None)
    if any_report:
        metric_names = list(any_report.columns().keys())
    header += metric_names
    rows = []
    if baseline is not None:
        cols = baseline.columns()
        rows.append(["0 (initial)", "-", "-", "-"] + [_fmt(cols.get(n)) for n in metric_names])
    for r in records:
        cols = r.metrics.columns() if r.metrics else {}
        rows.append(
            [str(r.index), str(batches), str(r.n_pseudo_labels), f"{r.score_cutoff:.4f}"]
            + [_fmt(cols.get(n)) for n in metric_names]
        )
    widths = [max(len(header[i]), *(len(row[i]) for row in rows)) if rows else len(header[i]) for i in range(len(header))]
    lines = ["  ".join(h.rjust(w) for h, w in zip(header, widths))]
    for row in rows:
        lines.append("  ".join(cell.rjust(w) for cell, w in zip(row, widths)))
    return "\n".join(lines)


def cmd_selftrain(args) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO, format="%(message)s")
    if args.resume:
        workdir = args.workdir
        if workdir is None and args.config:
            workdir = _load_config_file(args.config).get("workdir")
        if workdir is None:
            raise SelfDistillError("--resume needs --workdir (or a config file naming it)")
        session = PluginSession.open(args.plugin) if args.plugin else None
        try:
            records = resume_pipeline(workdir, plugin=session)
        finally:
            if session is not None:
                session.__exit__(None, None, None)
        state = load_state(workdir)
    else:
        config = _pipeline_config(args)
        if not args.plugin:
            raise SelfDistillError("selftrain needs --plugin unless resuming")
        if not args.unlabeled:
            raise SelfDistillError("selftrain needs --unlabeled unless resuming")
        unlabeled = load_manifest(args.unlabeled)
        eval_set = None
        if args.eval_manifest or args.eval_annotations:
            if not (args.eval_manifest and args.eval_annotations):
                raise SelfDistillError("--eval-manifest and --eval-annotations go together")
            eval_manifest = load_manifest(args.eval_manifest)
            eval_set = (eval_manifest, load_annotations(args.eval_annotations, manifest=eval_manifest))
        with PluginSession.open(args.plugin) as session:
            records = run_pipeline(config, session, unlabeled, eval_set=eval_set)
        state = load_state(config.workdir)

    if args.json:
        _print_json(
            {
                "format_version": 1,
                "status": state.status,
                "baseline_metrics": None
                if state.baseline_metrics is None
                else state.baseline_metrics.to_json_dict(),
                "records": [r.to_json_dict() for r in records],
            }
        )
    else:
        print(_records_table(records, state.config.batches_before_relabel, state.baseline_metrics))
    return EXIT_OK


# ---------------------------------------------------------------------------
# simgen / simplugin


def cmd_simgen(args) -> int:
    world = sim.SimWorld(
        seed=args.seed,
        n_images=args.images,
        faces_per_image=(args.min_faces, args.max_faces),
        image_size=(args.width, args.height),
        face_size=(args.min_face, args.max_face),
    )
    manifest, truth = sim.generate_world(world)
    save_manifest(manifest, args.out_manifest)
    save_annotations(truth, args.out_annotations)
    if args.json:
        _print_json(
            {
                "format_version": 1,
                "dataset_id": manifest.dataset_id,
                "n_images": len(manifest),
                "n_faces": len(truth),
                "manifest": str(args.out_manifest),
                "annotations": str(args.out_annotations),
            }
        )
    else:
        print(f"{len(manifest)} images, {len(truth)} faces -> {args.out_manifest}, {args.out_annotations}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> _Parser:
    parser = _Parser(prog="selfdistill", description=__doc__)
    sub = parser.add_subparsers(dest="subcommand", required=True, metavar="SUBCOMMAND")

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--json", action="store_true", help="machine-readable stdout")

    p = sub.add_parser("eval", parents=[common], help="score detections against ground truth")
    p.add_argument("--det", required=True, help="detections JSON")
    p.add_argument("--gt", required=True, help="ground-truth annotations JSON")
    p.add_argument("--manifest", help="manifest JSON for referential validation")
    p.add_argument("--thresholds", help="comma-separated IoU thresholds (default 0.30..0.95)")
    p.add_argument("--recall-points", type=int, help="interpolation points (default 101)")
    p.add_argument("--max-dets", type=int, help="per-image detection cap for AR (default 100)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("facesfrompose", parents=[common], help="face boxes from skeleton keypoints")
    p.add_argument("--skeletons", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--box-size", type=float, default=30.0)
    p.add_argument("--min-confidence", type=float, default=0.0)
    p.add_argument("--manifest", help="validate image ids and clamp boxes into frames")
    p.set_defaults(func=cmd_facesfrompose)

    p = sub.add_parser("curate", parents=[common], help="stratified image selection by pose confidence")
    p.add_argument("--manifest", required=True)
    p.add_argument("--skeletons", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--quota", type=int, default=5000, help="images kept per person-count stratum")
    p.add_argument("--exclude-ids", help="file with one image_id per line to drop")
    p.set_defaults(func=cmd_curate)

    p = sub.add_parser("filter", parents=[common], help="keep the best multiplier*N detections as labels")
    p.add_argument("--detections", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--stats-out")
    p.add_argument("--multiplier", type=float, default=2.0)
    p.add_argument("--min-score", type=float)
    p.add_argument("--iteration", type=int, default=1)
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("selftrain", parents=[common], help="run the iterative self-training loop")
    p.add_argument("--config", help="pipeline config file (.json or .toml)")
    p.add_argument("--plugin", help="detector plugin command line")
    p.add_argument("--unlabeled", help="unlabeled manifest JSON")
    p.add_argument("--eval-manifest")
    p.add_argument("--eval-annotations")
    p.add_argument("--workdir")
    p.add_argument("--iterations", type=int)
    p.add_argument("--batches", type=int, help="training batches before relabelling")
    p.add_argument("--relabel", dest="relabel", action="store_true", default=None)
    p.add_argument("--no-relabel", dest="relabel", action="store_false",
                   help="label once with the initial model, then only retrain")
    p.add_argument("--eval-every-iteration", dest="eval_every_iteration", action="store_true", default=None)
    p.add_argument("--seed", type=int)
    p.add_argument("--score-floor", type=float)
    p.add_argument("--multiplier", type=float)
    p.add_argument("--min-score", type=float)
    p.add_argument("--resume", action="store_true", help="continue the run in --workdir")
    p.set_defaults(func=cmd_selftrain)

    p = sub.add_parser("simgen", parents=[common], help="generate a synthetic world")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--images", type=int, default=100)
    p.add_argument("--min-faces", type=int, default=1)
    p.add_argument("--max-faces", type=int, default=4)
    p.add_argument("--width", type=float, default=640)
    p.add_argument("--height", type=float, default=480)
    p.add_argument("--min-face", type=float, default=24)
    p.add_argument("--max-face", type=float, default=40)
    p.add_argument("--out-manifest", required=True)
    p.add_argument("--out-annotations", required=True)
    p.set_defaults(func=cmd_simgen)

    p = sub.add_parser("simplugin", parents=[common], help="run the simulated detector plugin")
    p.add_argument("--state-dir", required=True, help="directory for checkpoint files")
    p.add_argument("--recall-base", type=float, default=0.7)
    p.add_argument("--noise", type=float, default=3.0)
    p.add_argument("--fp-rate", type=float, default=0.3)
    p.set_defaults(func=sim.serve)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ProtocolError, PluginError) as exc:
        print(f"selfdistill: plugin error: {exc}", file=sys.stderr)
        return EXIT_PLUGIN
    except (SelfDistillError, ValueError, OSError) as exc:
        print(f"selfdistill: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
