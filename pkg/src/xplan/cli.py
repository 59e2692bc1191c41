"""Command-line entry point.

Exit status: 0 on success, 1 when some items failed, 2 on configuration or
usage errors.  Machine-readable output goes to stdout or to files; logs and
diagnostics go to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from xplan import __version__
from xplan.annotate import (
    AnnotationSummary,
    RecordWriter,
    Rejection,
    annotate_records,
    dataset_stats,
    level1_records,
    mix_simple_pairs,
    read_records,
)
from xplan.backends import BackendError, MockServer, MockServices, load_image, save_image
from xplan.config import Config, ConfigError
from xplan.evaluation import AllRowsFailed, BenchmarkCase, MetricsConfig, run_benchmark
from xplan.masks import load_mask, save_mask
from xplan.orchestrator import StepFailed, execute_plan
from xplan.parser import PlanParseError, parse_plan, serialize_plan
from xplan.plan_ir import InvalidPlan, Plan
from xplan.refine import AnchorMasks, MissingBox, MissingMask, refine_control

logger = logging.getLogger("xplan")

EXIT_OK, EXIT_PARTIAL, EXIT_CONFIG = 0, 1, 2


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="YAML config file")
    p.add_argument("--seed", type=int, help="base seed for step/attempt seeds (default 0)")
    p.add_argument("--jobs", type=int, help="maximum worker parallelism (default 1)")
    p.add_argument("--log-level", default="WARNING", help="logging level for stderr")


def _add_pipeline_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--routing", choices=["bag-of-models", "single-model"],
                   help="routing profile (default bag-of-models)")
    p.add_argument("--verify", action="store_true", default=None,
                   help="score each step and retry below the threshold")
    p.add_argument("--threshold", type=int, help="verifier acceptance threshold 0..4 (default 3)")
    p.add_argument("--max-retries", type=int, help="retries per step when verifying (default 1)")
    p.add_argument("--dilation", type=float, help="mask dilation fraction (default 0.20)")
    p.add_argument("--min-box-area", type=float, help="insertion box area floor (default 0.05)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="xplan", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"xplan {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("plan", help="decompose an instruction or check a plan file")
    _add_common(p)
    p.add_argument("--image", type=Path, help="source image (PNG)")
    p.add_argument("--instruction", help="complex instruction to decompose")
    p.add_argument("--plan-file", type=Path, help="planner output to validate instead")

    p = sub.add_parser("refine", help="compute control regions for a plan")
    _add_common(p)
    _add_pipeline_flags(p)
    p.add_argument("--image", type=Path, required=True, help="source image (PNG)")
    p.add_argument("--plan-file", type=Path, required=True, help="plan text")
    p.add_argument("--mask", action="append", default=[], metavar="ANCHOR=PNG",
                   help="stage-1 mask for an anchor; others come from the segmenter")
    p.add_argument("--out", type=Path, required=True, help="directory for region PNGs")

    p = sub.add_parser("edit", help="plan and execute an edit")
    _add_common(p)
    _add_pipeline_flags(p)
    p.add_argument("--image", type=Path, required=True, help="source image (PNG)")
    p.add_argument("--instruction", help="complex instruction (sent to the planner)")
    p.add_argument("--plan-file", type=Path, help="use this plan instead of the planner")
    p.add_argument("--output", type=Path, default=Path("edited.png"), help="edited image path")
    p.add_argument("--trace", type=Path, default=Path("trace.json"), help="trace JSON path")

    p = sub.add_parser("annotate", help="build annotated instruction records")
    _add_common(p)
    p.add_argument("--input", type=Path, required=True,
                   help="corpus JSONL (level 1/all) or records JSONL (level 2/3)")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--level", choices=["1", "2", "3", "all"], default="all")
    p.add_argument("--images-root", type=Path, help="base for relative image refs "
                   "(default: the input file's directory)")

    p = sub.add_parser("eval", help="run the benchmark over annotated records")
    _add_common(p)
    _add_pipeline_flags(p)
    p.add_argument("records", type=Path, help="records JSONL")
    p.add_argument("--images-root", type=Path, help="base for relative image refs")
    p.add_argument("--region-mode", choices=["refined", "full"], default="refined",
                   help="'full' widens every region to the whole image (ablation)")
    p.add_argument("--report-json", type=Path, help="also write the report_v1 JSON here")

    p = sub.add_parser("stats", help="distribution report for a records file")
    _add_common(p)
    p.add_argument("records", type=Path, help="records JSONL")
    p.add_argument("--json", type=Path, help="also write the machine-readable report here")

    p = sub.add_parser("mock-serve", help="serve every mock backend over HTTP")
    _add_common(p)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8765)
    return parser


def _config(args) -> Config:
    flags = {
        "seed": getattr(args, "seed", None),
        "jobs": getattr(args, "jobs", None),
        "routing.profile": getattr(args, "routing", None),
        "verify.enabled": getattr(args, "verify", None),
        "verify.threshold": getattr(args, "threshold", None),
        "verify.max_retries": getattr(args, "max_retries", None),
        "refine.dilation": getattr(args, "dilation", None),
        "refine.min_box_area": getattr(args, "min_box_area", None),
    }
    return Config.load(args.config, flags)


def _read_plan_file(path: Path, source_instruction: str = "") -> Plan:
    return parse_plan(path.read_text(encoding="utf-8"), source_instruction)


def _emit(doc: dict) -> None:
    sys.stdout.write(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def cmd_plan(args, cfg: Config) -> int:
    if args.plan_file is not None:
        plan = _read_plan_file(args.plan_file, args.instruction or "")
    else:
        if not (args.image and args.instruction):
            raise ConfigError("plan needs --plan-file, or --image with --instruction")
        text = cfg.planner().plan(load_image(args.image), args.instruction)
        plan = parse_plan(text, args.instruction)
    sys.stdout.write(serialize_plan(plan))
    return EXIT_OK


def cmd_refine(args, cfg: Config) -> int:
    image = load_image(args.image)
    plan = _read_plan_file(args.plan_file)
    given = {}
    for spec in args.mask:
        anchor, sep, path = spec.partition("=")
        if not sep:
            raise ConfigError(f"--mask expects ANCHOR=PNG, got {spec!r}")
        given[anchor.strip()] = load_mask(path)
    segmenter = cfg.segmenter()
    pipe = cfg.pipeline()
    args.out.mkdir(parents=True, exist_ok=True)
    steps = []
    for sub in plan.subs:
        masks = AnchorMasks(tuple(
            given[a] if a in given else segmenter.segment(image, a) for a in sub.anchors
        ))
        control = refine_control(sub, masks, image.dims,
                                 dilation=pipe.dilation, min_box_area=pipe.min_box_area)
        path = args.out / f"region_{sub.index}.png"
        save_mask(control.region, path)
        steps.append({
            "index": sub.index,
            "edit_type": sub.edit_type.value,
            "region": str(path),
            "region_area": control.region.area,
            "box": control.box.as_list() if control.box else None,
        })
    _emit({"fingerprint": cfg.fingerprint(), "steps": steps})
    return EXIT_OK


def cmd_edit(args, cfg: Config) -> int:
    image = load_image(args.image)
    if args.plan_file is not None:
        plan = _read_plan_file(args.plan_file, args.instruction or "")
    elif args.instruction:
        plan = parse_plan(cfg.planner().plan(image, args.instruction), args.instruction)
    else:
        raise ConfigError("edit needs --instruction or --plan-file")
    pipe = cfg.pipeline()
    try:
        edited, trace = execute_plan(
            image, plan, pipe.policy, pipe.routing, pipe.seed0, cfg.backends(),
            dilation=pipe.dilation, min_box_area=pipe.min_box_area,
        )
    except StepFailed as exc:
        if exc.trace is not None:
            args.trace.write_text(exc.trace.to_json(), encoding="utf-8")
        logger.error("%s", exc)
        return EXIT_PARTIAL
    save_image(edited, args.output)
    doc = trace.to_dict()
    doc["config_fingerprint"] = cfg.fingerprint()
    args.trace.write_text(json.dumps(doc, indent=2, sort_keys=True), encoding="utf-8")
    _emit({
        "output": str(args.output),
        "trace": str(args.trace),
        "final_image_digest": trace.final_image_digest,
        "config_fingerprint": cfg.fingerprint(),
    })
    return EXIT_OK


def _image_loader(root: Path):
    cache = {}

    def load(ref: str):
        path = Path(ref)
        if not path.is_absolute():
            path = root / path
        if path not in cache:
            cache[path] = load_image(path)
        return cache[path]

    return load


def cmd_annotate(args, cfg: Config) -> int:
    root = args.images_root or args.input.parent
    load = _image_loader(root)
    args.out.mkdir(parents=True, exist_ok=True)
    summary = AnnotationSummary()

    if args.level in ("1", "all"):
        rejections: list[Rejection] = []
        planner = cfg.planner()
        records = []
        failed_items = 0
        with open(args.input, encoding="utf-8") as fh:
            items = [json.loads(line) for line in fh if line.strip()]
        for item in items:
            try:
                records.extend(level1_records(item, load(item["image_ref"]), planner, rejections))
            except (ValueError, KeyError, OSError, BackendError) as exc:
                logger.warning("Level 1 failed for %s: %s", item.get("image_ref"), exc)
                failed_items += 1
        summary.rejected_pairs = len(rejections)
        rng = np.random.default_rng(cfg.data["seed"])
        records = mix_simple_pairs(records, cfg.simple_fractions, rng)
        if args.level == "1":
            writer = RecordWriter(args.out / "records.jsonl")
            for rec in records:
                if writer.write(rec):
                    summary.written += 1
                else:
                    summary.skipped += 1
            summary.quarantined += failed_items
        else:
            summary.quarantined += failed_items
            annotate_records(records, args.out, load, segmenter=cfg.segmenter(),
                             planner=planner, levels=(2, 3), summary=summary,
                             dilation=cfg.pipeline().dilation,
                             min_box_area=cfg.pipeline().min_box_area)
    else:
        level = int(args.level)
        annotate_records(read_records(args.input), args.out, load,
                         segmenter=cfg.segmenter(), planner=cfg.planner(),
                         levels=(level,), summary=summary,
                         dilation=cfg.pipeline().dilation,
                         min_box_area=cfg.pipeline().min_box_area)
    _emit({"fingerprint": cfg.fingerprint(), **summary.__dict__})
    return EXIT_PARTIAL if summary.quarantined else EXIT_OK


def cmd_eval(args, cfg: Config) -> int:
    load = _image_loader(args.images_root or args.records.parent)
    cases = [
        BenchmarkCase(rec.record_id, load(rec.image_ref), rec.to_plan())
        for rec in read_records(args.records)
    ]
    metrics = MetricsConfig(embedder=cfg.embedder(), judge=cfg.verifier())
    report = run_benchmark(cases, cfg.pipeline(args.region_mode), cfg.backends(), metrics,
                           jobs=cfg.jobs)
    sys.stdout.write(report.to_text() + "\n")
    if args.report_json:
        doc = report.to_dict()
        doc["config_fingerprint"] = cfg.fingerprint()
        args.report_json.write_text(json.dumps(doc, indent=2, sort_keys=True), encoding="utf-8")
    return EXIT_PARTIAL if any(r.failed for r in report.rows) else EXIT_OK


def cmd_stats(args, cfg: Config) -> int:
    stats = dataset_stats(read_records(args.records))
    sys.stdout.write(stats.to_text())
    if args.json:
        args.json.write_text(stats.to_json(), encoding="utf-8")
    return EXIT_OK


def cmd_mock_serve(args, cfg: Config) -> int:
    server = MockServer(MockServices.default(), host=args.host, port=args.port)
    sys.stderr.write(f"mock backends on {server.url} (Ctrl-C to stop)\n")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.httpd.server_close()
    return EXIT_OK


COMMANDS = {
    "plan": cmd_plan,
    "refine": cmd_refine,
    "edit": cmd_edit,
    "annotate": cmd_annotate,
    "eval": cmd_eval,
    "stats": cmd_stats,
    "mock-serve": cmd_mock_serve,
}


def run_cli(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=args.log_level.upper(), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        sys.stderr.write(f"config fingerprint: {cfg.fingerprint()}\n")
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, InvalidPlan, PlanParseError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        for v in getattr(exc, "violations", []):
            sys.stderr.write(f"  - {v.describe()}\n")
        return EXIT_CONFIG
    except (MissingMask, MissingBox, AllRowsFailed, BackendError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_PARTIAL
    except OSError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_CONFIG


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
