"""Command-line front door: simulate | segment | detect | classify | score |
run | evaluate | serve. Exit codes: 0 success, 1 slide-fatal error, 2 usage."""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import FishgradeError, InputError
from .image import MultiChannelImage, read_image, write_png16
from .pipeline import PipelineConfig, regrade_report_dict, report_json_bytes, run_pipeline, write_report
from .scoring import ScoringConfig
from .simulator import GroundTruth, SimConfig, simulate_slide

CONFIG_ENV = "FISHGRADE_CONFIG"


def _load_config(path: str | None) -> PipelineConfig:
    path = path or os.environ.get(CONFIG_ENV)
    if not path:
        return PipelineConfig()
    with open(path, encoding="utf-8") as f:
        data = json.load(f)
    return PipelineConfig.from_dict(data.get("pipeline", data))


def _load_sim_config(path: str | None) -> SimConfig:
    path = path or os.environ.get(CONFIG_ENV)
    if not path:
        return SimConfig()
    with open(path, encoding="utf-8") as f:
        data = json.load(f)
    if "simulator" in data:
        return SimConfig.from_dict(data["simulator"])
    return SimConfig()


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fishgrade", description=__doc__)
    p.add_argument("--version", action="version", version=f"fishgrade {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("simulate", help="render a synthetic slide with ground truth")
    sp.add_argument("--config", help="JSON config file")
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--out", required=True, help="output 16-bit PNG path")
    sp.add_argument("--gt", help="ground-truth sidecar JSON path")

    sp = sub.add_parser("segment", help="segment nuclei and write polygons JSON")
    sp.add_argument("--config", help="JSON config file")
    sp.add_argument("--input", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--save-prob", help="also export the probability map (FGT1)")
    sp.add_argument("--save-dist", help="also export the distance maps (FGT1)")

    sp = sub.add_parser("detect", help="detect signals in one nucleus-crop image")
    sp.add_argument("--config", help="JSON config file")
    sp.add_argument("--crop", required=True, help="crop image (already masked)")
    sp.add_argument("--out", required=True)
    sp.add_argument("--head-class", help="external head maps: class-logit FGT1 file")
    sp.add_argument("--head-box", help="external head maps: box-delta FGT1 file")
    sp.add_argument("--head-sidecar", help="external head maps: JSON descriptor")

    sp = sub.add_parser("classify", help="classify one nucleus crop from its signals")
    sp.add_argument("--config", help="JSON config file")
    sp.add_argument("--crop", required=True)
    sp.add_argument("--signals", required=True, help="signals JSON from `detect`")
    sp.add_argument("--out", required=True)

    sp = sub.add_parser("run", help="full pipeline -> report JSON")
    sp.add_argument("--config", help="JSON config file")
    sp.add_argument("--input", required=True)
    sp.add_argument("--gt", help="ground truth JSON; adds a metrics section")
    sp.add_argument("--out", required=True)
    sp.add_argument("--overlay", help="also write an overlay PNG here")
    sp.add_argument("--channel-map", default="rgb", help="file channel roles, e.g. rgb")
    sp.add_argument("--threads", type=int, default=None, help="max worker threads")

    sp = sub.add_parser("score", help="re-grade an existing report under new thresholds")
    sp.add_argument("--config", help="JSON config file")
    sp.add_argument("--report", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--ratio-threshold", type=float)
    sp.add_argument("--high-amp-copies", type=float)
    sp.add_argument("--min-nuclei", type=int)
    sp.add_argument("--include-discrepant", action="store_true", default=None)

    sp = sub.add_parser("evaluate", help="score a report against ground truth")
    sp.add_argument("--config", help="JSON config file")
    sp.add_argument("--report", required=True)
    sp.add_argument("--gt", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--min-nucleus-precision", type=float)
    sp.add_argument("--min-nucleus-recall", type=float)
    sp.add_argument("--min-map", type=float)

    sp = sub.add_parser("serve", help="start the review HTTP service")
    sp.add_argument("--config", help="JSON config file")
    sp.add_argument("--host", default="127.0.0.1")
    sp.add_argument("--port", type=int, default=8077)
    sp.add_argument("--sessions-dir", default=None)

    return p


def parse_args(argv) -> argparse.Namespace:
    return build_parser().parse_args(argv)


def _cmd_simulate(args) -> int:
    cfg = _load_sim_config(args.config)
    image, gt = simulate_slide(cfg, args.seed)
    write_png16(image, args.out)
    if args.gt:
        gt.write_json(args.gt)
    print(f"wrote {args.out} ({image.width}x{image.height}, {len(gt.nuclei)} nuclei, status {gt.status.status.value})")
    return 0


def _cmd_segment(args) -> int:
    cfg = _load_config(args.config)
    image = read_image(args.input)
    report = run_pipeline(image, cfg)
    polys = [r.to_dict()["polygon"] for r in report.records]
    Path(args.out).write_text(json.dumps({"polygons": polys}, indent=1), encoding="utf-8")
    if args.save_prob or args.save_dist:
        if not (args.save_prob and args.save_dist):
            raise InputError("--save-prob and --save-dist go together")
        from .image import downscale
        from .segmentation import reference_maps_from_image
        from .tensors import write_prob_dist

        working = downscale(image, cfg.downscale_factor)
        maps = reference_maps_from_image(working, cfg.reference_seg)
        write_prob_dist(args.save_prob, args.save_dist, maps)
    print(f"{len(polys)} nuclei -> {args.out}")
    return 0


def _signals_to_json(signals) -> list:
    return [{"class": s.cls.value, "box": [float(v) for v in s.box], "score": float(s.score)} for s in signals]


def _cmd_detect(args) -> int:
    from .segmentation import NucleusCrop
    from .signal_detection import detect_signals

    cfg = _load_config(args.config)
    image = read_image(args.crop)
    mask = np.ones((image.height, image.width), dtype=bool)
    crop = NucleusCrop(image, (0, 0), mask)
    head = grid = None
    if args.head_class or args.head_box or args.head_sidecar:
        if not (args.head_class and args.head_box and args.head_sidecar):
            raise InputError("--head-class, --head-box and --head-sidecar go together")
        from .tensors import read_head_maps

        head, grid = read_head_maps(args.head_class, args.head_box, args.head_sidecar)
    signals = detect_signals(crop, cfg.detector, head=head, grid=grid)
    Path(args.out).write_text(json.dumps({"signals": _signals_to_json(signals)}, indent=1), encoding="utf-8")
    print(f"{len(signals)} signals -> {args.out}")
    return 0


def _cmd_classify(args) -> int:
    from .classification import classify_by_rules
    from .segmentation import NucleusCrop
    from .signal_detection import SignalBox, SignalClass

    cfg = _load_config(args.config)
    image = read_image(args.crop)
    mask = image.planes.max(axis=0) > 0.0
    crop = NucleusCrop(image, (0, 0), mask)
    data = json.loads(Path(args.signals).read_text(encoding="utf-8"))
    signals = [SignalBox(SignalClass(s["class"]), tuple(s["box"]), s["score"]) for s in data["signals"]]
    singleton = (4.0 * cfg.detector.log_sigma) ** 2
    cls, rationale = classify_by_rules(crop, signals, cfg.classifier, cfg.scoring, singleton)
    Path(args.out).write_text(json.dumps({"class": cls.value, "rationale": rationale}, indent=1), encoding="utf-8")
    print(f"{cls.value}: {rationale}")
    return 0


def _cmd_run(args) -> int:
    cfg = _load_config(args.config)
    if args.threads is not None:
        cfg.threads = args.threads
    image = read_image(args.input, args.channel_map)
    gt = GroundTruth.read_json(args.gt) if args.gt else None
    report = run_pipeline(image, cfg, gt)
    Path(args.out).write_bytes(report_json_bytes(report.to_dict()))
    if args.overlay:
        Path(args.overlay).write_bytes(write_report(report, "overlay_png", image))
    print(f"status {report.status.status.value} ({report.status.evaluable_count} evaluable) -> {args.out}")
    return 0


def _cmd_score(args) -> int:
    with open(args.report, encoding="utf-8") as f:
        report = json.load(f)
    base = ScoringConfig.from_dict(report["config"]["scoring"])
    if args.config:
        base = _load_config(args.config).scoring
    if args.ratio_threshold is not None:
        base.ratio_threshold = args.ratio_threshold
    if args.high_amp_copies is not None:
        base.high_amp_mean_her2_copies = args.high_amp_copies
    if args.min_nuclei is not None:
        base.min_evaluable_nuclei = args.min_nuclei
    if args.include_discrepant is not None:
        base.include_discrepant = args.include_discrepant
    out = regrade_report_dict(report, base.validate())
    Path(args.out).write_bytes(report_json_bytes(out))
    print(f"status {out['status']['status']} -> {args.out}")
    return 0


def _cmd_evaluate(args) -> int:
    from .evaluation import evaluate_slide
    from .geometry import StarPolygon
    from .scoring import Status
    from .signal_detection import SignalBox, SignalClass

    with open(args.report, encoding="utf-8") as f:
        report = json.load(f)
    gt = GroundTruth.read_json(args.gt)
    polys = [
        StarPolygon(tuple(r["polygon"]["center"]), np.array(r["polygon"]["distances"]), r["polygon"]["score"])
        for r in report["nuclei"]
    ]
    signals = [
        SignalBox(SignalClass(s["class"]), tuple(s["box"]), s["score"])
        for r in report["nuclei"]
        for s in r["signals"]
    ]
    metrics = evaluate_slide(polys, signals, Status(report["status"]["status"]), gt)
    Path(args.out).write_text(json.dumps(metrics.to_dict(), indent=1), encoding="utf-8")
    print(json.dumps(metrics.to_dict(), indent=1))
    failed = []
    if args.min_nucleus_precision is not None and (metrics.nucleus_precision or 0.0) < args.min_nucleus_precision:
        failed.append("nucleus precision")
    if args.min_nucleus_recall is not None and (metrics.nucleus_recall or 0.0) < args.min_nucleus_recall:
        failed.append("nucleus recall")
    if args.min_map is not None and (metrics.mean_ap or 0.0) < args.min_map:
        failed.append("mAP")
    if failed:
        print(f"metric gate failed: {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


def _cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    app = create_app(
        _load_config(args.config),
        sessions_dir=args.sessions_dir,
        token=os.environ.get("FISHGRADE_TOKEN"),
    )
    uvicorn.run(app, host=args.host, port=args.port)
    return 0


_HANDLERS = {
    "simulate": _cmd_simulate,
    "segment": _cmd_segment,
    "detect": _cmd_detect,
    "classify": _cmd_classify,
    "run": _cmd_run,
    "score": _cmd_score,
    "evaluate": _cmd_evaluate,
    "serve": _cmd_serve,
}


def execute(args: argparse.Namespace) -> int:
    try:
        return _HANDLERS[args.command](args)
    except (FishgradeError, OSError, json.JSONDecodeError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main(argv=None) -> int:
    args = parse_args(sys.argv[1:] if argv is None else argv)
    return execute(args)


if __name__ == "__main__":
    sys.exit(main())
