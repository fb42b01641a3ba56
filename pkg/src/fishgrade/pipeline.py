"""Tiled whole-slide orchestration and report emission.

Flow: downscale -> tile -> segment per tile -> stitch (global polygon NMS) ->
per-nucleus crop/signals/dual classification/score -> slide status -> report.
Per-nucleus failures degrade that nucleus to Artifact with the error recorded;
only unreadable input is slide-fatal.
"""

from __future__ import annotations

import datetime as _dt
import hashlib
import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .classification import (
    CLASS_ORDER,
    ClassifierConfig,
    CamMap,
    SecondOpinion,
    classify_by_rules,
    classify_by_scores,
    compute_cam,
    second_opinion,
)
from .errors import ConfigError, FormatError, InputError
from .geometry import StarPolygon
from .image import MultiChannelImage, downscale
from .scoring import (
    GradeEntry,
    NucleusClass,
    NucleusScore,
    ScoringConfig,
    SlideStatus,
    Status,
    grade_nucleus,
    make_score,
    nucleus_counts,
    reference_singleton_area,
)
from .segmentation import (
    NucleusCrop,
    ProbDistMaps,
    ReferenceSegConfig,
    SegConfig,
    extract_crop,
    nms_polygons,
    reference_maps_from_image,
    segment,
)
from .signal_detection import DetectorConfig, SignalBox, SignalClass, detect_signals

SCHEMA = "fishgrade/1"
TILE_BORDER_MARGIN = 2  # px; drop per-tile polygons this close to a cut edge


@dataclass
class PredictorSelection:
    """Per-stage predictor choice: built-in reference algorithms or
    externally computed dense maps / logits via FGT1 files."""

    segmentation: str = "reference"  # "reference" | "external"
    seg_prob_path: Optional[str] = None
    seg_dist_path: Optional[str] = None
    classifier: str = "rules"  # "rules" | "external"
    classifier_logits_path: Optional[str] = None
    classifier_mapping_path: Optional[str] = None
    classifier_features_path: Optional[str] = None
    classifier_weights_path: Optional[str] = None

    def to_dict(self) -> dict:
        return {
            "segmentation": self.segmentation,
            "seg_prob_path": self.seg_prob_path,
            "seg_dist_path": self.seg_dist_path,
            "classifier": self.classifier,
            "classifier_logits_path": self.classifier_logits_path,
            "classifier_mapping_path": self.classifier_mapping_path,
            "classifier_features_path": self.classifier_features_path,
            "classifier_weights_path": self.classifier_weights_path,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PredictorSelection":
        unknown = set(d) - set(cls().to_dict())
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown predictor field")
        return cls(**d)


@dataclass
class PipelineConfig:
    downscale_factor: int = 2
    tile_size: int = 1024
    tile_overlap: int = 128
    crop_margin: int = 10
    threads: int = 1
    segmentation: SegConfig = field(default_factory=SegConfig)
    reference_seg: ReferenceSegConfig = field(default_factory=ReferenceSegConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    scoring: ScoringConfig = field(default_factory=ScoringConfig)
    predictors: PredictorSelection = field(default_factory=PredictorSelection)

    def validate(self) -> "PipelineConfig":
        if self.downscale_factor < 1:
            raise ConfigError("downscale_factor", "must be >= 1")
        if self.tile_size < 8:
            raise ConfigError("tile_size", "must be >= 8")
        if not 0 <= self.tile_overlap < self.tile_size:
            raise ConfigError("tile_overlap", "need 0 <= overlap < tile size")
        if self.crop_margin < 0:
            raise ConfigError("crop_margin", "must be >= 0")
        if self.threads < 1:
            raise ConfigError("threads", "must be >= 1")
        self.segmentation.validate()
        self.detector.validate()
        self.classifier.validate()
        self.scoring.validate()
        return self

    def to_dict(self) -> dict:
        return {
            "downscale_factor": self.downscale_factor,
            "tile_size": self.tile_size,
            "tile_overlap": self.tile_overlap,
            "crop_margin": self.crop_margin,
            "threads": self.threads,
            "segmentation": self.segmentation.to_dict(),
            "reference_seg": self.reference_seg.to_dict(),
            "detector": self.detector.to_dict(),
            "classifier": self.classifier.to_dict(),
            "scoring": self.scoring.to_dict(),
            "predictors": self.predictors.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        known = {
            "downscale_factor",
            "tile_size",
            "tile_overlap",
            "crop_margin",
            "threads",
            "segmentation",
            "reference_seg",
            "detector",
            "classifier",
            "scoring",
            "predictors",
        }
        unknown = set(d) - known
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown pipeline field")
        kw = {
            k: v
            for k, v in d.items()
            if k in {"downscale_factor", "tile_size", "tile_overlap", "crop_margin", "threads"}
        }
        cfg = cls(
            segmentation=SegConfig.from_dict(d.get("segmentation", {})),
            reference_seg=ReferenceSegConfig.from_dict(d.get("reference_seg", {})),
            detector=DetectorConfig.from_dict(d.get("detector", {})),
            classifier=ClassifierConfig.from_dict(d.get("classifier", {})),
            scoring=ScoringConfig.from_dict(d.get("scoring", {})),
            predictors=PredictorSelection.from_dict(d.get("predictors", {})),
            **kw,
        )
        return cfg.validate()


@dataclass
class TileSpec:
    x0: int
    y0: int
    width: int
    height: int


def tile_image(dims: tuple[int, int], tile: int, overlap: int) -> list[TileSpec]:
    """Row-major tile grid with the given overlap; the final tile per axis is
    pinned to the image edge so coverage is complete without overrun."""
    if overlap >= tile:
        raise ConfigError("tile_overlap", "overlap must be smaller than the tile")
    width, height = dims
    if width < 1 or height < 1:
        raise ConfigError("dims", f"must be positive, got {dims}")
    stride = tile - overlap

    def origins(dim: int) -> list[int]:
        if dim <= tile:
            return [0]
        xs = list(range(0, dim - tile + 1, stride))
        if xs[-1] != dim - tile:
            xs.append(dim - tile)
        return xs

    tiles = []
    for y in origins(height):
        for x in origins(width):
            tiles.append(TileSpec(x, y, min(tile, width), min(tile, height)))
    return tiles


def stitch_nuclei(
    per_tile: Sequence[tuple[Sequence[StarPolygon], tuple[int, int]]],
    iou_threshold: float,
    supersample: int = 4,
) -> list[StarPolygon]:
    """Translate per-tile polygons to slide coordinates and deduplicate with
    one global polygon NMS pass (same tie rules as segmentation NMS)."""
    merged: list[StarPolygon] = []
    for polys, (ox, oy) in per_tile:
        merged.extend(p.translated(ox, oy) for p in polys)
    return nms_polygons(merged, iou_threshold, supersample)


def _drop_border_polygons(
    polys: Sequence[StarPolygon], tile: TileSpec, image_w: int, image_h: int
) -> list[StarPolygon]:
    """Remove polygons touching a cut tile edge (not an image edge); with
    overlap >= nucleus diameter each nucleus stays whole in some tile."""
    out = []
    for p in polys:
        x0, y0, x1, y1 = p.int_bbox()
        bad = False
        if tile.x0 > 0 and x0 < TILE_BORDER_MARGIN:
            bad = True
        if tile.y0 > 0 and y0 < TILE_BORDER_MARGIN:
            bad = True
        if tile.x0 + tile.width < image_w and x1 > tile.width - 1 - TILE_BORDER_MARGIN:
            bad = True
        if tile.y0 + tile.height < image_h and y1 > tile.height - 1 - TILE_BORDER_MARGIN:
            bad = True
        if not bad:
            out.append(p)
    return out


@dataclass
class NucleusRecord:
    id: int
    polygon: StarPolygon  # slide coords
    crop_offset: tuple[int, int]
    crop_size: tuple[int, int]
    classifier_source: str
    classifier_class: NucleusClass
    rationale: Optional[str]
    probabilities: Optional[list]
    signals: list  # SignalBox in slide coords
    signal_class: Optional[NucleusClass]
    opinion: Optional[SecondOpinion]
    score: NucleusScore
    cam: Optional[CamMap]
    cam_reason: Optional[str]
    error: Optional[str] = None

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "polygon": {
                "center": [self.polygon.center[0], self.polygon.center[1]],
                "distances": [float(d) for d in self.polygon.distances],
                "score": float(self.polygon.score),
            },
            "crop_offset": list(self.crop_offset),
            "crop_size": list(self.crop_size),
            "classifier": {
                "source": self.classifier_source,
                "class": self.classifier_class.value,
                "rationale": self.rationale,
                "probabilities": self.probabilities,
            },
            "signals": [
                {"class": s.cls.value, "box": [float(v) for v in s.box], "score": float(s.score)}
                for s in self.signals
            ],
            "signal_class": self.signal_class.value if self.signal_class else None,
            "second_opinion": (
                {
                    "status": self.opinion.status.value,
                    "classes": [self.opinion.classifier_class.value, self.opinion.signal_class.value],
                }
                if self.opinion
                else None
            ),
            "score": {
                "her2_copies": self.score.her2_copies,
                "cep17_copies": self.score.cep17_copies,
                "ratio": self.score.ratio,
                "evaluable": self.score.evaluable,
                "exclusion_reason": self.score.exclusion_reason,
            },
            "cam": self.cam.values.tolist() if self.cam is not None else None,
            "cam_reason": self.cam_reason,
            "error": self.error,
            "override": None,
        }


@dataclass
class SlideReport:
    width: int
    height: int
    input_sha256: str
    config: PipelineConfig
    records: list
    status: SlideStatus
    metrics: Optional[object] = None
    created_at: str = ""
    reference_singleton_area: float = 0.0

    def to_dict(self) -> dict:
        return {
            "schema": SCHEMA,
            "tool_version": __version__,
            "created_at": self.created_at,
            "slide": {
                "width": self.width,
                "height": self.height,
                "input_sha256": self.input_sha256,
                "channel_map": {"R": "HER2", "G": "CEP17", "B": "DAPI"},
            },
            "config": self.config.to_dict(),
            "reference_singleton_area": self.reference_singleton_area,
            "nuclei": [r.to_dict() for r in self.records],
            "status": self.status.to_dict(),
            "metrics": self.metrics.to_dict() if self.metrics is not None else None,
        }


def _load_external_maps(cfg: PipelineConfig, dims: tuple[int, int]) -> ProbDistMaps:
    from .tensors import read_prob_dist

    p = cfg.predictors
    if not p.seg_prob_path or not p.seg_dist_path:
        raise ConfigError("predictors", "external segmentation needs prob and dist paths")
    maps = read_prob_dist(p.seg_prob_path, p.seg_dist_path)
    if maps.prob.shape != (dims[1], dims[0]):
        raise FormatError(
            f"external prob map {maps.prob.shape} does not match working dims {(dims[1], dims[0])}"
        )
    return maps


def _segment_tiles(working: MultiChannelImage, maps: Optional[ProbDistMaps], cfg: PipelineConfig) -> list[StarPolygon]:
    tiles = tile_image((working.width, working.height), cfg.tile_size, cfg.tile_overlap)
    per_tile = []
    for t in tiles:
        if maps is None:
            sub = MultiChannelImage(working.planes[:, t.y0 : t.y0 + t.height, t.x0 : t.x0 + t.width])
            tile_maps = reference_maps_from_image(sub, cfg.reference_seg)
        else:
            tile_maps = ProbDistMaps(
                maps.prob[t.y0 : t.y0 + t.height, t.x0 : t.x0 + t.width],
                maps.dist[:, t.y0 : t.y0 + t.height, t.x0 : t.x0 + t.width],
            )
        polys = segment(tile_maps, cfg.segmentation)
        polys = _drop_border_polygons(polys, t, working.width, working.height)
        per_tile.append((polys, (t.x0, t.y0)))
    return stitch_nuclei(per_tile, cfg.segmentation.nms_iou, cfg.segmentation.supersample)


def _external_classifier_data(cfg: PipelineConfig):
    from .tensors import read_tensor

    p = cfg.predictors
    if not p.classifier_logits_path or not p.classifier_mapping_path:
        raise ConfigError("predictors", "external classifier needs logits and mapping paths")
    logits = read_tensor(p.classifier_logits_path)
    with open(p.classifier_mapping_path, encoding="utf-8") as f:
        mapping = json.load(f)["nucleus_ids"]
    features = read_tensor(p.classifier_features_path) if p.classifier_features_path else None
    weights = read_tensor(p.classifier_weights_path) if p.classifier_weights_path else None
    by_id = {int(nid): i for i, nid in enumerate(mapping)}
    return logits, by_id, features, weights


def run_pipeline(image: MultiChannelImage, config: PipelineConfig, gt=None) -> SlideReport:
    """Run the full grading pipeline on one slide; deterministic for fixed
    (image bytes, config)."""
    config.validate()
    digest = hashlib.sha256()
    digest.update(np.int64(image.width).tobytes())
    digest.update(np.int64(image.height).tobytes())
    digest.update(image.planes.tobytes())
    input_hash = digest.hexdigest()

    working = downscale(image, config.downscale_factor)
    maps = None
    if config.predictors.segmentation == "external":
        maps = _load_external_maps(config, (working.width, working.height))
    elif config.predictors.segmentation != "reference":
        raise ConfigError("predictors.segmentation", f"unknown kind {config.predictors.segmentation!r}")
    working_polys = _segment_tiles(working, maps, config)

    f = config.downscale_factor
    half = (f - 1) / 2.0
    slide_polys = [
        StarPolygon((p.center[0] * f + half, p.center[1] * f + half), p.distances * f, p.score)
        for p in working_polys
    ]
    slide_polys.sort(key=lambda p: (p.center[1], p.center[0]))

    ext = None
    if config.predictors.classifier == "external":
        ext = _external_classifier_data(config)
    elif config.predictors.classifier != "rules":
        raise ConfigError("predictors.classifier", f"unknown kind {config.predictors.classifier!r}")

    def crop_and_detect(poly: StarPolygon):
        try:
            crop = extract_crop(image, poly, config.crop_margin)
            return crop, detect_signals(crop, config.detector), None
        except Exception as exc:  # degrade, never abort the slide
            return None, [], f"{type(exc).__name__}: {exc}"

    if config.threads > 1 and len(slide_polys) > 1:
        # nuclei are independent; executor.map preserves submission order,
        # so the report equals the sequential run
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            results = list(pool.map(crop_and_detect, slide_polys))
    else:
        results = [crop_and_detect(p) for p in slide_polys]
    crops = [r[0] for r in results]
    signals_local = [r[1] for r in results]
    errors = [r[2] for r in results]

    fallback = (4.0 * config.detector.log_sigma) ** 2
    singleton = reference_singleton_area(
        (s for s in signals_local), fallback
    )

    records: list[NucleusRecord] = []
    for idx, poly in enumerate(slide_polys):
        crop = crops[idx]
        sigs = signals_local[idx]
        err = errors[idx]
        if err is not None or crop is None:
            score = make_score(NucleusClass.ARTIFACT, 0, 0, True, config.scoring)
            records.append(
                NucleusRecord(
                    id=idx,
                    polygon=poly,
                    crop_offset=(0, 0),
                    crop_size=(0, 0),
                    classifier_source="rules",
                    classifier_class=NucleusClass.ARTIFACT,
                    rationale=f"degraded by stage error: {err}",
                    probabilities=None,
                    signals=[],
                    signal_class=None,
                    opinion=None,
                    score=score,
                    cam=None,
                    cam_reason="stage error",
                    error=err,
                )
            )
            continue

        her2, cep17 = nucleus_counts(sigs, config.scoring, singleton)
        sig_cls = grade_nucleus(her2, cep17, config.scoring)
        cam = None
        cam_reason = None
        probs = None
        rationale = None
        if ext is not None:
            logits, by_id, features, weights = ext
            if idx not in by_id:
                raise FormatError(f"external classifier mapping lacks nucleus id {idx}")
            row = by_id[idx]
            cls, pvec = classify_by_scores(logits[row])
            probs = [float(v) for v in pvec]
            source = "external"
            if features is not None and weights is not None:
                wrow = weights[CLASS_ORDER.index(cls)]
                cam = compute_cam(features[row], wrow, (crop.image.width, crop.image.height))
            else:
                cam_reason = "no feature maps supplied"
        else:
            cls, rationale = classify_by_rules(crop, sigs, config.classifier, config.scoring, singleton)
            source = "rules"
            cam_reason = "reference classifier has no feature maps"

        opinion = second_opinion(cls, sig_cls)
        score = make_score(cls, her2, cep17, opinion.consistent, config.scoring)
        records.append(
            NucleusRecord(
                id=idx,
                polygon=poly,
                crop_offset=crop.offset,
                crop_size=(crop.image.width, crop.image.height),
                classifier_source=source,
                classifier_class=cls,
                rationale=rationale,
                probabilities=probs,
                signals=[s.translated(crop.offset[0], crop.offset[1]) for s in sigs],
                signal_class=sig_cls,
                opinion=opinion,
                score=score,
                cam=cam,
                cam_reason=cam_reason,
                error=None,
            )
        )

    entries = [
        GradeEntry(r.classifier_class, r.score.her2_copies, r.score.cep17_copies, r.opinion.consistent if r.opinion else True)
        for r in records
    ]
    from .scoring import slide_status as _slide_status

    status = _slide_status(entries, config.scoring)

    metrics = None
    if gt is not None:
        from .evaluation import evaluate_slide

        all_signals = [s for r in records for s in r.signals]
        metrics = evaluate_slide(slide_polys, all_signals, status.status, gt)

    return SlideReport(
        width=image.width,
        height=image.height,
        input_sha256=input_hash,
        config=config,
        records=records,
        status=status,
        metrics=metrics,
        created_at=_dt.datetime.now(_dt.timezone.utc).isoformat(),
        reference_singleton_area=singleton,
    )


def report_json_bytes(report_dict: dict) -> bytes:
    """Canonical UTF-8 JSON: fixed key order (insertion), newline-terminated."""
    return (json.dumps(report_dict, indent=1, ensure_ascii=False) + "\n").encode("utf-8")


def write_report(report: SlideReport, fmt: str, image: Optional[MultiChannelImage] = None) -> bytes:
    if fmt == "json":
        return report_json_bytes(report.to_dict())
    if fmt == "overlay_png":
        if image is None:
            raise InputError("overlay rendering needs the slide image")
        return render_overlay(report.to_dict(), image)
    raise ConfigError("format", f"unknown report format {fmt!r}")


CLASS_COLORS = {
    "Normal": (80, 220, 100),
    "LowAmp": (255, 170, 40),
    "HighAmp": (255, 60, 60),
    "Artifact": (150, 150, 150),
    "Background": (90, 120, 220),
}


def render_overlay(report_dict: dict, image: MultiChannelImage, layer: str = "nuclei") -> bytes:
    """PNG overlay: polygon outlines color-coded by effective class, signal
    boxes, and a status banner."""
    import io as _io

    from PIL import Image, ImageDraw

    rgb = (np.moveaxis(image.planes, 0, 2) * 255.0).astype(np.uint8)
    img = Image.fromarray(rgb, "RGB")
    draw = ImageDraw.Draw(img)
    for rec in report_dict["nuclei"]:
        cls = effective_class_name(rec)
        color = CLASS_COLORS.get(cls, (255, 255, 255))
        if layer in ("nuclei", "all"):
            poly = StarPolygon(
                tuple(rec["polygon"]["center"]), np.array(rec["polygon"]["distances"]), rec["polygon"]["score"]
            )
            pts = [(float(x), float(y)) for x, y in poly.vertices()]
            draw.polygon(pts, outline=color)
        if layer in ("signals", "all"):
            for s in rec["signals"]:
                x0, y0, x1, y1 = s["box"]
                sc = {"HER2": (255, 80, 80), "HER2Cluster": (255, 0, 120), "CEP17": (80, 255, 80)}[s["class"]]
                draw.rectangle([x0, y0, x1, y1], outline=sc)
    status = report_dict["status"]["status"]
    draw.rectangle([0, 0, img.width - 1, 14], fill=(20, 20, 20))
    draw.text((4, 2), f"HER2 status: {status}", fill=(255, 255, 255))
    buf = _io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


def effective_class_name(rec: dict) -> str:
    ov = rec.get("override")
    if ov and ov.get("action") == "set_class":
        return ov["class"]
    return rec["classifier"]["class"]


def _entry_from_record(rec: dict, scoring: ScoringConfig, singleton: float) -> tuple[GradeEntry, dict]:
    """Recompute one nucleus's grade data from its stored signal boxes."""
    sigs = [SignalBox(SignalClass(s["class"]), tuple(s["box"]), s["score"]) for s in rec["signals"]]
    her2, cep17 = nucleus_counts(sigs, scoring, singleton)
    sig_cls = grade_nucleus(her2, cep17, scoring) if sigs or rec["signal_class"] else None
    if rec["classifier"]["source"] == "rules" and NucleusClass(rec["classifier"]["class"]).gradable:
        cls = grade_nucleus(her2, cep17, scoring)
    else:
        cls = NucleusClass(rec["classifier"]["class"])
    eff = cls
    include_override = None
    ov = rec.get("override")
    if ov:
        if ov.get("action") == "set_class":
            eff = NucleusClass(ov["class"])
        elif ov.get("action") == "exclude":
            include_override = False
        elif ov.get("action") == "include":
            include_override = True
    consistent = True
    opinion = None
    if sig_cls is not None:
        op = second_opinion(cls, sig_cls)
        consistent = op.consistent
        opinion = {"status": op.status.value, "classes": [cls.value, sig_cls.value]}
    entry = GradeEntry(eff, her2, cep17, consistent, include_override)
    score = make_score(eff, her2, cep17, consistent, scoring)
    if include_override is False:
        score.evaluable = False
        score.exclusion_reason = "excluded by reviewer"
    elif include_override is True and eff.gradable and cep17 >= 1:
        score.evaluable = True
        score.exclusion_reason = None
    updates = {
        "classifier_class": cls.value,
        "signal_class": sig_cls.value if sig_cls else None,
        "second_opinion": opinion,
        "score": {
            "her2_copies": her2,
            "cep17_copies": cep17,
            "ratio": score.ratio,
            "evaluable": score.evaluable,
            "exclusion_reason": score.exclusion_reason,
        },
    }
    return entry, updates


def regrade_report_dict(report: dict, scoring: ScoringConfig) -> dict:
    """Re-grade a report under new thresholds without re-running detection.

    Rule-classified gradable nuclei are re-graded from their stored signal
    boxes; external classifier decisions and filter classes are kept. The
    shared path for the CLI `score` command and the service config update.
    """
    scoring.validate()
    out = json.loads(json.dumps(report))  # deep copy
    singleton = out.get("reference_singleton_area") or 1.0
    entries = []
    for rec in out["nuclei"]:
        entry, updates = _entry_from_record(rec, scoring, singleton)
        rec["classifier"]["class"] = updates["classifier_class"]
        rec["signal_class"] = updates["signal_class"]
        rec["second_opinion"] = updates["second_opinion"]
        rec["score"] = updates["score"]
        entries.append(entry)
    from .scoring import slide_status as _slide_status

    status = _slide_status(entries, scoring)
    out["status"] = status.to_dict()
    out["config"]["scoring"] = scoring.to_dict()
    return out
