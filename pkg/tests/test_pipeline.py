import io
import json

import numpy as np
import pytest
from PIL import Image

from fishgrade.errors import ConfigError
from fishgrade.geometry import StarPolygon, polygon_iou
from fishgrade.image import MultiChannelImage, downscale
from fishgrade.pipeline import (
    PipelineConfig,
    regrade_report_dict,
    report_json_bytes,
    run_pipeline,
    stitch_nuclei,
    tile_image,
    write_report,
)
from fishgrade.scoring import ScoringConfig
from fishgrade.simulator import simulate_slide
from tests.conftest import small_noiseless, small_noisy


def test_downscale_factor_one_is_identity(rng):
    img = MultiChannelImage(rng.random((3, 10, 12), dtype=np.float32))
    out = downscale(img, 1)
    assert np.array_equal(out.planes, img.planes)


def test_downscale_halves_full_slide_canvas():
    img = MultiChannelImage(np.zeros((3, 1200, 1600), dtype=np.float32))
    out = downscale(img, 2)
    assert (out.width, out.height) == (800, 600)


def test_downscale_ceil_dims_and_constant_preservation():
    img = MultiChannelImage(np.full((3, 11, 13), 0.37, dtype=np.float32))
    out = downscale(img, 4)
    assert (out.width, out.height) == (4, 3)
    assert np.allclose(out.planes, 0.37, atol=1e-6)


def test_downscale_block_mean_oracle(rng):
    img = MultiChannelImage(rng.random((3, 6, 8), dtype=np.float32))
    out = downscale(img, 2)
    for c in range(3):
        for by in range(3):
            for bx in range(4):
                block = img.planes[c, by * 2 : by * 2 + 2, bx * 2 : bx * 2 + 2]
                assert abs(out.planes[c, by, bx] - block.mean()) < 1e-6


def test_tile_single_when_image_smaller_than_tile():
    tiles = tile_image((300, 200), 512, 64)
    assert len(tiles) == 1
    t = tiles[0]
    assert (t.x0, t.y0, t.width, t.height) == (0, 0, 300, 200)


def test_tile_origins_match_stride_enumeration():
    tiles = tile_image((1600, 1200), 512, 64)
    xs = sorted({t.x0 for t in tiles})
    ys = sorted({t.y0 for t in tiles})
    assert xs == [0, 448, 896, 1088]
    assert ys == [0, 448, 688]
    assert len(tiles) == 12


def test_tile_coverage_bitmap_oracle(rng):
    for _ in range(100):
        w = int(rng.integers(1, 900))
        h = int(rng.integers(1, 900))
        tile = int(rng.integers(8, 512))
        overlap = int(rng.integers(0, tile))
        tiles = tile_image((w, h), tile, overlap)
        cover = np.zeros((h, w), dtype=np.int32)
        for t in tiles:
            assert t.x0 >= 0 and t.y0 >= 0
            assert t.x0 + t.width <= w and t.y0 + t.height <= h
            cover[t.y0 : t.y0 + t.height, t.x0 : t.x0 + t.width] += 1
        assert (cover >= 1).all()


def test_tile_overlap_must_be_smaller():
    with pytest.raises(ConfigError):
        tile_image((100, 100), 64, 64)


def _poly(cx, cy, r=8.0, n=12, score=1.0):
    return StarPolygon((cx, cy), [r] * n, score)


def test_stitch_interior_nucleus_once():
    out = stitch_nuclei([([ _poly(20, 20) ], (0, 0)), ([], (100, 0))], 0.45)
    assert len(out) == 1
    assert out[0].center == (20.0, 20.0)


def test_stitch_duplicate_keeps_higher_score():
    a = _poly(10, 10, score=1.0)
    b = _poly(110, 10, score=0.7)  # same slide position once offset applied
    out = stitch_nuclei([([a], (100, 0)), ([b], (0, 0))], 0.45)
    assert len(out) == 1
    assert out[0].score == 1.0


def test_stitch_empty():
    assert stitch_nuclei([], 0.45) == []


def test_stitch_idempotent(rng):
    polys = [
        _poly(float(rng.uniform(10, 90)), float(rng.uniform(10, 90)), float(rng.uniform(4, 9)), score=float(rng.uniform(0.2, 1)))
        for _ in range(12)
    ]
    once = stitch_nuclei([(polys, (0, 0))], 0.45)
    twice = stitch_nuclei([(once, (0, 0))], 0.45)
    assert [(p.center, p.score) for p in once] == [(p.center, p.score) for p in twice]


def _fast_config(**kw):
    base = dict(downscale_factor=1, tile_size=512, tile_overlap=128)
    base.update(kw)
    return PipelineConfig(**base)


@pytest.fixture(scope="module")
def pipeline_run():
    cfg = small_noiseless(nucleus_count=(24, 28), width=901, height=675)
    image, gt = simulate_slide(cfg, 11)
    report = run_pipeline(image, _fast_config(), gt)
    return image, gt, report


def test_run_status_matches_gt(pipeline_run):
    _, gt, report = pipeline_run
    assert report.status.status is gt.status.status
    assert report.metrics.status_agreement
    assert report.metrics.nucleus_precision == 1.0
    assert report.metrics.nucleus_recall == 1.0


def test_run_blank_image_indeterminate():
    blank = MultiChannelImage(np.zeros((3, 128, 128), dtype=np.float32))
    report = run_pipeline(blank, _fast_config())
    assert report.records == []
    assert report.status.status.value == "Indeterminate"


def test_run_deterministic_minus_timestamp():
    cfg = small_noisy(width=512, height=512, nucleus_count=(6, 9))
    image, _ = simulate_slide(cfg, 21)
    a = run_pipeline(image, _fast_config()).to_dict()
    b = run_pipeline(image, _fast_config()).to_dict()
    a.pop("created_at")
    b.pop("created_at")
    assert report_json_bytes(a) == report_json_bytes(b)


def test_nucleus_in_overlap_band_appears_once():
    # two tiles overlap on x in [384, 512); nucleus sits whole inside the band
    cfg = small_noiseless(width=896, height=300, nucleus_count=(0, 0))
    image, _ = simulate_slide(cfg, 5)
    planes = image.planes.copy()
    poly = _poly(448, 150, r=26.0, n=32)
    from fishgrade.geometry import polygon_mask

    x0, y0, x1, y1 = poly.int_bbox()
    m = polygon_mask(poly.translated(-x0, -y0), 0, 0, x1 - x0 + 1, y1 - y0 + 1, 1)
    region = planes[2, y0 : y1 + 1, x0 : x1 + 1]
    region[m] = 0.65
    from scipy import ndimage

    planes[2] = ndimage.gaussian_filter(planes[2], 1.0)
    image = MultiChannelImage(planes)
    report = run_pipeline(image, _fast_config())
    assert len(report.records) == 1
    got = report.records[0].polygon
    assert polygon_iou(got, poly) >= 0.5


def test_report_json_round_trip(pipeline_run):
    _, _, report = pipeline_run
    blob = write_report(report, "json")
    parsed = json.loads(blob.decode("utf-8"))
    assert parsed == report.to_dict()
    assert parsed["schema"] == "fishgrade/1"
    assert parsed["status"]["status"] == report.status.status.value
    assert len(parsed["nuclei"]) == len(report.records)


def test_report_empty_nuclei_valid_json():
    blank = MultiChannelImage(np.zeros((3, 64, 64), dtype=np.float32))
    report = run_pipeline(blank, _fast_config())
    parsed = json.loads(write_report(report, "json"))
    assert parsed["nuclei"] == []


def test_overlay_outlines_near_polygon_vertices(pipeline_run):
    image, _, report = pipeline_run
    png = write_report(report, "overlay_png", image)
    img = np.asarray(Image.open(io.BytesIO(png)).convert("RGB"))
    base = (np.moveaxis(image.planes, 0, 2) * 255.0).astype(np.uint8)
    changed = np.abs(img.astype(int) - base.astype(int)).sum(axis=2) > 0
    for rec in report.records[:5]:
        for vx, vy in rec.polygon.vertices():
            x, y = int(round(vx)), int(round(vy))
            window = changed[max(0, y - 1) : y + 2, max(0, x - 1) : x + 2]
            assert window.any(), f"no drawn pixel within 1 px of vertex ({x}, {y})"


def test_ratio_recomputes_from_stored_signals(pipeline_run):
    _, _, report = pipeline_run
    d = report.to_dict()
    regraded = regrade_report_dict(d, ScoringConfig())
    for before, after in zip(d["nuclei"], regraded["nuclei"]):
        assert before["score"]["ratio"] == after["score"]["ratio"]
        assert before["score"]["her2_copies"] == after["score"]["her2_copies"]
    assert regraded["status"] == d["status"]


def test_regrade_threshold_flip(pipeline_run):
    _, _, report = pipeline_run
    d = report.to_dict()
    mean_ratio = d["status"]["mean_ratio"]
    low = regrade_report_dict(d, ScoringConfig(ratio_threshold=max(0.1, mean_ratio - 0.2)))
    high = regrade_report_dict(d, ScoringConfig(ratio_threshold=mean_ratio + 0.2))
    assert low["status"]["status"] in ("PositiveLow", "PositiveHigh")
    assert high["status"]["status"] == "Negative"


def test_overlay_signals_layer_count_matches_report():
    """Drawn signal-box outlines on a blank canvas = one component per box."""
    from scipy import ndimage

    from fishgrade.pipeline import render_overlay

    blank = MultiChannelImage(np.zeros((3, 200, 200), dtype=np.float32))
    boxes = [(20, 20, 34, 34), (60, 20, 74, 36), (20, 60, 36, 74), (120, 120, 140, 138), (160, 40, 176, 58)]
    report = {
        "nuclei": [
            {
                "polygon": {"center": [100.0, 100.0], "distances": [5.0] * 8, "score": 1.0},
                "classifier": {"class": "Normal"},
                "signals": [
                    {"class": "HER2", "box": list(b), "score": 0.9} for b in boxes
                ],
                "override": None,
            }
        ],
        "status": {"status": "Negative"},
    }
    png = render_overlay(report, blank, layer="signals")
    import io as _io

    from PIL import Image

    drawn = np.asarray(Image.open(_io.BytesIO(png)).convert("RGB")).sum(axis=2) > 0
    drawn[:16, :] = False  # mask the status banner
    _, n = ndimage.label(drawn)
    assert n == len(boxes)


def test_report_wire_schema_keys_frozen(pipeline_run):
    """The review UI's wire types depend on exactly these keys."""
    _, _, report = pipeline_run
    d = report.to_dict()
    assert set(d) == {
        "schema", "tool_version", "created_at", "slide", "config",
        "reference_singleton_area", "nuclei", "status", "metrics",
    }
    assert set(d["slide"]) == {"width", "height", "input_sha256", "channel_map"}
    assert set(d["status"]) == {"status", "evaluable_count", "mean_ratio", "mean_her2_copies"}
    rec = d["nuclei"][0]
    assert set(rec) == {
        "id", "polygon", "crop_offset", "crop_size", "classifier", "signals",
        "signal_class", "second_opinion", "score", "cam", "cam_reason", "error", "override",
    }
    assert set(rec["polygon"]) == {"center", "distances", "score"}
    assert set(rec["classifier"]) == {"source", "class", "rationale", "probabilities"}
    assert set(rec["score"]) == {"her2_copies", "cep17_copies", "ratio", "evaluable", "exclusion_reason"}
    for s in rec["signals"]:
        assert set(s) == {"class", "box", "score"}
    assert set(d["config"]["scoring"]) == {
        "ratio_threshold", "high_amp_mean_her2_copies", "min_evaluable_nuclei",
        "cluster_copies_floor", "cluster_copies_cap", "include_discrepant",
    }
