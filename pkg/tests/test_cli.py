import json
import subprocess
import sys
from pathlib import Path

import pytest

from fishgrade.cli import main, parse_args


def run_cli(args, **kw):
    return subprocess.run(
        [sys.executable, "-m", "fishgrade.cli", *args], capture_output=True, text=True, **kw
    )


def test_parse_run_command():
    args = parse_args(["run", "--input", "s.png", "--out", "r.json"])
    assert args.command == "run"
    assert args.input == "s.png"
    assert args.out == "r.json"


def test_help_exits_zero():
    proc = run_cli(["--help"])
    assert proc.returncode == 0
    assert "simulate" in proc.stdout


def test_unknown_flag_exits_two():
    proc = run_cli(["run", "--bogus"])
    assert proc.returncode == 2
    assert proc.stderr


def test_missing_command_exits_two():
    proc = run_cli([])
    assert proc.returncode == 2


def test_run_on_unreadable_file_exits_one(tmp_path):
    bad = tmp_path / "nope.png"
    bad.write_bytes(b"this is not a png")
    code = main(["run", "--input", str(bad), "--out", str(tmp_path / "r.json")])
    assert code == 1


@pytest.fixture(scope="module")
def sim_config(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    cfg = {
        "simulator": {
            "width": 640,
            "height": 640,
            "nucleus_count": [22, 24],
            "nucleus_radius": [24, 32],
            "noise_sigma": 0.0,
            "smear_density": 0.0,
            "class_mix": {"Normal": 0.6, "LowAmp": 0.25, "HighAmp": 0.15, "Artifact": 0.0},
        },
        "pipeline": {"downscale_factor": 1, "tile_size": 512, "tile_overlap": 128},
    }
    path = d / "config.json"
    path.write_text(json.dumps(cfg))
    return d, path


@pytest.fixture(scope="module")
def full_loop(sim_config):
    """simulate -> run -> evaluate, all through the CLI entry point."""
    d, cfg_path = sim_config
    slide = d / "slide.png"
    gt = d / "gt.json"
    report = d / "report.json"
    metrics = d / "metrics.json"
    assert main(["simulate", "--config", str(cfg_path), "--seed", "17", "--out", str(slide), "--gt", str(gt)]) == 0
    assert main(["run", "--config", str(cfg_path), "--input", str(slide), "--gt", str(gt), "--out", str(report)]) == 0
    assert (
        main(
            [
                "evaluate",
                "--report", str(report),
                "--gt", str(gt),
                "--out", str(metrics),
                "--min-nucleus-precision", "0.99",
                "--min-nucleus-recall", "0.99",
            ]
        )
        == 0
    )
    return d, cfg_path, slide, gt, report, metrics


def test_full_oracle_loop_metrics(full_loop):
    _, _, _, _, report, metrics = full_loop
    m = json.loads(metrics.read_text())
    assert m["nucleus_precision"] == 1.0
    assert m["nucleus_recall"] == 1.0
    assert m["status_agreement"] is True


def test_evaluate_gate_failure_exits_one(full_loop):
    d, _, _, gt, report, _ = full_loop
    code = main(
        [
            "evaluate",
            "--report", str(report),
            "--gt", str(gt),
            "--out", str(d / "m2.json"),
            "--min-map", "1.01",
        ]
    )
    assert code == 1


def test_score_regrades_without_rerun(full_loop):
    d, _, _, _, report, _ = full_loop
    before = json.loads(report.read_text())
    out = d / "rescored.json"
    mean_ratio = before["status"]["mean_ratio"]
    assert main(["score", "--report", str(report), "--out", str(out), "--ratio-threshold", str(mean_ratio + 0.5)]) == 0
    after = json.loads(out.read_text())
    assert after["status"]["status"] == "Negative"
    assert after["config"]["scoring"]["ratio_threshold"] == mean_ratio + 0.5
    # detection outputs untouched
    assert [n["signals"] for n in after["nuclei"]] == [n["signals"] for n in before["nuclei"]]


def test_identical_argv_identical_outputs(full_loop):
    d, cfg_path, slide, gt, report, _ = full_loop
    rerun = d / "report2.json"
    assert main(["run", "--config", str(cfg_path), "--input", str(slide), "--gt", str(gt), "--out", str(rerun)]) == 0
    a = json.loads(report.read_text())
    b = json.loads(rerun.read_text())
    a.pop("created_at")
    b.pop("created_at")
    assert a == b


def test_simulate_writes_16bit_png(full_loop):
    import cv2

    _, _, slide, _, _, _ = full_loop
    raw = cv2.imread(str(slide), cv2.IMREAD_UNCHANGED)
    assert raw.dtype.name == "uint16"
    assert raw.shape == (640, 640, 3)


def test_detect_and_classify_commands(full_loop, tmp_path):
    import numpy as np

    from fishgrade.image import MultiChannelImage, write_png16
    from fishgrade.segmentation import extract_crop
    from fishgrade.simulator import simulate_slide
    from tests.conftest import small_noiseless

    image, gt = simulate_slide(small_noiseless(nucleus_count=(6, 8)), 23)
    nucleus = next(n for n in gt.nuclei if n.cls.value in ("Normal", "LowAmp", "HighAmp"))
    crop = extract_crop(image, nucleus.polygon, 10)
    crop_png = tmp_path / "crop.png"
    write_png16(crop.image, crop_png)

    sig_json = tmp_path / "signals.json"
    assert main(["detect", "--crop", str(crop_png), "--out", str(sig_json)]) == 0
    data = json.loads(sig_json.read_text())
    n_singles = sum(1 for s in nucleus.signals if s.true_copies == 1)
    n_clusters = sum(1 for s in nucleus.signals if s.true_copies > 1)
    assert len(data["signals"]) == n_singles + n_clusters

    cls_json = tmp_path / "class.json"
    assert main(["classify", "--crop", str(crop_png), "--signals", str(sig_json), "--out", str(cls_json)]) == 0
    out = json.loads(cls_json.read_text())
    assert out["class"] == nucleus.cls.value
    assert out["rationale"]


def test_detect_with_external_head_maps(tmp_path):
    import numpy as np

    from fishgrade.image import MultiChannelImage, write_png16
    from fishgrade.signal_detection import AnchorGrid, SignalBox, SignalClass, encode_boxes
    from fishgrade.tensors import write_head_maps

    blank = MultiChannelImage(np.zeros((3, 64, 64), dtype=np.float32))
    crop_png = tmp_path / "crop.png"
    write_png16(blank, crop_png)
    grid = AnchorGrid(8, ((8.0, 8.0),))
    boxes = [
        SignalBox(SignalClass.HER2, (10.0, 10.0, 18.0, 18.0), 0.9),
        SignalBox(SignalClass.CEP17, (40.0, 40.0, 48.0, 48.0), 0.8),
    ]
    head = encode_boxes(boxes, grid, 8, 8)
    write_head_maps(tmp_path / "c.fgt", tmp_path / "b.fgt", tmp_path / "s.json", head, grid)
    out = tmp_path / "sig.json"
    code = main(
        [
            "detect", "--crop", str(crop_png), "--out", str(out),
            "--head-class", str(tmp_path / "c.fgt"),
            "--head-box", str(tmp_path / "b.fgt"),
            "--head-sidecar", str(tmp_path / "s.json"),
        ]
    )
    assert code == 0
    data = json.loads(out.read_text())
    assert {s["class"] for s in data["signals"]} == {"HER2", "CEP17"}

    # ill-formed map file -> input error -> exit 1
    (tmp_path / "c.fgt").write_bytes(b"garbage")
    code = main(
        [
            "detect", "--crop", str(crop_png), "--out", str(out),
            "--head-class", str(tmp_path / "c.fgt"),
            "--head-box", str(tmp_path / "b.fgt"),
            "--head-sidecar", str(tmp_path / "s.json"),
        ]
    )
    assert code == 1


def test_segment_exports_fgt_maps(sim_config, tmp_path):
    from fishgrade.tensors import read_prob_dist

    d, cfg_path = sim_config
    slide = tmp_path / "slide.png"
    assert main(["simulate", "--config", str(cfg_path), "--seed", "29", "--out", str(slide)]) == 0
    out = tmp_path / "polys.json"
    code = main(
        [
            "segment", "--config", str(cfg_path), "--input", str(slide), "--out", str(out),
            "--save-prob", str(tmp_path / "p.fgt"), "--save-dist", str(tmp_path / "d.fgt"),
        ]
    )
    assert code == 0
    maps = read_prob_dist(tmp_path / "p.fgt", tmp_path / "d.fgt")
    assert maps.prob.shape == (640, 640)
    assert maps.prob.max() == 1.0
    polys = json.loads(out.read_text())["polygons"]
    assert len(polys) >= 20
