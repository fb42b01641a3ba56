import math

import numpy as np
import pytest

from fishgrade.errors import FormatError
from fishgrade.image import MultiChannelImage
from fishgrade.segmentation import NucleusCrop, extract_crop
from fishgrade.signal_detection import (
    AnchorGrid,
    DetectorConfig,
    HeadMaps,
    SignalBox,
    SignalClass,
    box_iou,
    decode_anchors,
    detect_blobs_log,
    detect_signals,
    encode_boxes,
    merge_clusters,
    nms_boxes,
)
from fishgrade.simulator import simulate_slide
from tests.conftest import small_noiseless


def _crop_with_spots(spots, channel=0, w=80, h=80, sigma=1.5):
    planes = np.zeros((3, h, w), dtype=np.float64)
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    for x, y, a in spots:
        planes[channel] += a * np.exp(-((xx - x) ** 2 + (yy - y) ** 2) / (2 * sigma * sigma))
    img = MultiChannelImage(np.clip(planes, 0, 1).astype(np.float32))
    return NucleusCrop(img, (0, 0), np.ones((h, w), dtype=bool))


def test_all_zero_channel_gives_no_boxes():
    crop = _crop_with_spots([])
    assert detect_blobs_log(crop, "HER2", DetectorConfig()) == []


def test_single_gaussian_spot_found_within_one_pixel():
    cfg = DetectorConfig(log_sigma=1.5)
    crop = _crop_with_spots([(40.0, 40.0, 0.9)], sigma=1.5)
    boxes = detect_blobs_log(crop, "HER2", cfg)
    assert len(boxes) == 1
    b = boxes[0]
    cx = (b.box[0] + b.box[2]) / 2
    cy = (b.box[1] + b.box[3]) / 2
    assert abs(cx - 40.0) <= 1.0 and abs(cy - 40.0) <= 1.0
    assert b.cls is SignalClass.HER2


def test_two_spots_ten_px_apart_give_two_boxes():
    cfg = DetectorConfig()
    crop = _crop_with_spots([(35.0, 40.3, 0.8), (45.0, 40.3, 0.8)], sigma=1.75)
    boxes = detect_signals(crop, cfg)
    assert len(boxes) == 2
    assert all(b.cls is SignalClass.HER2 for b in boxes)


def test_cep17_channel_yields_cep17_class():
    cfg = DetectorConfig()
    crop = _crop_with_spots([(30.0, 30.0, 0.8)], channel=1, sigma=1.75)
    boxes = detect_blobs_log(crop, "CEP17", cfg)
    assert len(boxes) == 1 and boxes[0].cls is SignalClass.CEP17


def test_merge_no_overlap_passes_through():
    cfg = DetectorConfig()
    boxes = [
        SignalBox(SignalClass.HER2, (0, 0, 8, 8), 0.9),
        SignalBox(SignalClass.HER2, (30, 30, 38, 38), 0.8),
    ]
    assert merge_clusters(boxes, cfg) == sorted(boxes, key=lambda b: (b.box[1], b.box[0], b.cls.value))


def test_merge_five_overlapping_boxes_forced_cluster():
    cfg = DetectorConfig()
    boxes = [SignalBox(SignalClass.HER2, (i, i, i + 8, i + 8), 0.5 + i * 0.01) for i in range(5)]
    out = merge_clusters(boxes, cfg)
    assert len(out) == 1
    got = out[0]
    assert got.cls is SignalClass.HER2_CLUSTER
    assert got.box == (0, 0, 12, 12)
    assert got.score == max(b.score for b in boxes)


def test_merge_rejects_non_her2_input():
    with pytest.raises(ValueError):
        merge_clusters([SignalBox(SignalClass.CEP17, (0, 0, 2, 2), 0.5)], DetectorConfig())


def test_merge_components_match_union_find_oracle(rng):
    cfg = DetectorConfig(cluster_merge_iou=0.2, cluster_min_peaks=3)

    def oracle_components(boxes):
        n = len(boxes)
        adj = [[box_iou(boxes[i].box, boxes[j].box) > cfg.cluster_merge_iou for j in range(n)] for i in range(n)]
        seen = [False] * n
        comps = []
        for i in range(n):
            if seen[i]:
                continue
            stack, comp = [i], []
            seen[i] = True
            while stack:
                u = stack.pop()
                comp.append(u)
                for v in range(n):
                    if not seen[v] and adj[u][v]:
                        seen[v] = True
                        stack.append(v)
            comps.append(sorted(comp))
        return comps

    for _ in range(30):
        n = int(rng.integers(1, 15))
        boxes = []
        for _ in range(n):
            x = float(rng.uniform(0, 40))
            y = float(rng.uniform(0, 40))
            boxes.append(SignalBox(SignalClass.HER2, (x, y, x + 8, y + 8), float(rng.uniform(0.2, 1))))
        comps = oracle_components(boxes)
        out = merge_clusters(boxes, cfg)
        n_clusters = sum(1 for c in comps if len(c) >= cfg.cluster_min_peaks)
        n_passthrough = sum(len(c) for c in comps if len(c) < cfg.cluster_min_peaks)
        assert sum(1 for b in out if b.cls is SignalClass.HER2_CLUSTER) == n_clusters
        assert sum(1 for b in out if b.cls is SignalClass.HER2) == n_passthrough
        for comp in comps:
            if len(comp) >= cfg.cluster_min_peaks:
                union = (
                    min(boxes[i].box[0] for i in comp),
                    min(boxes[i].box[1] for i in comp),
                    max(boxes[i].box[2] for i in comp),
                    max(boxes[i].box[3] for i in comp),
                )
                assert any(b.cls is SignalClass.HER2_CLUSTER and b.box == union for b in out)


def _head_from_boxes(boxes, grid, gh, gw):
    return encode_boxes(boxes, grid, gh, gw)


def test_decode_identity_deltas_returns_anchors():
    grid = AnchorGrid(8, ((8.0, 8.0),))
    logits = np.full((3, 4, 4), -40.0)
    logits[0, 1, 2] = 5.0  # HER2 at cell (1, 2)
    deltas = np.zeros((4, 4, 4))
    boxes = decode_anchors(HeadMaps(logits, deltas), grid, 0.5)
    assert len(boxes) == 1
    b = boxes[0]
    assert b.cls is SignalClass.HER2
    assert np.allclose(b.box, (20 - 4, 12 - 4, 20 + 4, 12 + 4))


def test_decode_log2_width_doubles_box():
    grid = AnchorGrid(8, ((8.0, 8.0),))
    logits = np.full((3, 2, 2), -40.0)
    logits[2, 0, 0] = 3.0  # CEP17
    deltas = np.zeros((4, 2, 2))
    deltas[2, 0, 0] = math.log(2.0)
    boxes = decode_anchors(HeadMaps(logits, deltas), grid, 0.5)
    b = boxes[0]
    assert b.cls is SignalClass.CEP17
    assert np.isclose(b.box[2] - b.box[0], 16.0)
    assert np.isclose((b.box[0] + b.box[2]) / 2, 4.0)  # center unchanged
    assert np.isclose(b.box[3] - b.box[1], 8.0)


def test_decode_matches_scalar_formula_oracle(rng):
    grid = AnchorGrid(16, ((12.0, 20.0), (24.0, 12.0)))
    gh, gw = 6, 5
    a, c = 2, 3
    logits = rng.normal(0, 2, (a * c, gh, gw))
    deltas = rng.normal(0, 0.4, (a * 4, gh, gw))
    got = decode_anchors(HeadMaps(logits, deltas), grid, 0.5)
    oracle = []
    for ai in range(a):
        aw, ah = grid.anchors[ai]
        for ci in range(c):
            for gy in range(gh):
                for gx in range(gw):
                    score = 1.0 / (1.0 + math.exp(-logits[ai * c + ci, gy, gx]))
                    if score < 0.5:
                        continue
                    acx, acy = (gx + 0.5) * 16, (gy + 0.5) * 16
                    cx = acx + deltas[ai * 4 + 0, gy, gx] * aw
                    cy = acy + deltas[ai * 4 + 1, gy, gx] * ah
                    w = aw * math.exp(deltas[ai * 4 + 2, gy, gx])
                    h = ah * math.exp(deltas[ai * 4 + 3, gy, gx])
                    oracle.append((ci, cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2, score))
    assert len(got) == len(oracle)
    got_sorted = sorted((list(SignalClass).index(b.cls), *b.box, b.score) for b in got)
    for g, o in zip(got_sorted, sorted(oracle)):
        assert g[0] == o[0]
        assert all(abs(gv - ov) < 1e-6 for gv, ov in zip(g[1:], o[1:]))


def test_encode_decode_round_trip(rng):
    grid = AnchorGrid(8, ((8.0, 8.0), (14.0, 14.0)))
    gh = gw = 64
    slots = set()
    boxes = []
    while len(boxes) < 500:
        cx = float(rng.uniform(4, gw * 8 - 4))
        cy = float(rng.uniform(4, gh * 8 - 4))
        w = float(rng.uniform(5, 16))
        h = float(rng.uniform(5, 16))
        cls = [SignalClass.HER2, SignalClass.HER2_CLUSTER, SignalClass.CEP17][int(rng.integers(0, 3))]
        ai = 0 if math.log(w / 8) ** 2 + math.log(h / 8) ** 2 <= math.log(w / 14) ** 2 + math.log(h / 14) ** 2 else 1
        key = (int(cx // 8), int(cy // 8), ai)
        if key in slots:
            continue
        slots.add(key)
        boxes.append(SignalBox(cls, (cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2), float(rng.uniform(0.4, 0.99))))
    head = encode_boxes(boxes, grid, gh, gw)
    decoded = decode_anchors(head, grid, 0.05)
    assert len(decoded) == len(boxes)
    want = sorted((b.box[0], b.box[1], b.box[2], b.box[3]) for b in boxes)
    got = sorted((b.box[0], b.box[1], b.box[2], b.box[3]) for b in decoded)
    for w_, g_ in zip(want, got):
        for a_, b_ in zip(w_, g_):
            assert abs(a_ - b_) < 1e-5


def test_encode_collision_raises():
    grid = AnchorGrid(8, ((8.0, 8.0),))
    b = SignalBox(SignalClass.HER2, (10, 10, 18, 18), 0.9)
    with pytest.raises(FormatError):
        encode_boxes([b, b], grid, 4, 4)


def test_head_maps_shape_mismatch_named():
    grid = AnchorGrid(8, ((8.0, 8.0),))
    with pytest.raises(FormatError) as err:
        HeadMaps(np.zeros((2, 4, 4)), np.zeros((4, 4, 4))).validate(grid)
    assert "class_logits" in str(err.value)
    with pytest.raises(FormatError) as err:
        HeadMaps(np.zeros((3, 4, 4)), np.zeros((4, 5, 4))).validate(grid)
    assert "box_deltas" in str(err.value)


def test_nms_single_box_kept():
    b = SignalBox(SignalClass.HER2, (0, 0, 5, 5), 0.5)
    assert nms_boxes([b], 0.5) == [b]


def test_nms_identical_boxes_different_classes_both_kept():
    a = SignalBox(SignalClass.HER2, (0, 0, 5, 5), 0.5)
    b = SignalBox(SignalClass.CEP17, (0, 0, 5, 5), 0.5)
    assert len(nms_boxes([a, b], 0.5, per_class=True)) == 2
    assert len(nms_boxes([a, b], 0.5, per_class=False)) == 1


def test_nms_boxes_matches_brute_force_oracle(rng):
    def brute(boxes, thr, per_class):
        order = sorted(range(len(boxes)), key=lambda i: (-boxes[i].score, boxes[i].box[1], boxes[i].box[0], boxes[i].cls.value))
        kept = []
        for i in order:
            ok = True
            for j in kept:
                if per_class and boxes[i].cls is not boxes[j].cls:
                    continue
                if box_iou(boxes[i].box, boxes[j].box) > thr:
                    ok = False
                    break
            if ok:
                kept.append(i)
        return [boxes[i] for i in kept]

    for _ in range(40):
        n = int(rng.integers(1, 100))
        boxes = []
        for _ in range(n):
            x, y = rng.uniform(0, 50, 2)
            w, h = rng.uniform(2, 12, 2)
            cls = [SignalClass.HER2, SignalClass.HER2_CLUSTER, SignalClass.CEP17][int(rng.integers(0, 3))]
            boxes.append(SignalBox(cls, (float(x), float(y), float(x + w), float(y + h)), float(rng.uniform(0, 1))))
        per_class = bool(rng.integers(0, 2))
        thr = float(rng.uniform(0.1, 0.7))
        assert nms_boxes(boxes, thr, per_class) == brute(boxes, thr, per_class)


def test_per_class_nms_keeps_top_box_of_every_class(rng):
    boxes = []
    for _ in range(60):
        x, y = rng.uniform(0, 30, 2)
        cls = [SignalClass.HER2, SignalClass.HER2_CLUSTER, SignalClass.CEP17][int(rng.integers(0, 3))]
        boxes.append(SignalBox(cls, (float(x), float(y), float(x + 8), float(y + 8)), float(rng.uniform(0, 1))))
    kept = nms_boxes(boxes, 0.4, per_class=True)
    for cls in SignalClass:
        of_class = [b for b in boxes if b.cls is cls]
        if of_class:
            top = max(of_class, key=lambda b: b.score)
            assert top in kept


def test_detect_signals_on_simulated_crop_matches_gt():
    cfg = small_noiseless(nucleus_count=(10, 12))
    image, gt = simulate_slide(cfg, 13)
    det = DetectorConfig()
    for n in gt.nuclei:
        crop = extract_crop(image, n.polygon, 10)
        found = detect_signals(crop, det)
        ox, oy = crop.offset
        singles = [s for s in n.signals if s.true_copies == 1]
        found_singles = [b for b in found if b.cls is not SignalClass.HER2_CLUSTER]
        assert len(found_singles) == len(singles)
        for s in singles:
            cx = (s.box[0] + s.box[2]) / 2 - ox
            cy = (s.box[1] + s.box[3]) / 2 - oy
            match = min(found_singles, key=lambda b: (b.box[0] + b.box[2]) / 2 - cx if False else abs((b.box[0] + b.box[2]) / 2 - cx) + abs((b.box[1] + b.box[3]) / 2 - cy))
            assert abs((match.box[0] + match.box[2]) / 2 - cx) <= 1.0
            assert abs((match.box[1] + match.box[3]) / 2 - cy) <= 1.0
            assert match.cls.value == s.cls.value
        gt_clusters = [s for s in n.signals if s.cls is SignalClass.HER2_CLUSTER]
        for g in gt_clusters:
            local = (g.box[0] - ox, g.box[1] - oy, g.box[2] - ox, g.box[3] - oy)
            assert any(
                b.cls is SignalClass.HER2_CLUSTER and box_iou(b.box, local) >= 0.5 for b in found
            )


def test_detect_signals_empty_crop():
    crop = _crop_with_spots([])
    assert detect_signals(crop, DetectorConfig()) == []


def test_output_boxes_inside_crop_bounds():
    cfg = DetectorConfig()
    crop = _crop_with_spots([(2.0, 2.0, 0.9), (77.0, 77.0, 0.9)], sigma=1.75)
    for b in detect_signals(crop, cfg):
        assert b.box[0] >= 0 and b.box[1] >= 0
        assert b.box[2] <= crop.image.width and b.box[3] <= crop.image.height
