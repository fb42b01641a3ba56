"""FISH signal localization in nucleus crops.

Two predictor routes: a reference Laplacian-of-Gaussian blob detector with a
geometric cluster-merge rule, and a decoder for externally supplied
anchor-based detection-head maps (box deltas + class logits).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .errors import ConfigError, FormatError
from .image import HER2 as HER2_PLANE
from .image import CEP17 as CEP17_PLANE


class SignalClass(enum.Enum):
    HER2 = "HER2"
    HER2_CLUSTER = "HER2Cluster"
    CEP17 = "CEP17"


CLASS_ORDER = (SignalClass.HER2, SignalClass.HER2_CLUSTER, SignalClass.CEP17)


@dataclass
class SignalBox:
    """Classed, scored box (x0, y0, x1, y1) in crop pixel coordinates."""

    cls: SignalClass
    box: tuple[float, float, float, float]
    score: float

    def __post_init__(self):
        x0, y0, x1, y1 = self.box
        if not (x0 < x1 and y0 < y1):
            raise ValueError(f"empty box {self.box}")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")

    def area(self) -> float:
        x0, y0, x1, y1 = self.box
        return (x1 - x0) * (y1 - y0)

    def translated(self, dx: float, dy: float) -> "SignalBox":
        x0, y0, x1, y1 = self.box
        return SignalBox(self.cls, (x0 + dx, y0 + dy, x1 + dx, y1 + dy), self.score)


@dataclass
class DetectorConfig:
    """Reference blob detector knobs. Box half-width is always round(2*sigma)."""

    log_sigma: float = 1.75
    peak_threshold: float = 0.12
    cluster_merge_iou: float = 0.08
    cluster_min_peaks: int = 3
    box_nms_iou: float = 0.5
    score_threshold: float = 0.12

    def validate(self) -> "DetectorConfig":
        if self.log_sigma <= 0:
            raise ConfigError("log_sigma", "must be > 0")
        for name in ("peak_threshold", "cluster_merge_iou", "box_nms_iou", "score_threshold"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ConfigError(name, f"must be in (0, 1), got {v}")
        if self.cluster_min_peaks < 2:
            raise ConfigError("cluster_min_peaks", "must be >= 2")
        return self

    @property
    def box_half_width(self) -> int:
        return int(2.0 * self.log_sigma + 0.5)

    def to_dict(self) -> dict:
        return {
            "log_sigma": self.log_sigma,
            "peak_threshold": self.peak_threshold,
            "cluster_merge_iou": self.cluster_merge_iou,
            "cluster_min_peaks": self.cluster_min_peaks,
            "box_nms_iou": self.box_nms_iou,
            "score_threshold": self.score_threshold,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DetectorConfig":
        unknown = set(d) - set(cls().to_dict())
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown detector field")
        return cls(**d).validate()


def log_response(channel: np.ndarray, sigma: float) -> np.ndarray:
    """Scale-normalized LoG response; ~A for a matched Gaussian spot of
    amplitude A (2*sigma^2 normalization doubles the matched-filter half)."""
    return 2.0 * sigma * sigma * -ndimage.gaussian_laplace(channel.astype(np.float64), sigma)


def detect_blobs_log(crop, channel: str, config: DetectorConfig) -> list[SignalBox]:
    """8-neighborhood LoG maxima above the peak threshold, one box per peak.

    channel is 'HER2' or 'CEP17'; boxes get that channel's signal class and a
    score of min(1, response), clamped to the crop bounds.
    """
    plane = {"HER2": HER2_PLANE, "CEP17": CEP17_PLANE}.get(channel)
    if plane is None:
        raise ConfigError("channel", f"must be HER2 or CEP17, got {channel}")
    img = crop.image.planes[plane]
    resp = log_response(img, config.log_sigma)
    mx = ndimage.maximum_filter(resp, size=3, mode="constant")
    ys, xs = np.nonzero((resp >= config.peak_threshold) & (resp == mx))
    h, w = img.shape
    hw = config.box_half_width
    cls = SignalClass.HER2 if channel == "HER2" else SignalClass.CEP17
    boxes = []
    for x, y in zip(xs.tolist(), ys.tolist()):
        x0 = max(0.0, x - hw)
        y0 = max(0.0, y - hw)
        x1 = min(float(w), x + hw)
        y1 = min(float(h), y + hw)
        if x0 >= x1 or y0 >= y1:
            continue
        score = float(min(1.0, resp[y, x]))
        boxes.append(SignalBox(cls, (x0, y0, x1, y1), score))
    return boxes


def box_iou(a: tuple, b: tuple) -> float:
    """Standard rectangle intersection-over-union."""
    ix0, iy0 = max(a[0], b[0]), max(a[1], b[1])
    ix1, iy1 = min(a[2], b[2]), min(a[3], b[3])
    iw, ih = max(0.0, ix1 - ix0), max(0.0, iy1 - iy0)
    inter = iw * ih
    if inter == 0.0:
        return 0.0
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    return inter / (area_a + area_b - inter)


def merge_clusters(boxes: Sequence[SignalBox], config: DetectorConfig) -> list[SignalBox]:
    """Replace connected components (IoU > merge threshold) of >= N HER2 boxes
    by one HER2Cluster box: the union bbox, scored by the best member."""
    if any(b.cls is not SignalClass.HER2 for b in boxes):
        raise ValueError("merge_clusters expects HER2 boxes only")
    n = len(boxes)
    parent = list(range(n))

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(n):
        for j in range(i + 1, n):
            if box_iou(boxes[i].box, boxes[j].box) > config.cluster_merge_iou:
                parent[find(i)] = find(j)
    groups: dict[int, list[int]] = {}
    for i in range(n):
        groups.setdefault(find(i), []).append(i)

    out = []
    for members in groups.values():
        if len(members) >= config.cluster_min_peaks:
            bx = [boxes[i].box for i in members]
            union = (
                min(b[0] for b in bx),
                min(b[1] for b in bx),
                max(b[2] for b in bx),
                max(b[3] for b in bx),
            )
            score = max(boxes[i].score for i in members)
            out.append(SignalBox(SignalClass.HER2_CLUSTER, union, score))
        else:
            out.extend(boxes[i] for i in members)
    # deterministic order independent of union-find internals
    out.sort(key=lambda b: (b.box[1], b.box[0], b.cls.value))
    return out


def nms_boxes(boxes: Sequence[SignalBox], iou_threshold: float, per_class: bool = True) -> list[SignalBox]:
    """Greedy box NMS: descending score, ties by ascending (y0, x0, class);
    with per_class, boxes only suppress boxes of the same class."""
    order = sorted(
        range(len(boxes)),
        key=lambda i: (-boxes[i].score, boxes[i].box[1], boxes[i].box[0], boxes[i].cls.value),
    )
    kept: list[int] = []
    for i in order:
        ok = True
        for j in kept:
            if per_class and boxes[i].cls is not boxes[j].cls:
                continue
            if box_iou(boxes[i].box, boxes[j].box) > iou_threshold:
                ok = False
                break
        if ok:
            kept.append(i)
    return [boxes[i] for i in kept]


@dataclass
class AnchorGrid:
    """Cell stride in px plus per-cell anchor templates (w, h)."""

    stride: int
    anchors: tuple[tuple[float, float], ...] = ((8.0, 8.0), (16.0, 16.0))

    @property
    def n_anchors(self) -> int:
        return len(self.anchors)

    def centers(self, gh: int, gw: int) -> tuple[np.ndarray, np.ndarray]:
        cx = (np.arange(gw) + 0.5) * self.stride
        cy = (np.arange(gh) + 0.5) * self.stride
        return cx, cy


@dataclass
class HeadMaps:
    """Dense detection-head outputs: class logits [A*C, H, W] and box
    regression deltas [A*4, H, W] (tx, ty, tw, th per anchor)."""

    class_logits: np.ndarray
    box_deltas: np.ndarray

    def validate(self, grid: AnchorGrid) -> "HeadMaps":
        a = grid.n_anchors
        c = len(CLASS_ORDER)
        if self.class_logits.ndim != 3 or self.class_logits.shape[0] != a * c:
            raise FormatError(f"class_logits: expected ({a * c}, H, W), got {self.class_logits.shape}")
        if self.box_deltas.ndim != 3 or self.box_deltas.shape[0] != a * 4:
            raise FormatError(f"box_deltas: expected ({a * 4}, H, W), got {self.box_deltas.shape}")
        if self.class_logits.shape[1:] != self.box_deltas.shape[1:]:
            raise FormatError(
                f"box_deltas: grid {self.box_deltas.shape[1:]} != class grid {self.class_logits.shape[1:]}"
            )
        return self


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-x))


def decode_anchors(head: HeadMaps, grid: AnchorGrid, score_threshold: float) -> list[SignalBox]:
    """Standard anchor decoding: center += (tx*aw, ty*ah), size *= exp(tw, th);
    emits every (cell, anchor, class) whose sigmoid(logit) clears the threshold."""
    head.validate(grid)
    a = grid.n_anchors
    c = len(CLASS_ORDER)
    gh, gw = head.class_logits.shape[1:]
    cxs, cys = grid.centers(gh, gw)
    scores = _sigmoid(head.class_logits.astype(np.float64))
    out: list[SignalBox] = []
    for ai, (aw, ah) in enumerate(grid.anchors):
        tx = head.box_deltas[ai * 4 + 0].astype(np.float64)
        ty = head.box_deltas[ai * 4 + 1].astype(np.float64)
        tw = head.box_deltas[ai * 4 + 2].astype(np.float64)
        th = head.box_deltas[ai * 4 + 3].astype(np.float64)
        for ci, cls in enumerate(CLASS_ORDER):
            sc = scores[ai * c + ci]
            iy, ix = np.nonzero(sc >= score_threshold)
            for yy, xx in zip(iy.tolist(), ix.tolist()):
                cx = cxs[xx] + tx[yy, xx] * aw
                cy = cys[yy] + ty[yy, xx] * ah
                w = aw * np.exp(tw[yy, xx])
                h = ah * np.exp(th[yy, xx])
                out.append(
                    SignalBox(cls, (cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2), float(sc[yy, xx]))
                )
    return out


def encode_boxes(boxes: Sequence[SignalBox], grid: AnchorGrid, grid_h: int, grid_w: int) -> HeadMaps:
    """Inverse of decode_anchors: write each box into the cell containing its
    center using the best size-matched anchor. Raises on slot collisions."""
    a = grid.n_anchors
    c = len(CLASS_ORDER)
    logits = np.full((a * c, grid_h, grid_w), -40.0, dtype=np.float64)
    deltas = np.zeros((a * 4, grid_h, grid_w), dtype=np.float64)
    taken = np.zeros((a, grid_h, grid_w), dtype=bool)
    for b in boxes:
        x0, y0, x1, y1 = b.box
        cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
        w, h = x1 - x0, y1 - y0
        gx = int(cx // grid.stride)
        gy = int(cy // grid.stride)
        if not (0 <= gx < grid_w and 0 <= gy < grid_h):
            raise FormatError(f"box center ({cx}, {cy}) outside the {grid_h}x{grid_w} grid")
        # squared log-ratios: the L1 version ties exactly on a positive-measure
        # set (w beyond both anchor widths, h below both heights)
        ai = min(
            range(a),
            key=lambda i: np.log(w / grid.anchors[i][0]) ** 2 + np.log(h / grid.anchors[i][1]) ** 2,
        )
        if taken[ai, gy, gx]:
            raise FormatError(f"anchor slot collision at cell ({gy}, {gx}) anchor {ai}")
        taken[ai, gy, gx] = True
        aw, ah = grid.anchors[ai]
        acx = (gx + 0.5) * grid.stride
        acy = (gy + 0.5) * grid.stride
        deltas[ai * 4 + 0, gy, gx] = (cx - acx) / aw
        deltas[ai * 4 + 1, gy, gx] = (cy - acy) / ah
        deltas[ai * 4 + 2, gy, gx] = np.log(w / aw)
        deltas[ai * 4 + 3, gy, gx] = np.log(h / ah)
        ci = CLASS_ORDER.index(b.cls)
        s = min(max(b.score, 1e-6), 1.0 - 1e-6)
        logits[ai * c + ci, gy, gx] = np.log(s / (1.0 - s))
    return HeadMaps(logits, deltas)


def clamp_boxes(boxes: Sequence[SignalBox], width: int, height: int) -> list[SignalBox]:
    out = []
    for b in boxes:
        x0, y0, x1, y1 = b.box
        x0, y0 = max(0.0, x0), max(0.0, y0)
        x1, y1 = min(float(width), x1), min(float(height), y1)
        if x0 < x1 and y0 < y1:
            out.append(SignalBox(b.cls, (x0, y0, x1, y1), b.score))
    return out


def detect_signals(
    crop,
    config: DetectorConfig,
    head: Optional[HeadMaps] = None,
    grid: Optional[AnchorGrid] = None,
) -> list[SignalBox]:
    """Reference route: LoG on both channels -> cluster merge -> per-class NMS.
    External route (head + grid given): decode_anchors -> per-class NMS."""
    if head is not None:
        if grid is None:
            raise ConfigError("grid", "external head maps need an AnchorGrid")
        raw = decode_anchors(head, grid, config.score_threshold)
    else:
        her2 = detect_blobs_log(crop, "HER2", config)
        cep17 = detect_blobs_log(crop, "CEP17", config)
        raw = merge_clusters(her2, config) + cep17
    raw = [b for b in raw if b.score >= config.score_threshold]
    kept = nms_boxes(raw, config.box_nms_iou, per_class=True)
    return clamp_boxes(kept, crop.image.width, crop.image.height)
