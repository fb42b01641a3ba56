"""Star-convex nucleus segmentation from dense prediction maps.

Reconstruction follows the dense-map formulation: every above-threshold pixel
proposes a star polygon whose radial distances are read from the distance
grids, and greedy polygon NMS keeps a non-overlapping subset. render_maps is
the exact inverse used for oracle round trips, and reference_maps_from_image
is the algorithmic stand-in for a trained detector on real pixels.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from . import _kernels
from .errors import ConfigError, OutOfBoundsError
from .geometry import StarPolygon, polygon_mask
from .image import DAPI, MultiChannelImage


@dataclass
class ProbDistMaps:
    """Object probability [H, W] in [0, 1] plus per-ray boundary distances
    [n_rays, H, W] in px (0 outside objects)."""

    prob: np.ndarray
    dist: np.ndarray

    def __post_init__(self):
        self.prob = np.asarray(self.prob, dtype=np.float32)
        self.dist = np.asarray(self.dist, dtype=np.float32)
        if self.prob.ndim != 2 or self.dist.ndim != 3:
            raise ConfigError("maps", f"bad ranks prob={self.prob.ndim} dist={self.dist.ndim}")
        if self.dist.shape[1:] != self.prob.shape:
            raise ConfigError("maps", f"dims differ: {self.dist.shape[1:]} vs {self.prob.shape}")
        if float(self.prob.min()) < 0 or float(self.prob.max()) > 1:
            raise ConfigError("prob", "values outside [0, 1]")
        if float(self.dist.min()) < 0:
            raise ConfigError("dist", "negative distance")

    @property
    def n_rays(self) -> int:
        return int(self.dist.shape[0])


@dataclass
class SegConfig:
    prob_threshold: float = 0.5
    nms_iou: float = 0.45
    supersample: int = 4
    candidate_cap: int = 100_000

    def validate(self) -> "SegConfig":
        if not 0.0 < self.prob_threshold < 1.0:
            raise ConfigError("prob_threshold", "must be in (0, 1)")
        if not 0.0 < self.nms_iou < 1.0:
            raise ConfigError("nms_iou", "must be in (0, 1)")
        if self.supersample < 1:
            raise ConfigError("supersample", "must be >= 1")
        if self.candidate_cap < 1:
            raise ConfigError("candidate_cap", "must be >= 1")
        return self

    def to_dict(self) -> dict:
        return {
            "prob_threshold": self.prob_threshold,
            "nms_iou": self.nms_iou,
            "supersample": self.supersample,
            "candidate_cap": self.candidate_cap,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SegConfig":
        unknown = set(d) - set(cls().to_dict())
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown segmentation field")
        return cls(**d).validate()


def render_maps(polygons: Sequence[StarPolygon], dims: tuple[int, int], n_rays: int = 32) -> ProbDistMaps:
    """Ground-truth map renderer. prob is 1 at pixels whose center lies inside
    any polygon; distance grids hold the exact ray-to-boundary distance of the
    owning polygon (earlier polygons win overlaps)."""
    width, height = dims
    if width < 1 or height < 1:
        raise ConfigError("dims", f"must be positive, got {dims}")
    prob = np.zeros((height, width), dtype=np.float32)
    dist = np.zeros((n_rays, height, width), dtype=np.float32)
    owner = np.full((height, width), -1, dtype=np.int64)
    for idx, poly in enumerate(polygons):
        if poly.is_degenerate():
            raise ConfigError("polygons", f"polygon {idx} is degenerate")
        x0, y0, x1, y1 = poly.int_bbox()
        x0c, y0c = max(x0, 0), max(y0, 0)
        x1c, y1c = min(x1, width - 1), min(y1, height - 1)
        if x0c > x1c or y0c > y1c:
            continue
        m = polygon_mask(poly, x0c, y0c, x1c - x0c + 1, y1c - y0c + 1, 1)
        yy, xx = np.nonzero(m)
        xx = xx + x0c
        yy = yy + y0c
        free = owner[yy, xx] < 0
        xx, yy = xx[free], yy[free]
        if xx.size == 0:
            continue
        owner[yy, xx] = idx
        prob[yy, xx] = 1.0
        v = poly.vertices()
        d = _kernels.ray_distances_from_points(
            xx.astype(np.float64), yy.astype(np.float64), v[:, 0], v[:, 1], n_rays
        )
        dist[:, yy, xx] = d.T.astype(np.float32)
    return ProbDistMaps(prob, dist)


def candidates_from_maps(maps: ProbDistMaps, prob_threshold: float, candidate_cap: int = 100_000) -> list[StarPolygon]:
    """One scored candidate per above-threshold pixel, distances read from the
    grids; capped at candidate_cap by descending score (row-major tie order)."""
    ys, xs = np.nonzero(maps.prob >= prob_threshold)
    if xs.size == 0:
        return []
    scores = maps.prob[ys, xs].astype(np.float64)
    if xs.size > candidate_cap:
        order = np.lexsort((xs, ys, -scores))[:candidate_cap]
        xs, ys, scores = xs[order], ys[order], scores[order]
    dists = maps.dist[:, ys, xs].T.astype(np.float64)
    out = []
    for x, y, s, d in zip(xs.tolist(), ys.tolist(), scores.tolist(), dists):
        out.append(StarPolygon((float(x), float(y)), d, min(1.0, s)))
    return out


def nms_polygons(candidates: Sequence[StarPolygon], iou_threshold: float, supersample: int = 4) -> list[StarPolygon]:
    """Greedy polygon NMS: descending score, ties by ascending (y, x) of the
    center (row-major); keep iff IoU with every kept polygon <= threshold."""
    n = len(candidates)
    if n == 0:
        return []
    usable = [i for i in range(n) if not candidates[i].is_degenerate()]
    if not usable:
        return []
    cx = np.array([candidates[i].center[0] for i in usable], dtype=np.float64)
    cy = np.array([candidates[i].center[1] for i in usable], dtype=np.float64)
    scores = np.array([candidates[i].score for i in usable], dtype=np.float64)
    order = np.lexsort((cx, cy, -scores)).astype(np.int64)
    nr = candidates[usable[0]].n_rays
    if all(candidates[i].n_rays == nr for i in usable):
        dists = np.stack([candidates[i].distances for i in usable])
        keep = _kernels.nms_star_polygons(cx, cy, dists, order, float(iou_threshold), int(supersample))
        kept_sorted = [i for i in order.tolist() if keep[i]]
        return [candidates[usable[i]] for i in kept_sorted]
    # mixed ray counts: plain greedy over pairwise IoU (rare, small inputs)
    from .geometry import polygon_iou

    kept: list[int] = []
    for i in order.tolist():
        poly = candidates[usable[i]]
        if all(polygon_iou(poly, candidates[usable[j]], supersample) <= iou_threshold for j in kept):
            kept.append(i)
    return [candidates[usable[i]] for i in kept]


def segment(maps: ProbDistMaps, config: SegConfig) -> list[StarPolygon]:
    """candidates_from_maps followed by nms_polygons; deterministic.

    Runs array-native (identical candidate/tie ordering and the same interval
    arithmetic as nms_polygons) to avoid building one Python object per
    above-threshold pixel on dense maps.
    """
    config.validate()
    ys, xs = np.nonzero(maps.prob >= config.prob_threshold)
    if xs.size == 0:
        return []
    scores = maps.prob[ys, xs].astype(np.float64)
    if xs.size > config.candidate_cap:
        order = np.lexsort((xs, ys, -scores))[: config.candidate_cap]
        xs, ys, scores = xs[order], ys[order], scores[order]
    cx = xs.astype(np.float64)
    cy = ys.astype(np.float64)
    dists = maps.dist[:, ys, xs].T.astype(np.float64)
    nondeg = (dists > 0).sum(axis=1) >= 3
    cx, cy, scores, dists = cx[nondeg], cy[nondeg], scores[nondeg], dists[nondeg]
    if cx.size == 0:
        return []
    order = np.lexsort((cx, cy, -scores)).astype(np.int64)
    keep = _kernels.nms_star_polygons(cx, cy, np.ascontiguousarray(dists), order, float(config.nms_iou), int(config.supersample))
    out = []
    for i in order.tolist():
        if keep[i]:
            out.append(StarPolygon((cx[i], cy[i]), dists[i], min(1.0, scores[i])))
    return out


@dataclass
class NucleusCrop:
    """Masked sub-image of one nucleus plus its slide-coordinate offset."""

    image: MultiChannelImage
    offset: tuple[int, int]  # (x0, y0) of the crop in slide coords
    mask: np.ndarray  # (H, W) bool, True inside the polygon

    @property
    def dapi_coverage(self) -> float:
        """Fraction of in-polygon pixels with appreciable DAPI signal."""
        total = int(np.count_nonzero(self.mask))
        if total == 0:
            return 0.0
        lit = int(np.count_nonzero(self.image.planes[DAPI][self.mask] > 0.1))
        return lit / total


def extract_crop(image: MultiChannelImage, polygon: StarPolygon, margin_px: int = 10) -> NucleusCrop:
    """Crop the polygon bbox expanded by margin, clamped to the image, with
    all channels zeroed outside the polygon. Offset maps crop to slide coords."""
    x0, y0, x1, y1 = polygon.int_bbox()
    if x1 < 0 or y1 < 0 or x0 >= image.width or y0 >= image.height:
        raise OutOfBoundsError(f"polygon bbox {(x0, y0, x1, y1)} outside image")
    cx0 = max(0, x0 - margin_px)
    cy0 = max(0, y0 - margin_px)
    cx1 = min(image.width - 1, x1 + margin_px)
    cy1 = min(image.height - 1, y1 + margin_px)
    w = cx1 - cx0 + 1
    h = cy1 - cy0 + 1
    local = polygon.translated(-cx0, -cy0)
    mask = polygon_mask(local, 0, 0, w, h, 1)
    planes = image.planes[:, cy0 : cy1 + 1, cx0 : cx1 + 1].copy()
    planes[:, ~mask] = 0.0
    return NucleusCrop(MultiChannelImage(planes), (cx0, cy0), mask)


@dataclass
class ReferenceSegConfig:
    """Algorithmic map builder standing in for the trained nucleus detector."""

    smooth_sigma: float = 2.0
    dapi_threshold: float = 0.25
    min_area_px: int = 60
    n_rays: int = 32

    def to_dict(self) -> dict:
        return {
            "smooth_sigma": self.smooth_sigma,
            "dapi_threshold": self.dapi_threshold,
            "min_area_px": self.min_area_px,
            "n_rays": self.n_rays,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ReferenceSegConfig":
        unknown = set(d) - set(cls().to_dict())
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown reference segmentation field")
        return cls(**d)


def reference_maps_from_image(image: MultiChannelImage, config: Optional[ReferenceSegConfig] = None) -> ProbDistMaps:
    """Threshold the smoothed DAPI channel, label connected components, and
    ray-march per-pixel boundary distances inside each component."""
    cfg = config or ReferenceSegConfig()
    smoothed = ndimage.gaussian_filter(image.planes[DAPI].astype(np.float64), cfg.smooth_sigma)
    fg = smoothed > cfg.dapi_threshold
    labels, n = ndimage.label(fg)
    if n and cfg.min_area_px > 1:
        counts = np.bincount(labels.ravel())
        small = np.nonzero(counts < cfg.min_area_px)[0]
        if small.size:
            fg &= ~np.isin(labels, small[small > 0])
            labels, n = ndimage.label(fg)
    prob = fg.astype(np.float32)
    dist = np.zeros((cfg.n_rays, *fg.shape), dtype=np.float32)
    ys, xs = np.nonzero(fg)
    if xs.size:
        d = _kernels.mask_ray_march(
            labels.astype(np.int64),
            xs.astype(np.float64),
            ys.astype(np.float64),
            labels[ys, xs].astype(np.int64),
            cfg.n_rays,
            0.5,
        )
        dist[:, ys, xs] = d.T.astype(np.float32)
    return ProbDistMaps(prob, dist)
