"""Star-convex polygons and rasterized polygon geometry.

Coordinate convention: x = column, y = row, y grows downward. Ray k of an
n-ray star polygon points at angle theta_k = 2*pi*k/n measured from +x
toward +y, so vertex_k = center + d_k * (cos theta_k, sin theta_k).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import DegeneratePolygonError


@dataclass
class StarPolygon:
    """Center plus n radial boundary distances; the NMS currency.

    Invariants: n >= 3 rays, all distances >= 0, at least 3 strictly
    positive for a non-degenerate polygon, score in [0, 1].
    """

    center: tuple[float, float]
    distances: np.ndarray
    score: float = 1.0

    def __post_init__(self):
        self.distances = np.asarray(self.distances, dtype=np.float64)
        if self.distances.ndim != 1 or self.distances.shape[0] < 3:
            raise DegeneratePolygonError(f"need >= 3 rays, got shape {self.distances.shape}")
        if np.any(self.distances < 0):
            raise DegeneratePolygonError("negative radial distance")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")

    @property
    def n_rays(self) -> int:
        return int(self.distances.shape[0])

    def is_degenerate(self) -> bool:
        return int(np.count_nonzero(self.distances > 0)) < 3

    def vertices(self) -> np.ndarray:
        """(n, 2) float array of (x, y) vertices."""
        return polygon_from_rays(self.center, self.distances)

    def bbox(self) -> tuple[float, float, float, float]:
        v = self.vertices()
        return float(v[:, 0].min()), float(v[:, 1].min()), float(v[:, 0].max()), float(v[:, 1].max())

    def int_bbox(self) -> tuple[int, int, int, int]:
        """Integer pixel window (x0, y0, x1, y1), inclusive, covering the polygon."""
        x0, y0, x1, y1 = self.bbox()
        return int(np.floor(x0)), int(np.floor(y0)), int(np.ceil(x1)), int(np.ceil(y1))

    def translated(self, dx: float, dy: float) -> "StarPolygon":
        return StarPolygon((self.center[0] + dx, self.center[1] + dy), self.distances.copy(), self.score)

    def scaled(self, factor: float) -> "StarPolygon":
        return StarPolygon(
            (self.center[0] * factor, self.center[1] * factor), self.distances * factor, self.score
        )


def polygon_from_rays(center: tuple[float, float], distances) -> np.ndarray:
    """Vertex list of the star polygon; raises on < 3 positive distances."""
    d = np.asarray(distances, dtype=np.float64)
    if d.shape[0] < 3 or np.count_nonzero(d > 0) < 3:
        raise DegeneratePolygonError("fewer than 3 strictly positive distances")
    vx, vy = _kernels.star_vertices(float(center[0]), float(center[1]), d)
    return np.stack([vx, vy], axis=1)


def polygon_mask(poly: StarPolygon, x0: int, y0: int, w: int, h: int, supersample: int = 1) -> np.ndarray:
    """Boolean subcell mask of the polygon over the pixel window starting at
    (x0, y0) with w x h pixels; see _kernels for the lattice convention."""
    v = poly.vertices()
    out = np.zeros((h * supersample, w * supersample), dtype=bool)
    _kernels.fill_polygon_mask(v[:, 0], v[:, 1], x0, y0, w, h, supersample, out)
    return out


def polygon_area_lattice(poly: StarPolygon, supersample: int = 4) -> float:
    """Rasterized area in px^2 at the given supersampling."""
    x0, y0, x1, y1 = poly.int_bbox()
    m = polygon_mask(poly, x0, y0, x1 - x0 + 1, y1 - y0 + 1, supersample)
    return float(np.count_nonzero(m)) / (supersample * supersample)


def polygon_iou(a: StarPolygon, b: StarPolygon, supersample: int = 4) -> float:
    """IoU by rasterizing both polygons onto a shared lattice window covering
    the union of their bounding boxes. Symmetric; disjoint bboxes short-circuit
    to 0.0 without rasterization."""
    ax0, ay0, ax1, ay1 = a.int_bbox()
    bx0, by0, bx1, by1 = b.int_bbox()
    if ax0 > bx1 or bx0 > ax1 or ay0 > by1 or by0 > ay1:
        return 0.0
    x0, y0 = min(ax0, bx0), min(ay0, by0)
    x1, y1 = max(ax1, bx1), max(ay1, by1)
    w, h = x1 - x0 + 1, y1 - y0 + 1
    ma = polygon_mask(a, x0, y0, w, h, supersample)
    mb = polygon_mask(b, x0, y0, w, h, supersample)
    inter = int(np.count_nonzero(ma & mb))
    union = int(np.count_nonzero(ma)) + int(np.count_nonzero(mb)) - inter
    if union == 0:
        return 0.0
    return inter / union


def points_in_polygon(poly: StarPolygon, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Vectorized even-odd containment test for arbitrary points."""
    v = poly.vertices()
    x1 = v[:, 0]
    y1 = v[:, 1]
    x2 = np.roll(x1, -1)
    y2 = np.roll(y1, -1)
    px = np.asarray(xs, dtype=np.float64)[:, None]
    py = np.asarray(ys, dtype=np.float64)[:, None]
    crosses = ((y1 <= py) & (py < y2)) | ((y2 <= py) & (py < y1))
    with np.errstate(divide="ignore", invalid="ignore"):
        xc = x1 + (py - y1) * (x2 - x1) / (y2 - y1)
    hits = crosses & (xc > px)
    return (hits.sum(axis=1) % 2).astype(bool)
