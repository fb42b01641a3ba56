"""Synthetic FISH slide generator with exact ground truth.

Slides are built in the pipeline's own representations (star polygons, signal
boxes, copy counts) so round-trip tests are exact. All randomness flows from
one numpy PCG64 generator seeded with the run seed, which makes outputs
reproducible for a fixed (config, seed).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .errors import ConfigError, PlacementError
from .geometry import StarPolygon, points_in_polygon, polygon_mask
from .image import CEP17, DAPI, HER2, AugmentSpec, MultiChannelImage, augment  # noqa: F401 (augment re-exported)
from .scoring import GradeEntry, NucleusClass, ScoringConfig, SlideStatus, Status, grade_nucleus, slide_status
from .signal_detection import SignalBox, SignalClass

CLUSTER_PITCH = 5.0  # neighbor spacing of confluent cluster spots, px
SPOT_MIN_SEPARATION = 11.0  # centers of distinct single signals, px


@dataclass
class SimConfig:
    width: int = 1600
    height: int = 1200
    nucleus_count: tuple[int, int] = (20, 30)
    nucleus_radius: tuple[float, float] = (24.0, 40.0)
    n_rays: int = 32
    shape_jitter: float = 0.22
    class_mix: dict = field(
        default_factory=lambda: {"Normal": 0.55, "LowAmp": 0.2, "HighAmp": 0.15, "Artifact": 0.1}
    )
    psf_sigma: float = 1.75
    noise_sigma: float = 0.04
    smear_density: float = 2.0  # expected smears per megapixel
    allow_overlap: bool = False
    seed: int = 0

    def validate(self) -> "SimConfig":
        if self.width < 1 or self.height < 1:
            raise ConfigError("width/height", "canvas dims must be positive")
        lo, hi = self.nucleus_count
        if lo < 0 or hi < lo:
            raise ConfigError("nucleus_count", f"need 0 <= lo <= hi, got {self.nucleus_count}")
        rlo, rhi = self.nucleus_radius
        if rlo <= 0 or rhi < rlo:
            raise ConfigError("nucleus_radius", f"need 0 < lo <= hi, got {self.nucleus_radius}")
        if self.n_rays < 3:
            raise ConfigError("n_rays", "must be >= 3")
        if not 0.0 <= self.shape_jitter < 1.0:
            raise ConfigError("shape_jitter", "must be in [0, 1)")
        keys = {"Normal", "LowAmp", "HighAmp", "Artifact"}
        if set(self.class_mix) != keys:
            raise ConfigError("class_mix", f"need exactly keys {sorted(keys)}")
        total = sum(self.class_mix.values())
        if abs(total - 1.0) > 1e-9:
            raise ConfigError("class_mix", f"fractions sum to {total}, not 1")
        if any(v < 0 for v in self.class_mix.values()):
            raise ConfigError("class_mix", "negative fraction")
        if self.psf_sigma <= 0:
            raise ConfigError("psf_sigma", "must be > 0")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma", "must be >= 0")
        if self.smear_density < 0:
            raise ConfigError("smear_density", "must be >= 0")
        return self

    def to_dict(self) -> dict:
        return {
            "width": self.width,
            "height": self.height,
            "nucleus_count": list(self.nucleus_count),
            "nucleus_radius": list(self.nucleus_radius),
            "n_rays": self.n_rays,
            "shape_jitter": self.shape_jitter,
            "class_mix": dict(self.class_mix),
            "psf_sigma": self.psf_sigma,
            "noise_sigma": self.noise_sigma,
            "smear_density": self.smear_density,
            "allow_overlap": self.allow_overlap,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        unknown = set(d) - set(cls().to_dict())
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown simulator field")
        d = dict(d)
        for key in ("nucleus_count", "nucleus_radius"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d).validate()

    @classmethod
    def noiseless(cls, **kw) -> "SimConfig":
        """Pure-signal variant: no noise, no artifacts of either kind."""
        base = {
            "noise_sigma": 0.0,
            "smear_density": 0.0,
            "class_mix": {"Normal": 0.6, "LowAmp": 0.25, "HighAmp": 0.15, "Artifact": 0.0},
        }
        base.update(kw)
        return cls(**base).validate()


@dataclass
class GtSignal:
    """One ground-truth signal: box + class + true copies + render payload."""

    cls: SignalClass
    box: tuple[float, float, float, float]
    true_copies: int
    spots: list  # [(x, y, amplitude)] in slide coords

    def area(self) -> float:
        x0, y0, x1, y1 = self.box
        return (x1 - x0) * (y1 - y0)

    def to_signal_box(self) -> SignalBox:
        return SignalBox(self.cls, self.box, 1.0)


@dataclass
class GtNucleus:
    polygon: StarPolygon
    cls: NucleusClass
    signals: list  # list[GtSignal]
    her2_copies: int
    cep17_copies: int
    fill: float = 0.6  # DAPI fill intensity (render detail)


@dataclass
class GroundTruth:
    nuclei: list
    status: SlideStatus
    scoring: ScoringConfig

    def polygons(self) -> list[StarPolygon]:
        return [n.polygon for n in self.nuclei]

    def to_dict(self) -> dict:
        return {
            "nuclei": [
                {
                    "polygon": {
                        "center": [n.polygon.center[0], n.polygon.center[1]],
                        "distances": n.polygon.distances.tolist(),
                        "score": n.polygon.score,
                    },
                    "class": n.cls.value,
                    "her2_copies": n.her2_copies,
                    "cep17_copies": n.cep17_copies,
                    "signals": [
                        {"class": s.cls.value, "box": list(s.box), "true_copies": s.true_copies}
                        for s in n.signals
                    ],
                }
                for n in self.nuclei
            ],
            "status": self.status.to_dict(),
            "scoring": self.scoring.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GroundTruth":
        nuclei = []
        for nd in d["nuclei"]:
            poly = StarPolygon(tuple(nd["polygon"]["center"]), np.array(nd["polygon"]["distances"]), nd["polygon"]["score"])
            signals = [
                GtSignal(SignalClass(sd["class"]), tuple(sd["box"]), sd["true_copies"], [])
                for sd in nd["signals"]
            ]
            nuclei.append(GtNucleus(poly, NucleusClass(nd["class"]), signals, nd["her2_copies"], nd["cep17_copies"]))
        scoring = ScoringConfig.from_dict(d["scoring"])
        st = d["status"]
        status = SlideStatus(Status(st["status"]), st["evaluable_count"], st["mean_ratio"], st["mean_her2_copies"])
        return cls(nuclei, status, scoring)

    def write_json(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=1)

    @classmethod
    def read_json(cls, path: str) -> "GroundTruth":
        with open(path, encoding="utf-8") as f:
            return cls.from_dict(json.load(f))


def _point_with_clearance(poly: StarPolygon, x: float, y: float, clearance: float) -> bool:
    """Point plus an 8-probe ring of the given radius all inside the polygon."""
    probes_x = [x] + [x + clearance * np.cos(a) for a in np.linspace(0, 2 * np.pi, 8, endpoint=False)]
    probes_y = [y] + [y + clearance * np.sin(a) for a in np.linspace(0, 2 * np.pi, 8, endpoint=False)]
    return bool(points_in_polygon(poly, np.array(probes_x), np.array(probes_y)).all())


def _sample_point(
    poly: StarPolygon,
    edge_clearance: float,
    site_radius: float,
    rng: np.random.Generator,
    taken: list,
    tries: int = 300,
):
    """Rejection-sample a point inside the polygon keeping edge_clearance from
    the boundary and site_radius + taken-site radius between sites. None if it
    will not fit."""
    x0, y0, x1, y1 = poly.bbox()
    for _ in range(tries):
        x = rng.uniform(x0, x1)
        y = rng.uniform(y0, y1)
        if not _point_with_clearance(poly, x, y, edge_clearance):
            continue
        ok = True
        for tx, ty, tr in taken:
            need = tr + site_radius
            if (x - tx) ** 2 + (y - ty) ** 2 < need * need:
                ok = False
                break
        if ok:
            return x, y
    return None


def _cluster_layout(k: int, pitch: float, rot: float) -> list[tuple[float, float]]:
    """Confluent-spot layout: a single ring for k <= 9 (most compact at the
    required neighbor pitch), a center-plus-rings hex spiral above."""
    if k <= 9:
        r = pitch / (2 * np.sin(np.pi / k))
        pts = [(r * np.cos(2 * np.pi * i / k), r * np.sin(2 * np.pi * i / k)) for i in range(k)]
    else:
        pts = [(0.0, 0.0)]
        ring = 1
        while len(pts) < k:
            m = 6 * ring
            for i in range(m):
                ang = 2 * np.pi * i / m
                pts.append((ring * pitch * np.cos(ang), ring * pitch * np.sin(ang)))
            ring += 1
        pts = pts[:k]
    c, s = np.cos(rot), np.sin(rot)
    return [(x * c - y * s, x * s + y * c) for x, y in pts]


def _cluster_extent(k: int, pitch: float) -> float:
    if k <= 9:
        return pitch / (2 * np.sin(np.pi / k))
    rings = 0
    have = 1
    while have < k:
        rings += 1
        have += 6 * rings
    return rings * pitch


def place_signals(
    polygon: StarPolygon,
    nucleus_class: NucleusClass,
    rng: np.random.Generator,
    psf_sigma: float = 1.75,
) -> list[GtSignal]:
    """Ground-truth signal layout for one gradable nucleus.

    Normal: 1-2 HER2 and 1-2 CEP17 singles with HER2/CEP17 < 2.
    LowAmp: 4-5 HER2 singles over 1-2 CEP17 (ratio >= 2, below high-amp copies).
    HighAmp: >= 6 HER2 singles, or one confluent cluster (6-12 copies) plus two
    singles; either way 1-2 CEP17. Raises PlacementError when the polygon
    cannot host the layout without violating separations.
    """
    if not nucleus_class.gradable:
        raise ConfigError("nucleus_class", f"cannot place signals for {nucleus_class.value}")

    want_cluster = False
    if nucleus_class is NucleusClass.NORMAL:
        her2, cep17 = [(1, 1), (1, 2), (2, 2)][rng.integers(0, 3)]
    elif nucleus_class is NucleusClass.LOW_AMP:
        her2 = int(rng.integers(4, 6))
        cep17 = int(rng.integers(1, 3))
    else:
        cep17 = int(rng.integers(1, 3))
        her2 = int(rng.integers(6, 10))
        # a cluster needs less floor space than 6+ separated singles
        area = polygon_area_estimate(polygon)
        singles_space = (her2 + cep17 + 1) * SPOT_MIN_SEPARATION**2
        want_cluster = rng.uniform() < 0.5 or area < singles_space

    last_err = None
    for attempt in range(8):
        # retries shrink the cluster so tight polygons converge to a layout
        k_cap = 12 if attempt < 2 else (8 if attempt < 4 else 6)
        try:
            if nucleus_class is NucleusClass.HIGH_AMP and (want_cluster or attempt >= 2):
                return _layout_signals(polygon, None, 2, cep17, rng, psf_sigma, cluster=True, k_cap=k_cap)
            return _layout_signals(polygon, her2, 0, cep17, rng, psf_sigma, cluster=False, k_cap=k_cap)
        except PlacementError as err:
            last_err = err
    raise last_err


def _layout_signals(polygon, her2, extra_her2, cep17, rng, psf_sigma, cluster, k_cap=12):
    """One placement attempt; raises PlacementError when a spot will not fit."""
    sep_r = SPOT_MIN_SEPARATION / 2.0
    edge = 2 * psf_sigma + 1.0
    taken: list[tuple[float, float, float]] = []
    signals: list[GtSignal] = []

    def add_single(cls: SignalClass) -> None:
        pos = _sample_point(polygon, edge, sep_r, rng, taken)
        if pos is None:
            raise PlacementError(f"polygon too small for another {cls.value} single")
        x, y = pos
        amp = float(rng.uniform(0.55, 0.95))
        box = (x - 2 * psf_sigma, y - 2 * psf_sigma, x + 2 * psf_sigma, y + 2 * psf_sigma)
        signals.append(GtSignal(cls, box, 1, [(x, y, amp)]))
        taken.append((x, y, sep_r))

    if cluster:
        k = min(int(rng.integers(6, 13)), k_cap)
        extent = _cluster_extent(k, CLUSTER_PITCH)
        pos = _sample_point(polygon, extent + edge, extent + edge, rng, taken)
        if pos is None:
            k = 6
            extent = _cluster_extent(k, CLUSTER_PITCH)
            pos = _sample_point(polygon, extent + edge, extent + edge, rng, taken)
            if pos is None:
                raise PlacementError("polygon too small for a signal cluster")
        cx, cy = pos
        amp = float(rng.uniform(0.5, 0.75))
        layout = _cluster_layout(k, CLUSTER_PITCH, float(rng.uniform(0, 2 * np.pi)))
        spots = [(cx + dx, cy + dy, amp) for dx, dy in layout]
        xs = [p[0] for p in spots]
        ys = [p[1] for p in spots]
        box = (
            min(xs) - 2 * psf_sigma,
            min(ys) - 2 * psf_sigma,
            max(xs) + 2 * psf_sigma,
            max(ys) + 2 * psf_sigma,
        )
        signals.append(GtSignal(SignalClass.HER2_CLUSTER, box, k, spots))
        taken.append((cx, cy, extent + 2 * psf_sigma + 1.5))
        for _ in range(extra_her2):
            add_single(SignalClass.HER2)
    else:
        for _ in range(her2):
            add_single(SignalClass.HER2)
    for _ in range(cep17):
        add_single(SignalClass.CEP17)
    return signals


def polygon_area_estimate(poly: StarPolygon) -> float:
    """Shoelace area of the star polygon (exact for the vertex polygon)."""
    v = poly.vertices()
    x = v[:, 0]
    y = v[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def _make_polygon(cx: float, cy: float, radius: float, n_rays: int, jitter: float, rng: np.random.Generator) -> StarPolygon:
    """Star shape: per-ray uniform jitter smoothed circularly for mild lobes."""
    raw = rng.uniform(-1.0, 1.0, size=n_rays)
    kernel = np.array([1.0, 2.0, 3.0, 2.0, 1.0])
    kernel /= kernel.sum()
    smooth = np.convolve(np.concatenate([raw[-2:], raw, raw[:2]]), kernel, mode="valid")
    d = radius * (1.0 + jitter * smooth)
    d = np.maximum(d, 0.35 * radius)
    return StarPolygon((cx, cy), d, 1.0)


def _place_nuclei(config: SimConfig, rng: np.random.Generator) -> list[StarPolygon]:
    lo, hi = config.nucleus_count
    n = int(rng.integers(lo, hi + 1)) if hi > lo else lo
    polys: list[StarPolygon] = []
    radii: list[float] = []
    attempts = 0
    while len(polys) < n:
        attempts += 1
        if attempts > 400 * max(n, 1):
            raise PlacementError(
                f"could not place {n} nuclei of radius {config.nucleus_radius} on "
                f"{config.width}x{config.height} canvas"
            )
        r = float(rng.uniform(*config.nucleus_radius))
        margin = r * (1 + config.shape_jitter) + 4
        if 2 * margin >= min(config.width, config.height):
            raise PlacementError("nucleus radius too large for the canvas")
        cx = float(rng.uniform(margin, config.width - margin))
        cy = float(rng.uniform(margin, config.height - margin))
        if not config.allow_overlap:
            jr = r * (1 + config.shape_jitter)
            clash = False
            for p, pr in zip(polys, radii):
                need = jr + pr + 6.0
                if (cx - p.center[0]) ** 2 + (cy - p.center[1]) ** 2 < need * need:
                    clash = True
                    break
            if clash:
                continue
        polys.append(_make_polygon(cx, cy, r, config.n_rays, config.shape_jitter, rng))
        radii.append(r * (1 + config.shape_jitter))
    return polys


def _render_spots(plane: np.ndarray, spots: Sequence[tuple[float, float, float]], sigma: float) -> None:
    h, w = plane.shape
    reach = int(np.ceil(4 * sigma))
    for x, y, amp in spots:
        x0 = max(0, int(np.floor(x)) - reach)
        x1 = min(w, int(np.ceil(x)) + reach + 1)
        y0 = max(0, int(np.floor(y)) - reach)
        y1 = min(h, int(np.ceil(y)) + reach + 1)
        if x0 >= x1 or y0 >= y1:
            continue
        xs = np.arange(x0, x1, dtype=np.float64)
        ys = np.arange(y0, y1, dtype=np.float64)
        g = amp * np.exp(-((xs[None, :] - x) ** 2 + (ys[:, None] - y) ** 2) / (2 * sigma * sigma))
        plane[y0:y1, x0:x1] += g


def _render_smears(planes: np.ndarray, config: SimConfig, rng: np.random.Generator) -> None:
    """Out-of-channel streaks: bright elongated smudges in HER2/CEP17 only."""
    count = int(rng.poisson(config.smear_density * config.width * config.height / 1e6))
    h, w = planes.shape[1:]
    for _ in range(count):
        plane = int(rng.integers(0, 2))  # HER2 or CEP17
        x = rng.uniform(0, w)
        y = rng.uniform(0, h)
        length = rng.uniform(15, 60)
        thick = rng.uniform(1.5, 4.0)
        ang = rng.uniform(0, np.pi)
        amp = rng.uniform(0.5, 0.95)
        dx, dy = np.cos(ang), np.sin(ang)
        x0 = max(0, int(x - length))
        x1 = min(w, int(x + length) + 1)
        y0 = max(0, int(y - length))
        y1 = min(h, int(y + length) + 1)
        if x0 >= x1 or y0 >= y1:
            continue
        xs = np.arange(x0, x1, dtype=np.float64)[None, :] - x
        ys = np.arange(y0, y1, dtype=np.float64)[:, None] - y
        t = np.clip(xs * dx + ys * dy, -length / 2, length / 2)
        d2 = (xs - t * dx) ** 2 + (ys - t * dy) ** 2
        planes[plane, y0:y1, x0:x1] += amp * np.exp(-d2 / (2 * thick * thick))


def simulate_slide(config: SimConfig, seed: Optional[int] = None) -> tuple[MultiChannelImage, GroundTruth]:
    """Render one synthetic slide and its exact ground truth.

    Deterministic for fixed (config, seed); the explicit seed argument
    overrides config.seed when given.
    """
    config.validate()
    rng = np.random.default_rng(np.random.PCG64(config.seed if seed is None else seed))
    scoring = ScoringConfig()
    polys = _place_nuclei(config, rng)

    names = ["Normal", "LowAmp", "HighAmp", "Artifact"]
    probs = np.array([config.class_mix[k] for k in names], dtype=np.float64)
    probs = probs / probs.sum()
    cls_map = {
        "Normal": NucleusClass.NORMAL,
        "LowAmp": NucleusClass.LOW_AMP,
        "HighAmp": NucleusClass.HIGH_AMP,
        "Artifact": NucleusClass.ARTIFACT,
    }

    planes = np.zeros((3, config.height, config.width), dtype=np.float64)
    nuclei: list[GtNucleus] = []
    for poly in polys:
        name = names[int(rng.choice(len(names), p=probs))]
        cls = cls_map[name]
        x0, y0, x1, y1 = poly.int_bbox()
        x0c, y0c = max(x0, 0), max(y0, 0)
        x1c, y1c = min(x1, config.width - 1), min(y1, config.height - 1)
        local = poly.translated(-x0c, -y0c)
        mask = polygon_mask(local, 0, 0, x1c - x0c + 1, y1c - y0c + 1, 1)
        if cls is NucleusClass.ARTIFACT:
            level = float(rng.uniform(0.95, 1.0))
            for p in range(3):
                region = planes[p, y0c : y1c + 1, x0c : x1c + 1]
                region[mask] = np.maximum(region[mask], level)
            nuclei.append(GtNucleus(poly, cls, [], 0, 0, fill=level))
            continue
        fill = float(rng.uniform(0.5, 0.8))
        region = planes[DAPI, y0c : y1c + 1, x0c : x1c + 1]
        region[mask] = np.maximum(region[mask], fill)
        signals = place_signals(poly, cls, rng, config.psf_sigma)
        her2 = sum(s.true_copies for s in signals if s.cls is not SignalClass.CEP17)
        cep17 = sum(1 for s in signals if s.cls is SignalClass.CEP17)
        assert grade_nucleus(her2, cep17, scoring) is cls, "generated counts must re-grade to the class"
        for s in signals:
            plane = HER2 if s.cls is not SignalClass.CEP17 else CEP17
            _render_spots(planes[plane], s.spots, config.psf_sigma)
        nuclei.append(GtNucleus(poly, cls, signals, her2, cep17, fill=fill))

    # soften DAPI edges so thresholding behaves like stained chromatin
    planes[DAPI] = ndimage.gaussian_filter(planes[DAPI], 1.0)
    _render_smears(planes, config, rng)
    if config.noise_sigma > 0:
        planes += rng.normal(0.0, config.noise_sigma, size=planes.shape)
    image = MultiChannelImage(np.clip(planes, 0.0, 1.0).astype(np.float32))

    entries = [
        GradeEntry(n.cls, n.her2_copies, n.cep17_copies, consistent=True)
        for n in nuclei
        if n.cls.gradable
    ]
    status = slide_status(entries, scoring)
    gt = GroundTruth(nuclei, status, scoring)
    for n in gt.nuclei:
        for s in n.signals:
            cx = (s.box[0] + s.box[2]) / 2
            cy = (s.box[1] + s.box[3]) / 2
            inside = points_in_polygon(n.polygon, np.array([cx]), np.array([cy]))
            assert bool(inside[0]), "GT signal center must lie inside its polygon"
    return image, gt
