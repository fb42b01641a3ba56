"""Per-nucleus classification, CAM saliency and the second-opinion check.

The rule-based classifier grades with the same thresholds as slide scoring so
both opinions are commensurable; an external classifier plugs in through
5-class logits and (optionally) feature maps + class weights for CAMs.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, InputError
from .scoring import NucleusClass, ScoringConfig, grade_nucleus, nucleus_counts
from .segmentation import NucleusCrop

CLASS_ORDER = (
    NucleusClass.ARTIFACT,
    NucleusClass.BACKGROUND,
    NucleusClass.NORMAL,
    NucleusClass.LOW_AMP,
    NucleusClass.HIGH_AMP,
)


@dataclass
class ClassifierConfig:
    min_dapi_coverage: float = 0.35
    artifact_saturation_fraction: float = 0.5
    artifact_max_area_px: float = 50_000.0
    artifact_aspect_bounds: tuple[float, float] = (0.2, 5.0)

    def validate(self) -> "ClassifierConfig":
        for name in ("min_dapi_coverage", "artifact_saturation_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(name, f"must be in [0, 1], got {v}")
        if self.artifact_max_area_px <= 0:
            raise ConfigError("artifact_max_area_px", "must be > 0")
        lo, hi = self.artifact_aspect_bounds
        if lo <= 0 or hi < lo:
            raise ConfigError("artifact_aspect_bounds", f"need 0 < lo <= hi, got {self.artifact_aspect_bounds}")
        return self

    def to_dict(self) -> dict:
        return {
            "min_dapi_coverage": self.min_dapi_coverage,
            "artifact_saturation_fraction": self.artifact_saturation_fraction,
            "artifact_max_area_px": self.artifact_max_area_px,
            "artifact_aspect_bounds": list(self.artifact_aspect_bounds),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ClassifierConfig":
        unknown = set(d) - set(cls().to_dict())
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown classifier field")
        d = dict(d)
        if "artifact_aspect_bounds" in d:
            d["artifact_aspect_bounds"] = tuple(d["artifact_aspect_bounds"])
        return cls(**d).validate()


def classify_by_rules(
    crop: NucleusCrop,
    signals: Sequence,
    config: ClassifierConfig,
    scoring_config: ScoringConfig,
    singleton_area: float,
) -> tuple[NucleusClass, str]:
    """Total rule cascade: Background (empty DAPI) -> Artifact (saturation /
    size / aspect) -> grade from copies and ratio. Always returns a rationale
    naming the triggered rule."""
    coverage = crop.dapi_coverage
    if coverage < config.min_dapi_coverage:
        return NucleusClass.BACKGROUND, (
            f"DAPI coverage {coverage:.2f} below {config.min_dapi_coverage:.2f}"
        )
    mask_px = int(np.count_nonzero(crop.mask))
    saturated = crop.image.planes[:, crop.mask] >= 0.98
    sat_frac = float(saturated.any(axis=0).mean()) if mask_px else 0.0
    if sat_frac > config.artifact_saturation_fraction:
        return NucleusClass.ARTIFACT, (
            f"saturated fraction {sat_frac:.2f} above {config.artifact_saturation_fraction:.2f}"
        )
    if mask_px > config.artifact_max_area_px:
        return NucleusClass.ARTIFACT, f"area {mask_px} px above {config.artifact_max_area_px:.0f}"
    ys, xs = np.nonzero(crop.mask)
    w = int(xs.max() - xs.min() + 1)
    h = int(ys.max() - ys.min() + 1)
    aspect = w / h
    lo, hi = config.artifact_aspect_bounds
    if not lo <= aspect <= hi:
        return NucleusClass.ARTIFACT, f"aspect ratio {aspect:.2f} outside [{lo}, {hi}]"
    her2, cep17 = nucleus_counts(signals, scoring_config, singleton_area)
    cls = grade_nucleus(her2, cep17, scoring_config)
    ratio = f"{her2 / cep17:.2f}" if cep17 else "undefined"
    return cls, f"graded from {her2} HER2 / {cep17} CEP17 copies (ratio {ratio})"


def classify_by_scores(logits: Sequence[float]) -> tuple[NucleusClass, np.ndarray]:
    """Softmax over external 5-class logits; argmax with enum-order ties."""
    x = np.asarray(logits, dtype=np.float64)
    if x.shape != (5,):
        raise InputError(f"expected 5 logits, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise InputError("non-finite logit")
    z = np.exp(x - x.max())
    probs = z / z.sum()
    idx = int(np.argmax(probs))  # argmax returns the first (enum-order) max
    return CLASS_ORDER[idx], probs


@dataclass
class CamMap:
    """Saliency grid in [0, 1], upsampled to the crop dims."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32)
        if v.ndim != 2:
            raise InputError(f"CAM must be 2-D, got {v.shape}")
        if v.size and (float(v.min()) < 0 or float(v.max()) > 1):
            raise InputError("CAM values outside [0, 1]")
        self.values = v


def _bilinear_upsample(grid: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Align-corners bilinear resize (exact identity when dims match)."""
    h, w = grid.shape
    if (h, w) == (out_h, out_w):
        return grid.copy()
    ys = np.linspace(0, h - 1, out_h) if out_h > 1 else np.zeros(1)
    xs = np.linspace(0, w - 1, out_w) if out_w > 1 else np.zeros(1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    a = grid[np.ix_(y0, x0)]
    b = grid[np.ix_(y0, x1)]
    c = grid[np.ix_(y1, x0)]
    d = grid[np.ix_(y1, x1)]
    return (a * (1 - fy) * (1 - fx) + b * (1 - fy) * fx + c * fy * (1 - fx) + d * fy * fx)


def compute_cam(features: np.ndarray, class_weights: Sequence[float], crop_dims: tuple[int, int]) -> CamMap:
    """Class-weighted sum of feature maps, min-max normalized to [0, 1]
    (all zeros when the raw map is constant), bilinearly upsampled."""
    f = np.asarray(features, dtype=np.float64)
    w = np.asarray(class_weights, dtype=np.float64)
    if f.ndim != 3 or f.shape[0] < 1:
        raise InputError(f"features must be (C, h, w), got {f.shape}")
    if w.shape != (f.shape[0],):
        raise InputError(f"weight length {w.shape} != channel count {f.shape[0]}")
    raw = np.tensordot(w, f, axes=(0, 0))
    lo = float(raw.min())
    hi = float(raw.max())
    if hi - lo <= 0:
        norm = np.zeros_like(raw)
    else:
        norm = (raw - lo) / (hi - lo)
    out_w, out_h = crop_dims
    return CamMap(np.clip(_bilinear_upsample(norm, out_h, out_w), 0.0, 1.0))


class OpinionStatus(enum.Enum):
    CONSISTENT = "consistent"
    DISCREPANT = "discrepant"


@dataclass
class SecondOpinion:
    status: OpinionStatus
    classifier_class: NucleusClass
    signal_class: NucleusClass

    @property
    def consistent(self) -> bool:
        return self.status is OpinionStatus.CONSISTENT


def second_opinion(class_a: NucleusClass, class_b: NucleusClass) -> SecondOpinion:
    """Consistent iff the two independent opinions agree exactly."""
    status = OpinionStatus.CONSISTENT if class_a is class_b else OpinionStatus.DISCREPANT
    return SecondOpinion(status, class_a, class_b)
