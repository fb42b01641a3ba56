"""Copy counting, per-nucleus grading and slide-level HER2 status.

The slide ratio is pooled (sum HER2 / sum CEP17 over evaluable nuclei), which
stays stable when individual nuclei have very low CEP17 counts.
"""

from __future__ import annotations

import enum
import statistics
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

from .errors import ConfigError, InputError


class NucleusClass(enum.Enum):
    ARTIFACT = "Artifact"
    BACKGROUND = "Background"
    NORMAL = "Normal"
    LOW_AMP = "LowAmp"
    HIGH_AMP = "HighAmp"

    @property
    def gradable(self) -> bool:
        return self in (NucleusClass.NORMAL, NucleusClass.LOW_AMP, NucleusClass.HIGH_AMP)


class Status(enum.Enum):
    NEGATIVE = "Negative"
    POSITIVE_LOW = "PositiveLow"
    POSITIVE_HIGH = "PositiveHigh"
    INDETERMINATE = "Indeterminate"


@dataclass
class ScoringConfig:
    ratio_threshold: float = 2.0
    high_amp_mean_her2_copies: float = 6.0
    min_evaluable_nuclei: int = 20
    cluster_copies_floor: int = 4
    cluster_copies_cap: int = 20
    include_discrepant: bool = False

    def validate(self) -> "ScoringConfig":
        if self.ratio_threshold <= 0:
            raise ConfigError("ratio_threshold", "must be > 0")
        if self.high_amp_mean_her2_copies <= 0:
            raise ConfigError("high_amp_mean_her2_copies", "must be > 0")
        if self.min_evaluable_nuclei < 1:
            raise ConfigError("min_evaluable_nuclei", "must be >= 1")
        if self.cluster_copies_floor < 1 or self.cluster_copies_cap < self.cluster_copies_floor:
            raise ConfigError("cluster_copies_cap", "need cap >= floor >= 1")
        return self

    def to_dict(self) -> dict:
        return {
            "ratio_threshold": self.ratio_threshold,
            "high_amp_mean_her2_copies": self.high_amp_mean_her2_copies,
            "min_evaluable_nuclei": self.min_evaluable_nuclei,
            "cluster_copies_floor": self.cluster_copies_floor,
            "cluster_copies_cap": self.cluster_copies_cap,
            "include_discrepant": self.include_discrepant,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScoringConfig":
        unknown = set(d) - {f for f in cls().to_dict()}
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown scoring field")
        return cls(**d).validate()


@dataclass
class NucleusScore:
    her2_copies: int
    cep17_copies: int
    ratio: Optional[float]  # None when cep17_copies == 0
    evaluable: bool
    exclusion_reason: Optional[str] = None


@dataclass
class SlideStatus:
    status: Status
    evaluable_count: int
    mean_ratio: Optional[float]
    mean_her2_copies: Optional[float]

    def to_dict(self) -> dict:
        return {
            "status": self.status.value,
            "evaluable_count": self.evaluable_count,
            "mean_ratio": self.mean_ratio,
            "mean_her2_copies": self.mean_her2_copies,
        }


@dataclass
class GradeEntry:
    """The slice of one nucleus that slide grading needs."""

    cls: NucleusClass
    her2_copies: int
    cep17_copies: int
    consistent: bool = True
    include_override: Optional[bool] = None  # reviewer include/exclude


def estimate_cluster_copies(cluster_box_area: float, reference_singleton_area: float, config: ScoringConfig) -> int:
    """Area-ratio copy estimate, clamped to [floor, cap]."""
    if cluster_box_area <= 0 or reference_singleton_area <= 0:
        raise InputError("cluster and reference areas must be > 0")
    est = round(cluster_box_area / reference_singleton_area)
    return int(min(max(est, config.cluster_copies_floor), config.cluster_copies_cap))


def reference_singleton_area(signals_per_nucleus: Iterable[Sequence], fallback: float) -> float:
    """Median HER2-single box area across the slide; fallback when none exist."""
    areas = []
    for signals in signals_per_nucleus:
        for s in signals:
            if s.cls.value == "HER2":
                areas.append(s.area())
    if not areas:
        return fallback
    return float(statistics.median(areas))


def nucleus_counts(signals: Sequence, config: ScoringConfig, singleton_area: float) -> tuple[int, int]:
    """(her2_copies, cep17_copies): singles count 1 each, clusters by area."""
    her2 = 0
    cep17 = 0
    for s in signals:
        name = s.cls.value
        if name == "HER2":
            her2 += 1
        elif name == "HER2Cluster":
            her2 += estimate_cluster_copies(s.area(), singleton_area, config)
        elif name == "CEP17":
            cep17 += 1
    return her2, cep17


def make_score(cls: NucleusClass, her2: int, cep17: int, consistent: bool, config: ScoringConfig) -> NucleusScore:
    ratio = her2 / cep17 if cep17 >= 1 else None
    reason = None
    if not cls.gradable:
        reason = f"filter class {cls.value}"
    elif ratio is None:
        reason = "no CEP17 signals; ratio undefined"
    elif not consistent and not config.include_discrepant:
        reason = "discrepant second opinion"
    return NucleusScore(her2, cep17, ratio, evaluable=reason is None, exclusion_reason=reason)


def grade_nucleus(her2_copies: int, cep17_copies: int, config: ScoringConfig) -> NucleusClass:
    """Per-nucleus grade with the same thresholds as slide scoring."""
    if her2_copies >= config.high_amp_mean_her2_copies:
        return NucleusClass.HIGH_AMP
    if cep17_copies >= 1 and her2_copies / cep17_copies >= config.ratio_threshold:
        return NucleusClass.LOW_AMP
    return NucleusClass.NORMAL


def entry_evaluable(e: GradeEntry, config: ScoringConfig) -> bool:
    if e.include_override is not None and not e.include_override:
        return False
    if not e.cls.gradable or e.cep17_copies < 1:
        return False
    if e.include_override:
        return True
    return e.consistent or config.include_discrepant


def slide_status(entries: Sequence[GradeEntry], config: ScoringConfig) -> SlideStatus:
    """Aggregate evaluable nuclei into the slide-level HER2 status."""
    ev = [e for e in entries if entry_evaluable(e, config)]
    n = len(ev)
    if n < config.min_evaluable_nuclei:
        return SlideStatus(Status.INDETERMINATE, n, None, None)
    sum_her2 = sum(e.her2_copies for e in ev)
    sum_cep17 = sum(e.cep17_copies for e in ev)
    mean_ratio = sum_her2 / sum_cep17
    mean_her2 = sum_her2 / n
    if mean_ratio < config.ratio_threshold:
        status = Status.NEGATIVE
    elif mean_her2 >= config.high_amp_mean_her2_copies:
        status = Status.POSITIVE_HIGH
    else:
        status = Status.POSITIVE_LOW
    return SlideStatus(status, n, mean_ratio, mean_her2)
