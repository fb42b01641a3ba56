"""fishgrade: interpretable HER2 FISH grading pipeline with a built-in
synthetic-slide oracle, CLI, and review service."""

__version__ = "0.1.0"

from .geometry import StarPolygon, polygon_from_rays, polygon_iou  # noqa: F401
from .image import AugmentSpec, MultiChannelImage, augment, downscale  # noqa: F401
from .scoring import NucleusClass, ScoringConfig, SlideStatus, Status  # noqa: F401
from .segmentation import ProbDistMaps, SegConfig, extract_crop, render_maps, segment  # noqa: F401
from .signal_detection import DetectorConfig, SignalBox, SignalClass, detect_signals  # noqa: F401
from .simulator import GroundTruth, SimConfig, simulate_slide  # noqa: F401
