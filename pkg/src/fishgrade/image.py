"""Multi-channel raster type, augmentation ops and PNG/TIFF IO.

Channel convention everywhere: plane 0 = HER2 (red), plane 1 = CEP17 (green),
plane 2 = DAPI (blue). Files follow R=HER2, G=CEP17, B=DAPI.
"""

from __future__ import annotations

from dataclasses import dataclass

import cv2
import numpy as np

from .errors import ConfigError, InputError

HER2, CEP17, DAPI = 0, 1, 2
CHANNEL_NAMES = ("HER2", "CEP17", "DAPI")


@dataclass
class MultiChannelImage:
    """Fixed-size 3-plane raster with intensities in [0, 1]."""

    planes: np.ndarray  # (3, H, W) float32

    def __post_init__(self):
        p = np.asarray(self.planes, dtype=np.float32)
        if p.ndim != 3 or p.shape[0] != 3:
            raise InputError(f"expected (3, H, W) planes, got {p.shape}")
        if p.shape[1] < 1 or p.shape[2] < 1:
            raise InputError("empty image")
        if float(p.min()) < 0.0 or float(p.max()) > 1.0:
            raise InputError("intensity outside [0, 1]")
        self.planes = p

    @property
    def height(self) -> int:
        return int(self.planes.shape[1])

    @property
    def width(self) -> int:
        return int(self.planes.shape[2])

    @property
    def her2(self) -> np.ndarray:
        return self.planes[HER2]

    @property
    def cep17(self) -> np.ndarray:
        return self.planes[CEP17]

    @property
    def dapi(self) -> np.ndarray:
        return self.planes[DAPI]

    @classmethod
    def zeros(cls, width: int, height: int) -> "MultiChannelImage":
        return cls(np.zeros((3, height, width), dtype=np.float32))


@dataclass
class AugmentSpec:
    """One augmentation: k quarter-turns, flips, then intensity transform."""

    rot90: int = 0
    hflip: bool = False
    vflip: bool = False
    brightness: float = 0.0
    contrast: float = 1.0


def augment(image: MultiChannelImage, spec: AugmentSpec) -> MultiChannelImage:
    """Axis-aligned rotation/flips plus mid-pivot brightness/contrast, clamped.

    Intensity map: out = (v - 0.5) * contrast + 0.5 + brightness.
    """
    if spec.rot90 not in (0, 1, 2, 3):
        raise ConfigError("rot90", f"must be in 0..3, got {spec.rot90}")
    p = image.planes
    if spec.rot90:
        p = np.rot90(p, k=spec.rot90, axes=(1, 2))
    if spec.hflip:
        p = p[:, :, ::-1]
    if spec.vflip:
        p = p[:, ::-1, :]
    p = (p - 0.5) * spec.contrast + 0.5 + spec.brightness
    return MultiChannelImage(np.clip(p, 0.0, 1.0).astype(np.float32))


def downscale(image: MultiChannelImage, factor: int) -> MultiChannelImage:
    """Block-mean pooling; output dims = ceil(dim / factor). Partial edge
    blocks average over the pixels present."""
    if factor < 1 or int(factor) != factor:
        raise ConfigError("factor", f"must be an integer >= 1, got {factor}")
    factor = int(factor)
    if factor == 1:
        return MultiChannelImage(image.planes.copy())
    p = image.planes.astype(np.float64)
    _, h, w = p.shape
    oh = -(-h // factor)
    ow = -(-w // factor)
    row_idx = np.arange(0, h, factor)
    col_idx = np.arange(0, w, factor)
    sums = np.add.reduceat(np.add.reduceat(p, row_idx, axis=1), col_idx, axis=2)
    rows = np.minimum(row_idx + factor, h) - row_idx
    cols = np.minimum(col_idx + factor, w) - col_idx
    counts = rows[:, None] * cols[None, :]
    out = sums / counts[None, :, :]
    assert out.shape == (3, oh, ow)
    return MultiChannelImage(np.clip(out, 0.0, 1.0).astype(np.float32))


def to_uint16(image: MultiChannelImage) -> np.ndarray:
    """(H, W, 3) uint16 in RGB order (R=HER2, G=CEP17, B=DAPI)."""
    rgb = np.moveaxis(image.planes, 0, 2)
    return np.round(rgb.astype(np.float64) * 65535.0).astype(np.uint16)


def write_png16(image: MultiChannelImage, path: str) -> None:
    """16-bit-per-channel PNG, R=HER2, G=CEP17, B=DAPI."""
    rgb = to_uint16(image)
    bgr = rgb[:, :, ::-1]
    if not cv2.imwrite(str(path), bgr):
        raise InputError(f"could not write PNG: {path}")


def read_image(path: str, channel_map: str = "rgb") -> MultiChannelImage:
    """Read an 8/16-bit PNG or TIFF. channel_map names which file channel
    carries (HER2, CEP17, DAPI); 'rgb' is the documented default."""
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise InputError(f"unreadable image: {path}")
    return _from_cv(raw, channel_map)


def decode_image_bytes(data: bytes, channel_map: str = "rgb") -> MultiChannelImage:
    """Decode an in-memory 8/16-bit PNG or TIFF."""
    buf = np.frombuffer(data, dtype=np.uint8)
    raw = cv2.imdecode(buf, cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise InputError("undecodable image bytes")
    return _from_cv(raw, channel_map)


def _from_cv(raw: np.ndarray, channel_map: str) -> MultiChannelImage:
    if raw.ndim == 2:
        raw = np.stack([raw, raw, raw], axis=2)
    if raw.shape[2] > 3:
        raw = raw[:, :, :3]
    scale = 65535.0 if raw.dtype == np.uint16 else 255.0
    bgr = raw.astype(np.float32) / scale
    rgb = bgr[:, :, ::-1]
    order = _channel_order(channel_map)
    planes = np.stack([rgb[:, :, order[0]], rgb[:, :, order[1]], rgb[:, :, order[2]]], axis=0)
    return MultiChannelImage(np.clip(planes, 0.0, 1.0))


def _channel_order(channel_map: str) -> tuple[int, int, int]:
    """Map a 3-letter channel string (file RGB -> roles) to plane sources.

    'rgb' means file R is HER2, G is CEP17, B is DAPI. A permutation like
    'gbr' means HER2 comes from file G, CEP17 from file B, DAPI from file R.
    """
    m = channel_map.lower()
    if sorted(m) != ["b", "g", "r"] or len(m) != 3:
        raise ConfigError("channel_map", f"need a permutation of 'rgb', got {channel_map!r}")
    pos = {"r": 0, "g": 1, "b": 2}
    return pos[m[0]], pos[m[1]], pos[m[2]]
