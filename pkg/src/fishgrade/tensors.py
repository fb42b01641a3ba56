"""FGT1 binary tensor files and their sidecar descriptors.

Layout: magic b"FGT1", u32 rank, u32 dims[rank], u8 dtype tag, raw data.
All integers and floats are little-endian; tag 0 = float32.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"FGT1"
DTYPE_F32 = 0


def write_tensor(path: str, array: np.ndarray) -> None:
    arr = np.ascontiguousarray(array, dtype="<f4")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", arr.ndim))
        for d in arr.shape:
            f.write(struct.pack("<I", d))
        f.write(struct.pack("<B", DTYPE_F32))
        f.write(arr.tobytes())


def read_tensor(path: str) -> np.ndarray:
    name = Path(path).name
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != MAGIC:
        raise FormatError(f"{name}: bad magic {data[:4]!r}")
    off = 4
    if len(data) < off + 4:
        raise FormatError(f"{name}: truncated header")
    (rank,) = struct.unpack_from("<I", data, off)
    off += 4
    if rank > 8:
        raise FormatError(f"{name}: implausible rank {rank}")
    if len(data) < off + 4 * rank + 1:
        raise FormatError(f"{name}: truncated dims")
    dims = struct.unpack_from(f"<{rank}I", data, off)
    off += 4 * rank
    (tag,) = struct.unpack_from("<B", data, off)
    off += 1
    if tag != DTYPE_F32:
        raise FormatError(f"{name}: unsupported dtype tag {tag}")
    count = int(np.prod(dims)) if rank else 1
    expected = count * 4
    if len(data) - off != expected:
        raise FormatError(f"{name}: payload {len(data) - off} bytes, expected {expected}")
    return np.frombuffer(data[off:], dtype="<f4").reshape(dims).copy()


def write_prob_dist(prob_path: str, dist_path: str, maps) -> None:
    """ProbDistMaps export: rank-2 prob file plus rank-3 dist file."""
    write_tensor(prob_path, maps.prob)
    write_tensor(dist_path, maps.dist)


def read_prob_dist(prob_path: str, dist_path: str):
    from .segmentation import ProbDistMaps

    prob = read_tensor(prob_path)
    dist = read_tensor(dist_path)
    if prob.ndim != 2:
        raise FormatError(f"{Path(prob_path).name}: prob must be rank 2, got rank {prob.ndim}")
    if dist.ndim != 3:
        raise FormatError(f"{Path(dist_path).name}: dist must be rank 3, got rank {dist.ndim}")
    return ProbDistMaps(np.clip(prob, 0.0, 1.0), np.clip(dist, 0.0, None))


def write_head_maps(class_path: str, box_path: str, sidecar_path: str, head, grid) -> None:
    """HeadMaps export plus the JSON descriptor (stride, anchors, class order)."""
    write_tensor(class_path, head.class_logits)
    write_tensor(box_path, head.box_deltas)
    sidecar = {
        "stride": grid.stride,
        "anchors": [list(a) for a in grid.anchors],
        "classes": ["HER2", "HER2Cluster", "CEP17"],
    }
    with open(sidecar_path, "w", encoding="utf-8") as f:
        json.dump(sidecar, f, indent=1)


def read_head_maps(class_path: str, box_path: str, sidecar_path: str):
    from .signal_detection import AnchorGrid, HeadMaps

    with open(sidecar_path, encoding="utf-8") as f:
        sidecar = json.load(f)
    if sidecar.get("classes") != ["HER2", "HER2Cluster", "CEP17"]:
        raise FormatError(f"{Path(sidecar_path).name}: class order must be HER2, HER2Cluster, CEP17")
    grid = AnchorGrid(int(sidecar["stride"]), tuple(tuple(a) for a in sidecar["anchors"]))
    head = HeadMaps(read_tensor(class_path), read_tensor(box_path))
    head.validate(grid)
    return head, grid
