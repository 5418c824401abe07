"""DGFS block files: samples and checkpoints.

Layout (little-endian)::

    b"DGFS" | version u16 | H u32 | W u32 | block*
    block  = name_len u8 | name utf-8 | dtype u8 | rank u8 | dims u32*rank
             | payload (row-major) | crc32(payload) u32

dtype tags: 0 = f64, 1 = u16, 2 = u8.
"""
from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from .types import (
    ConditionLabel,
    MultimodalSample,
    PanopticMap,
    SparseDepthMap,
)

MAGIC = b"DGFS"
VERSION = 1
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<u2"), 2: np.dtype("<u1")}
_TAGS = {np.dtype("float64"): 0, np.dtype("uint16"): 1, np.dtype("uint8"): 2}


class FormatError(ValueError):
    """Malformed, truncated or corrupted DGFS file."""


def encode_blocks(height: int, width: int, arrays: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<HII", VERSION, height, width)]
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        if arr.dtype == bool:
            arr = arr.astype(np.uint8)
        tag = _TAGS.get(arr.dtype)
        if tag is None:
            raise TypeError(f"array {name!r}: unsupported dtype {arr.dtype}")
        raw_name = name.encode("utf-8")
        if not 0 < len(raw_name) < 256:
            raise ValueError(f"array name {name!r} must be 1..255 bytes")
        payload = np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes()
        parts.append(struct.pack("<B", len(raw_name)) + raw_name)
        parts.append(struct.pack("<BB", tag, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(payload)
        parts.append(struct.pack("<I", zlib.crc32(payload)))
    return b"".join(parts)


def decode_blocks(buf: bytes) -> tuple[int, int, dict[str, np.ndarray]]:
    if len(buf) == 0:
        raise FormatError("empty file")
    if len(buf) < 14:
        raise FormatError("truncated header")
    if buf[:4] != MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}")
    version, height, width = struct.unpack_from("<HII", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported format version {version}")
    pos = 14
    arrays: dict[str, np.ndarray] = {}

    def need(n: int, what: str):
        if pos + n > len(buf):
            raise FormatError(f"truncated {what} at byte {pos}")

    while pos < len(buf):
        need(1, "block header")
        (nlen,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        need(nlen + 2, "block header")
        try:
            name = buf[pos:pos + nlen].decode("utf-8")
        except UnicodeDecodeError as e:
            raise FormatError(f"bad block name: {e}") from None
        pos += nlen
        tag, rank = struct.unpack_from("<BB", buf, pos)
        pos += 2
        if tag not in _DTYPES:
            raise FormatError(f"block {name!r}: unknown dtype tag {tag}")
        need(4 * rank, "dims")
        dims = struct.unpack_from(f"<{rank}I", buf, pos)
        pos += 4 * rank
        dtype = _DTYPES[tag]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
        need(nbytes + 4, f"payload of {name!r}")
        payload = buf[pos:pos + nbytes]
        pos += nbytes
        (crc,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        if zlib.crc32(payload) != crc:
            raise FormatError(f"block {name!r}: checksum mismatch")
        if name in arrays:
            raise FormatError(f"duplicate block {name!r}")
        arrays[name] = np.frombuffer(payload, dtype=dtype).reshape(dims).copy()
    return height, width, arrays


def write_blocks(path: str | Path, height: int, width: int, arrays: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode_blocks(height, width, arrays))


def read_blocks(path: str | Path) -> tuple[int, int, dict[str, np.ndarray]]:
    return decode_blocks(Path(path).read_bytes())


_SAMPLE_KEYS = (
    "rgb", "lidar_depth", "lidar_valid", "lidar_intensity", "lidar_input",
    "radar_input", "event_input", "class_id", "instance_id", "depth_true",
    "condition", "seed",
)


def sample_to_arrays(s: MultimodalSample) -> dict[str, np.ndarray]:
    intensity = s.lidar_raw.intensity
    if intensity is None:
        intensity = np.zeros_like(s.lidar_raw.depth)
    return {
        "rgb": s.rgb,
        "lidar_depth": s.lidar_raw.depth,
        "lidar_valid": s.lidar_raw.valid.astype(np.uint8),
        "lidar_intensity": intensity,
        "lidar_input": s.lidar_input,
        "radar_input": s.radar_input,
        "event_input": s.event_input,
        "class_id": s.panoptic.class_id.astype(np.uint16),
        "instance_id": s.panoptic.instance_id.astype(np.uint16),
        "depth_true": s.depth_true,
        "condition": np.array([s.condition.index], dtype=np.uint8),
        "seed": np.array([s.seed & 0xFFFFFFFF, s.seed >> 32], dtype=np.float64),
    }


def save_sample(sample: MultimodalSample, path: str | Path) -> None:
    h, w = sample.hw
    write_blocks(path, h, w, sample_to_arrays(sample))


def load_sample(path: str | Path) -> MultimodalSample:
    h, w, a = read_blocks(path)
    missing = [k for k in _SAMPLE_KEYS if k not in a]
    if missing:
        raise FormatError(f"sample file lacks blocks {missing}")
    if a["rgb"].shape != (3, h, w):
        raise FormatError(f"rgb shape {a['rgb'].shape} disagrees with header {h}x{w}")
    lo, hi = a["seed"]
    return MultimodalSample(
        rgb=a["rgb"],
        lidar_raw=SparseDepthMap(a["lidar_depth"], a["lidar_valid"].astype(bool), a["lidar_intensity"]),
        lidar_input=a["lidar_input"],
        radar_input=a["radar_input"],
        event_input=a["event_input"],
        panoptic=PanopticMap(a["class_id"], a["instance_id"]),
        condition=ConditionLabel.from_index(int(a["condition"][0])),
        depth_true=a["depth_true"],
        seed=int(lo) + (int(hi) << 32),
    )


def samples_equal(a: MultimodalSample, b: MultimodalSample) -> bool:
    """Bit-exact equality of every stored array."""
    xa, xb = sample_to_arrays(a), sample_to_arrays(b)
    return all(
        xa[k].dtype == xb[k].dtype and xa[k].shape == xb[k].shape
        and xa[k].tobytes() == xb[k].tobytes()
        for k in _SAMPLE_KEYS
    )
