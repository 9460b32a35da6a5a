"""Named-tensor archive: a JSON header (version, dtype, tensor directory with
byte offsets, plus ignorable extra keys) followed by concatenated
little-endian scalar blobs in header order.

Layout on disk: u32-LE header length, UTF-8 header JSON, payload bytes.
Offsets must be contiguous and non-overlapping; the payload length must equal
the sum of the tensor sizes. Loading a generator rejects missing or extra
tensor names against the architecture of the stored config.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .generator import GeneratorConfig, GeneratorWeights
from .tensor import F32, F64

ARCHIVE_VERSION = 1

_DTYPE_TAGS = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


class ArchiveError(ValueError):
    """Malformed or inconsistent weight archive."""


def _dtype_tag(dtype) -> str:
    dt = np.dtype(dtype)
    if dt == np.dtype(F32):
        return "f32"
    if dt == np.dtype(F64):
        return "f64"
    raise ArchiveError(f"unsupported archive dtype {dt}")


def archive_bytes(tensors: dict[str, np.ndarray], dtype=None,
                  extra: dict | None = None) -> bytes:
    """Serialize tensors (in sorted name order) to the archive format."""
    if not tensors:
        raise ArchiveError("refusing to write an empty archive")
    if dtype is None:
        dtype = next(iter(tensors.values())).dtype
    tag = _dtype_tag(dtype)
    le = _DTYPE_TAGS[tag]
    names = []
    blobs = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype=le)
        blob = arr.tobytes()
        names.append({"name": name, "dims": list(arr.shape), "byte_offset": offset})
        blobs.append(blob)
        offset += len(blob)
    header = {"version": ARCHIVE_VERSION, "dtype": tag, "names": names}
    if extra:
        header.update(extra)
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    return struct.pack("<I", len(hbytes)) + hbytes + b"".join(blobs)


def parse_archive(data: bytes) -> tuple[dict[str, np.ndarray], dict]:
    """Inverse of ``archive_bytes``; returns (tensors, header)."""
    if len(data) < 4:
        raise ArchiveError("archive truncated before header length")
    (hlen,) = struct.unpack("<I", data[:4])
    if len(data) < 4 + hlen:
        raise ArchiveError("archive truncated inside header")
    try:
        header = json.loads(data[4:4 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ArchiveError(f"unreadable archive header: {e}") from e
    if header.get("version") != ARCHIVE_VERSION:
        raise ArchiveError(f"unsupported archive version {header.get('version')}")
    tag = header.get("dtype")
    if tag not in _DTYPE_TAGS:
        raise ArchiveError(f"unknown archive dtype {tag!r}")
    le = _DTYPE_TAGS[tag]
    payload = data[4 + hlen:]
    tensors: dict[str, np.ndarray] = {}
    expected_offset = 0
    for entry in header.get("names", []):
        name, dims, off = entry["name"], entry["dims"], entry["byte_offset"]
        if off != expected_offset:
            raise ArchiveError(
                f"tensor {name}: offset {off} not contiguous (expected {expected_offset})")
        nbytes = int(np.prod(dims, dtype=np.int64)) * le.itemsize
        if off + nbytes > len(payload):
            raise ArchiveError(f"tensor {name}: payload truncated")
        arr = np.frombuffer(payload, dtype=le, count=int(np.prod(dims, dtype=np.int64)),
                            offset=off).reshape(dims)
        tensors[name] = arr.astype(le.newbyteorder("=")).copy()
        expected_offset = off + nbytes
    if expected_offset != len(payload):
        raise ArchiveError(
            f"payload length {len(payload)} != directory total {expected_offset}")
    return tensors, header


def save_archive(path, tensors: dict[str, np.ndarray], dtype=None,
                 extra: dict | None = None) -> None:
    with open(path, "wb") as fh:
        fh.write(archive_bytes(tensors, dtype, extra))


def load_archive(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        return parse_archive(fh.read())


# ---------------------------------------------------------------------------
# generator weights on top of the generic container
# ---------------------------------------------------------------------------

def save_generator_weights(path, weights: GeneratorWeights) -> None:
    weights.validate()
    cfg = weights.config
    extra = {
        "config": {
            "base_width": cfg.base_width,
            "width_multiplier": cfg.width_multiplier,
            "mode": cfg.mode,
        },
        "interp": "half_pixel",  # bilinear coordinate convention, for bit parity
    }
    save_archive(path, weights.tensors, extra=extra)


def load_generator_weights(path) -> GeneratorWeights:
    tensors, header = load_archive(path)
    cfg_dict = header.get("config")
    if not isinstance(cfg_dict, dict):
        raise ArchiveError("archive lacks a generator config block")
    cfg = GeneratorConfig(base_width=int(cfg_dict["base_width"]),
                          width_multiplier=float(cfg_dict["width_multiplier"]),
                          mode=str(cfg_dict.get("mode", "selfsim")))
    weights = GeneratorWeights(cfg, tensors)
    weights.validate()  # rejects missing/extra names and any dims mismatch
    return weights
