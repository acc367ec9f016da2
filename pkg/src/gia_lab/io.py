"""Binary tensor-file format shared by params, generators, and attack artifacts.

Layout (all integers little-endian):

    magic     4 bytes   "GIAP" params / "GIAG" generators / "GIAA" attack artifacts
    version   u16       currently 1
    records   repeated until EOF:
        name_len  u32
        name      utf-8 bytes
        rank      u32
        dims      u32 * rank
        data      f64 * prod(dims), little-endian

Records whose name starts with ``__`` are reserved: ``__meta__`` holds a
JSON blob (one byte per f64 value) used to embed the model spec or attack
module description, so a single file is self-describing.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC_PARAMS = b"GIAP"
MAGIC_GENERATOR = b"GIAG"
MAGIC_ARTIFACT = b"GIAA"
VERSION = 1


class FileFormatError(ValueError):
    pass


def _encode_meta(meta: dict) -> np.ndarray:
    raw = json.dumps(meta).encode("utf-8")
    return np.frombuffer(raw, dtype=np.uint8).astype(np.float64)


def _decode_meta(arr: np.ndarray) -> dict:
    raw = bytes(np.asarray(arr, dtype=np.float64).astype(np.uint8))
    return json.loads(raw.decode("utf-8"))


def write_tensors(path, tensors: dict, magic: bytes = MAGIC_PARAMS, meta: dict | None = None):
    path = Path(path)
    parts = [magic, struct.pack("<H", VERSION)]
    items = list(tensors.items())
    if meta is not None:
        items.insert(0, ("__meta__", _encode_meta(meta)))
    for name, value in items:
        value = np.ascontiguousarray(value, dtype=np.float64)
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<I", value.ndim))
        parts.append(struct.pack(f"<{value.ndim}I", *value.shape))
        parts.append(value.astype("<f8").tobytes())
    path.write_bytes(b"".join(parts))


def read_tensors(path, magic: bytes = MAGIC_PARAMS):
    """Read a tensor file; returns (tensors, meta dict or None).

    The whole file is parsed before anything is returned, so a truncated or
    corrupt file never yields partial contents.
    """
    blob = Path(path).read_bytes()
    if len(blob) < 6:
        raise FileFormatError(f"{path}: file too short for header")
    if blob[:4] != magic:
        raise FileFormatError(
            f"{path}: bad magic {blob[:4]!r}, expected {magic!r}"
        )
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != VERSION:
        raise FileFormatError(
            f"{path}: unsupported version {version}, expected {VERSION}"
        )
    off = 6
    tensors: dict = {}
    meta = None
    while off < len(blob):
        try:
            (name_len,) = struct.unpack_from("<I", blob, off)
            off += 4
            name = blob[off : off + name_len].decode("utf-8")
            if len(blob[off : off + name_len]) != name_len:
                raise struct.error("truncated name")
            off += name_len
            (rank,) = struct.unpack_from("<I", blob, off)
            off += 4
            dims = struct.unpack_from(f"<{rank}I", blob, off)
            off += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            nbytes = 8 * count
            if off + nbytes > len(blob):
                raise struct.error("truncated data")
            data = np.frombuffer(blob, dtype="<f8", count=count, offset=off)
            off += nbytes
        except struct.error as exc:
            raise FileFormatError(f"{path}: truncated or corrupt record ({exc})") from exc
        value = data.astype(np.float64).reshape(dims)
        if name == "__meta__":
            meta = _decode_meta(value)
        else:
            tensors[name] = value
    return tensors, meta


def save_params(path, params: dict, spec=None):
    """Write model parameters (GIAP); embeds the spec JSON when given."""
    from . import models

    meta = None
    if spec is not None:
        meta = {"spec": models.spec_to_json(spec)}
    write_tensors(path, params, MAGIC_PARAMS, meta)


def load_params(path):
    """Read model parameters (GIAP); returns (params, spec or None)."""
    from . import models

    tensors, meta = read_tensors(path, MAGIC_PARAMS)
    spec = None
    if meta and "spec" in meta:
        spec = models.spec_from_json(meta["spec"])
    return tensors, spec
