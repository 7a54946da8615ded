"""Binary tensor container, JSON sidecars and PNG export.

Container layout (all little-endian)::

    bytes 0-7    magic b"OATTNSR\\0"
    bytes 8-11   uint32 format version
    bytes 12-15  uint32 number of dimensions
    8 * ndim     int64 dimensions
    rest         float64 payload, row-major
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Any

import numpy as np
from PIL import Image as PILImage

from .errors import InvalidArgument

MAGIC = b"OATTNSR\0"
VERSION = 1
_HEADER = struct.Struct("<8sII")


def write_tensor(path: str | Path, array: np.ndarray, metadata: dict[str, Any] | None = None) -> Path:
    path = Path(path)
    array = np.ascontiguousarray(array, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, array.ndim))
        fh.write(struct.pack(f"<{array.ndim}q", *array.shape))
        fh.write(array.tobytes(order="C"))
    if metadata is not None:
        write_json(sidecar_path(path), metadata)
    return path


def read_tensor(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise InvalidArgument(f"{path}: truncated header")
    magic, version, ndim = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise InvalidArgument(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise InvalidArgument(f"{path}: unsupported container version {version}")
    offset = _HEADER.size
    shape = struct.unpack_from(f"<{ndim}q", raw, offset)
    offset += 8 * ndim
    count = int(np.prod(shape)) if ndim else 1
    if len(raw) - offset != 8 * count:
        raise InvalidArgument(f"{path}: payload has {len(raw) - offset} bytes, expected {8 * count}")
    return np.frombuffer(raw, dtype="<f8", offset=offset, count=count).reshape(shape).astype(np.float64)


def sidecar_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def read_sidecar(path: str | Path) -> dict[str, Any]:
    return json.loads(sidecar_path(path).read_text())


def write_json(path: str | Path, obj: Any) -> Path:
    path = Path(path)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")
    return path


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def sha256_file(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def export_png(path: str | Path, image: np.ndarray, vmin: float = 0.0, vmax: float = 1.0) -> dict[str, Any]:
    """Write a 16-bit grayscale PNG with the linear map ``[vmin, vmax] -> [0, 65535]``.

    Values outside the range are clipped. Returns the mapping, which is also
    written next to the PNG as a JSON sidecar.
    """
    if not vmax > vmin:
        raise InvalidArgument("vmax must exceed vmin")
    scaled = (np.asarray(image, dtype=np.float64) - vmin) / (vmax - vmin)
    codes = np.round(np.clip(scaled, 0.0, 1.0) * 65535).astype(np.uint16)
    PILImage.fromarray(codes).save(path)
    mapping = {"bit_depth": 16, "vmin": float(vmin), "vmax": float(vmax),
               "code_max": 65535, "shape": list(codes.shape)}
    write_json(sidecar_path(path), mapping)
    return mapping
