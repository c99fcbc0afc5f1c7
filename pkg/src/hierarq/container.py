"""Binary file formats.

Feature container (magic ``HQF1``): a fixed 20-byte header of little-endian
unsigned 32-bit fields (magic, T, N_v, D_vis, precision code) followed by
T*N_v*D_vis little-endian floats in (frame, token, dim) order. Precision code
0 is 32-bit floats, 1 is 64-bit. Round-trips are bit-exact; malformed files
are rejected with the byte offset of the problem.

Checkpoint (magic ``HQW1``): magic, a 32-bit length, a UTF-8 JSON manifest
listing tensor names, shapes, and dtypes in order, then the raw little-endian
tensor payloads in the same order.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import FormatError

FEATURE_MAGIC = b"HQF1"
CHECKPOINT_MAGIC = b"HQW1"
_HEADER = struct.Struct("<4sIIII")
_PRECISION_TO_CODE = {"f32": 0, "f64": 1}
_CODE_TO_DTYPE = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_TO_NAME = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}
_NAME_TO_DTYPE = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


def write_features(path: str, features: np.ndarray) -> None:
    """Write a (T, N_v, D_vis) float array as a feature container."""
    arr = np.asarray(features)
    if arr.ndim != 3:
        raise FormatError(f"features must be (T, N_v, D_vis), got shape {arr.shape}")
    if arr.shape[0] == 0:
        raise FormatError("refusing to write a container with zero frames")
    if arr.dtype not in _DTYPE_TO_NAME:
        raise FormatError(f"features must be float32 or float64, got {arr.dtype}")
    code = _PRECISION_TO_CODE[_DTYPE_TO_NAME[arr.dtype]]
    t, n, d = arr.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(FEATURE_MAGIC, t, n, d, code))
        fh.write(np.ascontiguousarray(arr, dtype=_CODE_TO_DTYPE[code]).tobytes())


def read_features(path: str) -> np.ndarray:
    """Read a feature container back into a (T, N_v, D_vis) array."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except FileNotFoundError:
        raise FormatError(f"feature file not found: {path}")
    if len(raw) < _HEADER.size:
        raise FormatError(
            f"truncated header: need {_HEADER.size} bytes, file has {len(raw)} (offset 0)")
    magic, t, n, d, code = _HEADER.unpack_from(raw, 0)
    if magic != FEATURE_MAGIC:
        raise FormatError(f"bad magic {magic!r} at offset 0, expected {FEATURE_MAGIC!r}")
    if t == 0 or n == 0 or d == 0:
        raise FormatError(f"degenerate header T={t} N={n} D={d} at offset 4")
    if code not in _CODE_TO_DTYPE:
        raise FormatError(f"unknown precision code {code} at offset 16")
    dtype = _CODE_TO_DTYPE[code]
    want = t * n * d * dtype.itemsize
    have = len(raw) - _HEADER.size
    if have != want:
        raise FormatError(
            f"payload mismatch at offset {_HEADER.size}: header implies {want} bytes, found {have}")
    flat = np.frombuffer(raw, dtype=dtype, offset=_HEADER.size)
    return flat.reshape(t, n, d).copy()


def write_checkpoint(path: str, tensors: dict[str, np.ndarray]) -> None:
    """Write named arrays; iteration order of the dict is preserved."""
    entries = []
    blobs = []
    for name, value in tensors.items():
        arr = np.asarray(value)
        if arr.dtype not in _DTYPE_TO_NAME:
            raise FormatError(f"tensor {name!r} must be float32 or float64, got {arr.dtype}")
        dtype_name = _DTYPE_TO_NAME[arr.dtype]
        entries.append({"name": name, "shape": list(arr.shape), "dtype": dtype_name})
        blobs.append(np.ascontiguousarray(arr, dtype=_NAME_TO_DTYPE[dtype_name]).tobytes())
    manifest = json.dumps({"tensors": entries}, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(manifest)))
        fh.write(manifest)
        for blob in blobs:
            fh.write(blob)


def read_checkpoint(path: str) -> dict[str, np.ndarray]:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except FileNotFoundError:
        raise FormatError(f"checkpoint not found: {path}")
    if len(raw) < 8 or raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic at offset 0 in {path}")
    (mlen,) = struct.unpack_from("<I", raw, 4)
    if len(raw) < 8 + mlen:
        raise FormatError(f"truncated manifest: need {mlen} bytes at offset 8")
    try:
        manifest = json.loads(raw[8:8 + mlen].decode("utf-8"))
        entries = manifest["tensors"]
    except (ValueError, KeyError, UnicodeDecodeError) as e:
        raise FormatError(f"unreadable checkpoint manifest: {e}")
    out: dict[str, np.ndarray] = {}
    offset = 8 + mlen
    for entry in entries:
        shape = tuple(int(s) for s in entry["shape"])
        dtype = _NAME_TO_DTYPE.get(entry["dtype"])
        if dtype is None:
            raise FormatError(f"tensor {entry['name']!r}: unknown dtype {entry['dtype']!r}")
        size = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if offset + size > len(raw):
            raise FormatError(
                f"truncated payload for {entry['name']!r} at offset {offset}: need {size} bytes")
        out[entry["name"]] = np.frombuffer(raw, dtype=dtype, count=int(np.prod(shape, dtype=np.int64)),
                                           offset=offset).reshape(shape).copy()
        offset += size
    if offset != len(raw):
        raise FormatError(f"{len(raw) - offset} trailing bytes at offset {offset}")
    return out


def load_into_parameters(params: dict, stored: dict[str, np.ndarray]) -> None:
    """Copy checkpoint arrays into a model's parameter tensors, strictly."""
    missing = sorted(set(params) - set(stored))
    extra = sorted(set(stored) - set(params))
    if missing or extra:
        raise FormatError(f"checkpoint/model mismatch: missing {missing}, unexpected {extra}")
    for name, tensor in params.items():
        arr = stored[name]
        if arr.shape != tensor.data.shape:
            raise FormatError(
                f"tensor {name!r}: checkpoint shape {arr.shape} vs model {tensor.data.shape}")
        tensor.data[...] = arr.astype(tensor.data.dtype, copy=False)
