"""Binary tensor and checkpoint files (little-endian, fixed layout).

TensorFile::

    b"TNSR" | u16 version=1 | u8 dtype (1=f32, 2=f64) | u8 ndim | ndim x u32 dims | payload

Checkpoint::

    b"TUCK" | u16 version=1 | u32 entry count
    entries: u16 name length | UTF-8 name | body
    u32 CRC32 of every preceding byte

Entry bodies are complete TensorFiles, except the leading ``__config__``
entry whose body is ``u32 length | UTF-8 JSON``.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from pathlib import Path

import numpy as np

from .autodiff import Tensor, values
from .errors import FormatError, IntegrityError, SchemaError, TruncatedFileError
from .model import ModelConfig, TUnetParams, param_shapes

TENSOR_MAGIC = b"TNSR"
CKPT_MAGIC = b"TUCK"
VERSION = 1
CONFIG_ENTRY = "__config__"

_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}


def encode_tensor(arr) -> bytes:
    arr = values(arr)
    code = _CODES.get(arr.dtype)
    if code is None:
        raise ValueError(f"cannot store dtype {arr.dtype}; only float32/float64")
    if arr.ndim > 255 or any(d <= 0 or d >= 2**32 for d in arr.shape):
        raise ValueError(f"cannot store shape {arr.shape}")
    header = TENSOR_MAGIC + struct.pack("<HBB", VERSION, code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()


def _need(buf: bytes, offset: int, count: int, what: str) -> None:
    if offset + count > len(buf):
        raise TruncatedFileError(
            f"truncated {what}: need {count} bytes, {len(buf) - offset} available", offset
        )


def decode_tensor(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Parse one TensorFile starting at ``offset``; return (array, end offset)."""
    start = offset
    _need(buf, offset, 8, "tensor header")
    if buf[offset : offset + 4] != TENSOR_MAGIC:
        raise FormatError(f"bad tensor magic {bytes(buf[offset:offset + 4])!r}", offset)
    version, code, ndim = struct.unpack_from("<HBB", buf, offset + 4)
    if version != VERSION:
        raise FormatError(f"unsupported tensor version {version}", offset + 4)
    if code not in _DTYPES:
        raise FormatError(f"unknown dtype code {code}", offset + 6)
    offset += 8
    _need(buf, offset, 4 * ndim, "tensor dims")
    dims = struct.unpack_from(f"<{ndim}I", buf, offset)
    if any(d == 0 for d in dims):
        raise FormatError(f"zero-sized dimension in {dims}", offset)
    offset += 4 * ndim
    dtype = _DTYPES[code]
    nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    _need(buf, offset, nbytes, f"tensor payload of shape {dims} (header at {start})")
    arr = np.frombuffer(buf, dtype=dtype, count=nbytes // dtype.itemsize, offset=offset)
    arr = arr.reshape(dims).astype(dtype.newbyteorder("="), copy=True)
    return arr, offset + nbytes


def save_tensor(path, tensor) -> None:
    Path(path).write_bytes(encode_tensor(tensor))


def load_tensor(path) -> Tensor:
    """Read a TensorFile. Trailing bytes after the payload are rejected."""
    buf = Path(path).read_bytes()
    arr, end = decode_tensor(buf)
    if end != len(buf):
        raise FormatError(f"{len(buf) - end} unexpected trailing bytes", end)
    return Tensor(arr, dtype=arr.dtype)


# ---------------------------------------------------------------------------
# checkpoints


def encode_checkpoint(params: TUnetParams, config: ModelConfig) -> bytes:
    names = list(params.names())
    if CONFIG_ENTRY in names:
        raise ValueError(f"parameter name {CONFIG_ENTRY!r} is reserved")
    parts = [CKPT_MAGIC, struct.pack("<HI", VERSION, len(names) + 1)]

    def add_name(name: str) -> None:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)

    cfg = json.dumps(config.to_dict(), sort_keys=True).encode("utf-8")
    add_name(CONFIG_ENTRY)
    parts.append(struct.pack("<I", len(cfg)) + cfg)
    for name in names:
        add_name(name)
        parts.append(encode_tensor(params[name]))
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def save_checkpoint(path, params: TUnetParams, config: ModelConfig) -> None:
    """Write atomically (temp file + rename)."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_checkpoint(params, config))
    os.replace(tmp, path)


def decode_checkpoint(
    buf: bytes, expected: ModelConfig | None = None
) -> tuple[TUnetParams, ModelConfig]:
    if len(buf) < 14:
        raise TruncatedFileError("checkpoint shorter than its fixed header", len(buf))
    if buf[:4] != CKPT_MAGIC:
        raise FormatError(f"bad checkpoint magic {bytes(buf[:4])!r}", 0)
    stored_crc = struct.unpack_from("<I", buf, len(buf) - 4)[0]
    actual_crc = zlib.crc32(buf[:-4]) & 0xFFFFFFFF
    if stored_crc != actual_crc:
        raise IntegrityError(f"checkpoint CRC mismatch: stored {stored_crc:08x}, computed {actual_crc:08x}")
    body = buf[:-4]
    version, count = struct.unpack_from("<HI", body, 4)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    offset = 10
    entries: dict[str, np.ndarray] = {}
    config: ModelConfig | None = None
    for index in range(count):
        _need(body, offset, 2, "entry name length")
        (nlen,) = struct.unpack_from("<H", body, offset)
        offset += 2
        _need(body, offset, nlen, "entry name")
        name = body[offset : offset + nlen].decode("utf-8")
        offset += nlen
        if name in entries or (name == CONFIG_ENTRY and config is not None):
            raise FormatError(f"duplicate entry {name!r}", offset - nlen)
        if name == CONFIG_ENTRY:
            if index != 0:
                raise FormatError("config entry must come first", offset - nlen)
            _need(body, offset, 4, "config length")
            (clen,) = struct.unpack_from("<I", body, offset)
            offset += 4
            _need(body, offset, clen, "config JSON")
            config = ModelConfig.from_dict(json.loads(body[offset : offset + clen].decode("utf-8")))
            offset += clen
        else:
            entries[name], offset = decode_tensor(body, offset)
    if offset != len(body):
        raise FormatError(f"{len(body) - offset} unexpected bytes after last entry", offset)
    if config is None:
        raise SchemaError(f"checkpoint has no {CONFIG_ENTRY!r} entry")

    if expected is not None and expected.architecture() != config.architecture():
        diffs = sorted(
            k for k, v in expected.architecture().items() if config.architecture().get(k) != v
        )
        raise SchemaError(f"checkpoint config differs from the requested one in {diffs}")
    shapes = param_shapes(expected or config)
    for name, shape in shapes.items():
        if name not in entries:
            raise SchemaError(f"checkpoint is missing tensor {name!r}")
        if entries[name].shape != shape:
            raise SchemaError(f"tensor {name!r} has shape {entries[name].shape}, expected {shape}")
    extra = sorted(set(entries) - set(shapes))
    if extra:
        raise SchemaError(f"checkpoint has unexpected tensors {extra}")
    params = TUnetParams(
        {name: Tensor(entries[name], requires_grad=True, dtype=entries[name].dtype) for name in shapes}
    )
    return params, config


def load_checkpoint(path, config: ModelConfig | None = None) -> tuple[TUnetParams, ModelConfig]:
    """Load parameters and the stored config.

    When ``config`` is given, the stored architecture must match it.

    Raises:
        IntegrityError: the CRC does not match.
        SchemaError: tensors or config do not match the expected parameter set.
        FormatError: the byte layout is malformed.
    """
    return decode_checkpoint(Path(path).read_bytes(), config)
