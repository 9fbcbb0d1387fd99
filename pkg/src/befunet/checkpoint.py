"""Binary checkpoint format.

Little-endian: magic ``BEFU``, u32 version (1), u32 tensor count, then per
tensor a u16 name length, the UTF-8 name, u8 dtype code, u8 rank, u32 per
dimension and the raw row-major payload. Dtype codes: 0 float32, 1 float64,
2 uint8. The model configuration travels as JSON bytes in a uint8 tensor
named ``__config__``.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .data import FormatError, TruncatedFileError
from .model import BEFUnet, ModelConfig

MAGIC = b"BEFU"
VERSION = 1
CONFIG_KEY = "__config__"
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("u1")}
CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1, np.dtype(np.uint8): 2}


def encode(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype not in CODES:
            raise TypeError(f"{name}: unsupported dtype {arr.dtype}")
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw_name)) + raw_name)
        parts.append(struct.pack("<BB", CODES[arr.dtype], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=DTYPES[CODES[arr.dtype]]).tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedFileError(f"checkpoint truncated: need {n} bytes at offset {self.pos}, "
                                     f"file has {len(self.buf)}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode(buf: bytes) -> dict[str, np.ndarray]:
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise FormatError("bad checkpoint magic", 0)
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    (count,) = r.unpack("<I")
    out = {}
    for _ in range(count):
        (n,) = r.unpack("<H")
        at = r.pos
        try:
            name = r.take(n).decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("tensor name is not UTF-8", at) from None
        code_at = r.pos
        code, rank = r.unpack("<BB")
        if code not in DTYPES:
            raise FormatError(f"{name}: unknown dtype code {code}", code_at)
        shape = r.unpack(f"<{rank}I") if rank else ()
        dtype = DTYPES[code]
        size = int(np.prod(shape, dtype=np.int64))
        payload = r.take(size * dtype.itemsize)
        out[name] = np.frombuffer(payload, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
    if r.pos != len(buf):
        raise FormatError("trailing bytes after the last tensor", r.pos)
    return out


def save_checkpoint(model: BEFUnet, path) -> None:
    tensors = {CONFIG_KEY: np.frombuffer(json.dumps(model.cfg.to_dict()).encode(), dtype=np.uint8)}
    tensors.update(model.state_dict())
    Path(path).write_bytes(encode(tensors))


def load_checkpoint(path) -> BEFUnet:
    """Rebuild the model from the stored configuration and copy the stored parameters in."""
    tensors = decode(Path(path).read_bytes())
    if CONFIG_KEY not in tensors:
        raise FormatError("checkpoint has no model configuration", 0)
    try:
        cfg = ModelConfig.from_dict(json.loads(tensors.pop(CONFIG_KEY).tobytes().decode("utf-8")))
    except (ValueError, TypeError) as e:
        raise FormatError(f"unreadable model configuration: {e}", 0) from None
    model = BEFUnet(cfg)
    own = dict(model.named_parameters())
    if own.keys() != tensors.keys():
        raise FormatError(f"parameter names differ from the configured model: "
                          f"missing={sorted(own.keys() - tensors.keys())} "
                          f"unexpected={sorted(tensors.keys() - own.keys())}", 0)
    for name, p in own.items():
        arr = tensors[name]
        if arr.shape != p.shape:
            raise FormatError(f"{name}: stored shape {arr.shape} != {p.shape}", 0)
        p.data = arr.copy()
    return model
