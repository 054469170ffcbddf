"""CKPT binary format.

    magic "CKPT" | u32 version | u32 len + utf-8 descriptor | u32 count
    count x ( u32 len + utf-8 name | u8 dtype | u8 rank | rank x u32 dim | raw <f4 data )

All integers little-endian. dtype 0 is float32, the only code written.
"""
import io
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Dict, Tuple, Union

import numpy as np

from ..errors import DecodeError

MAGIC = b"CKPT"
VERSION = 1
_DTYPES = {0: np.dtype("<f4")}


def _put_str(buf, s: str):
    raw = s.encode("utf-8")
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)


def checkpoint_bytes(descriptor: str, state: Dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    _put_str(buf, descriptor)
    buf.write(struct.pack("<I", len(state)))
    for name, arr in state.items():
        arr = np.asarray(arr)
        if arr.ndim > 255:
            raise ValueError(f"{name}: rank too large")
        _put_str(buf, name)
        buf.write(struct.pack("<BB", 0, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


def save_checkpoint(path: Union[str, Path], descriptor: str, state: Dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(checkpoint_bytes(descriptor, state))


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise DecodeError("checkpoint truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]

    def string(self):
        try:
            return self.take(self.u32()).decode("utf-8")
        except UnicodeDecodeError as e:
            raise DecodeError(f"bad utf-8 in checkpoint: {e}") from None


def parse_checkpoint(data: bytes) -> Tuple[str, "OrderedDict[str, np.ndarray]"]:
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise DecodeError("not a CKPT file")
    version = r.u32()
    if version != VERSION:
        raise DecodeError(f"unsupported checkpoint version {version}")
    descriptor = r.string()
    state = OrderedDict()
    for _ in range(r.u32()):
        name = r.string()
        code, rank = struct.unpack("<BB", r.take(2))
        if code not in _DTYPES:
            raise DecodeError(f"{name}: unknown dtype code {code}")
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank))
        n = int(np.prod(dims)) if rank else 1
        dt = _DTYPES[code]
        state[name] = np.frombuffer(r.take(n * dt.itemsize), dtype=dt).reshape(dims).astype(np.float32)
    if r.pos != len(data):
        raise DecodeError("trailing bytes after checkpoint")
    return descriptor, state


def load_checkpoint(path: Union[str, Path]):
    return parse_checkpoint(Path(path).read_bytes())
