"""Binary checkpoint format.

Layout (all little-endian)::

    b"DRCK" | u32 version | u32 len + UTF-8 JSON EncoderConfig | u32 n_arrays
    then per array: u32 len + UTF-8 name | u32 rank | u32 dims[rank] | f32 payload
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .encoder import EncoderConfig, param_shapes

MAGIC = b"DRCK"
VERSION = 1


class CorruptFileError(ValueError):
    pass


class UnsupportedVersionError(ValueError):
    pass


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CorruptFileError(
                f"{self.path}: truncated at byte offset {self.pos} (needed {n} bytes, {len(self.data) - self.pos} left)"
            )
        chunk = self.data[self.pos: self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def text(self) -> str:
        n = self.u32()
        at = self.pos
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError:
            raise CorruptFileError(f"{self.path}: invalid UTF-8 at byte offset {at}") from None

    def header(self, magic: bytes, version: int):
        got = self.take(4)
        if got != magic:
            raise CorruptFileError(f"{self.path}: bad magic {got!r} at byte offset 0, expected {magic!r}")
        v = self.u32()
        if v != version:
            raise UnsupportedVersionError(f"{self.path}: format version {v}, this build reads version {version}")

    def done(self):
        if self.pos != len(self.data):
            raise CorruptFileError(f"{self.path}: {len(self.data) - self.pos} trailing bytes at offset {self.pos}")


def _text(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def save_checkpoint(params: dict, config: EncoderConfig, path) -> None:
    shapes = param_shapes(config)
    if set(shapes) != set(params):
        raise ValueError("parameter names do not match the encoder config")
    parts = [MAGIC, struct.pack("<I", VERSION), _text(json.dumps(config.to_dict(), sort_keys=True)),
             struct.pack("<I", len(shapes))]
    for name, shape in shapes.items():
        arr = np.ascontiguousarray(params[name], dtype="<f4")
        if arr.shape != shape:
            raise ValueError(f"{name}: shape {arr.shape} != expected {shape}")
        parts.append(_text(name))
        parts.append(struct.pack(f"<I{len(shape)}I", len(shape), *shape))
        parts.append(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_checkpoint(path):
    """Return ``(params, config)``; params are float32."""
    with open(path, "rb") as fh:
        r = _Reader(fh.read(), path)
    r.header(MAGIC, VERSION)
    at = r.pos
    try:
        config = EncoderConfig.from_dict(json.loads(r.text()))
    except (json.JSONDecodeError, TypeError) as e:
        raise CorruptFileError(f"{path}: unreadable encoder config at byte offset {at}: {e}") from None
    expected = param_shapes(config)
    n = r.u32()
    if n != len(expected):
        raise CorruptFileError(f"{path}: {n} arrays, config implies {len(expected)}")
    params = {}
    for _ in range(n):
        at = r.pos
        name = r.text()
        rank = r.u32()
        dims = tuple(struct.unpack(f"<{rank}I", r.take(4 * rank)))
        if expected.get(name) != dims:
            raise CorruptFileError(f"{path}: array {name!r} at byte offset {at} has unexpected shape {dims}")
        size = int(np.prod(dims, dtype=np.int64))
        params[name] = np.frombuffer(r.take(4 * size), dtype="<f4").reshape(dims).astype(np.float32)
    r.done()
    return params, config
