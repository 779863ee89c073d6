"""Little-endian record I/O shared by the checkpoint, dataset and feature formats."""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np


class FormatError(ValueError):
    """A binary file is malformed; the message names the byte offset."""


class VersionError(FormatError):
    pass


class Reader:
    def __init__(self, buf: bytes, what: str):
        self.buf = buf
        self.pos = 0
        self.what = what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(
                f"{self.what}: truncated at offset {self.pos} (need {n} bytes, {len(self.buf) - self.pos} left)")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        fmt = "<" + fmt
        vals = struct.unpack(fmt, self.take(struct.calcsize(fmt)))
        return vals[0] if len(vals) == 1 else vals

    def array(self, dtype: str, count: int) -> np.ndarray:
        dt = np.dtype(dtype).newbyteorder("<")
        return np.frombuffer(self.take(dt.itemsize * count), dtype=dt, count=count)

    def header(self, magic: bytes, version: int) -> None:
        got = self.take(len(magic))
        if got != magic:
            raise FormatError(f"{self.what}: bad magic {got!r} at offset 0, expected {magic!r}")
        at = self.pos
        v = self.unpack("I")
        if v != version:
            raise VersionError(f"{self.what}: unsupported version {v} at offset {at} (reader handles {version})")

    def finish(self) -> None:
        if self.pos != len(self.buf):
            raise FormatError(f"{self.what}: {len(self.buf) - self.pos} trailing bytes at offset {self.pos}")


def write_atomic(path: str | os.PathLike, payload: bytes) -> None:
    """Write via a temp file in the target directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
