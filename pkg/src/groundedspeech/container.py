"""Binary container for named float32 arrays (checkpoints, feature archives).

Layout, all integers little-endian unsigned 64-bit:

    magic "GSR1"
    entry count
    per entry: name length, UTF-8 name, rank, one extent per rank axis,
               row-major float32 payload

Entries are written in sorted-name order so identical contents produce
identical bytes.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"GSR1"
_U64 = struct.Struct("<Q")


class ContainerFormatError(ValueError):
    """File is not a well-formed container."""


def write_container(path, arrays: dict) -> None:
    """Write ``name -> array`` to ``path``; arrays are stored as float32."""
    items = sorted(arrays.items())
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(_U64.pack(len(items)))
        for name, arr in items:
            a = np.ascontiguousarray(np.asarray(arr, dtype=np.float32))
            encoded = name.encode("utf-8")
            fh.write(_U64.pack(len(encoded)))
            fh.write(encoded)
            fh.write(_U64.pack(a.ndim))
            for extent in a.shape:
                fh.write(_U64.pack(extent))
            fh.write(a.tobytes(order="C"))


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise ContainerFormatError(f"truncated container: expected {n} bytes for {what}")
    return buf


def read_container(path) -> dict:
    """Read every entry of the container at ``path`` as ``name -> float32 array``."""
    out = {}
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != MAGIC:
            raise ContainerFormatError(f"{path}: bad magic, not a {MAGIC.decode()} container")
        (count,) = _U64.unpack(_read_exact(fh, 8, "entry count"))
        for _ in range(count):
            (name_len,) = _U64.unpack(_read_exact(fh, 8, "name length"))
            name = _read_exact(fh, name_len, "name").decode("utf-8")
            (rank,) = _U64.unpack(_read_exact(fh, 8, "rank"))
            shape = tuple(_U64.unpack(_read_exact(fh, 8, "extent"))[0] for _ in range(rank))
            n_vals = int(np.prod(shape)) if shape else 1
            payload = _read_exact(fh, 4 * n_vals, f"payload of {name!r}")
            out[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
    return out


def read_entry_names(path) -> list:
    """List entry names without loading payloads."""
    names = []
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != MAGIC:
            raise ContainerFormatError(f"{path}: bad magic, not a {MAGIC.decode()} container")
        (count,) = _U64.unpack(_read_exact(fh, 8, "entry count"))
        for _ in range(count):
            (name_len,) = _U64.unpack(_read_exact(fh, 8, "name length"))
            names.append(_read_exact(fh, name_len, "name").decode("utf-8"))
            (rank,) = _U64.unpack(_read_exact(fh, 8, "rank"))
            n_vals = 1
            for _ in range(rank):
                (extent,) = _U64.unpack(_read_exact(fh, 8, "extent"))
                n_vals *= extent
            fh.seek(4 * n_vals, 1)
    return names


def container_exists_with_entry(path, name: str) -> bool:
    p = Path(path)
    if not p.is_file():
        return False
    try:
        return name in read_entry_names(p)
    except (ContainerFormatError, OSError):
        return False
