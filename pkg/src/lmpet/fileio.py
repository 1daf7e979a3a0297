"""Binary list-mode and image files (little-endian).

List-mode (``.lmev``)::

    b"LMEV"  u32 version=1  u32 n  u32 reserved
    n x (u32 c1, u32 c2, u32 tof_bin)

Image (``.img2``)::

    b"IMG2"  u32 W  u32 H  f64 pixel_size_mm
    W*H x f64, row-major (j = y*W + x)
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .projector import EventList, Image2D

LMEV_MAGIC = b"LMEV"
LMEV_VERSION = 1
IMG2_MAGIC = b"IMG2"
_LMEV_HEADER = struct.Struct("<4sIII")
_IMG2_HEADER = struct.Struct("<4sIId")


def write_events(path, events: EventList) -> None:
    records = np.stack([events.c1, events.c2, events.tof], axis=1).astype("<u4")
    with open(path, "wb") as fh:
        fh.write(_LMEV_HEADER.pack(LMEV_MAGIC, LMEV_VERSION, events.n, 0))
        fh.write(records.tobytes())


def read_events(path) -> EventList:
    data = Path(path).read_bytes()
    if len(data) < _LMEV_HEADER.size:
        raise ValueError(f"{path}: truncated list-mode header")
    magic, version, n, _ = _LMEV_HEADER.unpack_from(data)
    if magic != LMEV_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}, expected {LMEV_MAGIC!r}")
    if version != LMEV_VERSION:
        raise ValueError(f"{path}: unsupported list-mode version {version}")
    expected = _LMEV_HEADER.size + 12 * n
    if len(data) != expected:
        raise ValueError(f"{path}: expected {expected} bytes for {n} events, got {len(data)}")
    rec = np.frombuffer(data, dtype="<u4", offset=_LMEV_HEADER.size).reshape(n, 3)
    return EventList(rec[:, 0], rec[:, 1], rec[:, 2])


def write_image(path, image: Image2D) -> None:
    with open(path, "wb") as fh:
        fh.write(_IMG2_HEADER.pack(IMG2_MAGIC, image.width, image.height, image.pixel_size))
        fh.write(np.ascontiguousarray(image.values, dtype="<f8").tobytes())


def read_image(path) -> Image2D:
    data = Path(path).read_bytes()
    if len(data) < _IMG2_HEADER.size:
        raise ValueError(f"{path}: truncated image header")
    magic, w, h, ps = _IMG2_HEADER.unpack_from(data)
    if magic != IMG2_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}, expected {IMG2_MAGIC!r}")
    expected = _IMG2_HEADER.size + 8 * w * h
    if len(data) != expected:
        raise ValueError(f"{path}: expected {expected} bytes for {w}x{h} image, got {len(data)}")
    values = np.frombuffer(data, dtype="<f8", offset=_IMG2_HEADER.size).reshape(h, w)
    return Image2D(values.astype(np.float64), ps)
