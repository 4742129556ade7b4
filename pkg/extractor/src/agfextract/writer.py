"""Standalone AGF1 writer.

Implements the normative byte layout (see FORMATS.md at the repository root)
without depending on the consumer package: little-endian, magic "AGF1",
version u32, image/stage counts u32, per-stage u16-length-prefixed UTF-8 name
plus channels/spatial u32, u16-length-prefixed image-id table, then float32
payload ordered image-major, stage, channel, spatial.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"AGF1"
VERSION = 1


def _pack_string(s: str) -> bytes:
    data = s.encode("utf-8")
    if len(data) > 0xFFFF:
        raise ValueError(f"string too long to encode ({len(data)} bytes)")
    return struct.pack("<H", len(data)) + data


def write_agf1(path, image_ids, stages, rows) -> None:
    """Write one AGF1 file.

    ``stages`` is a list of (name, channels, spatial); ``rows`` is a list,
    one entry per image, of per-stage float32 arrays shaped (channels,
    spatial) in stage order.
    """
    image_ids = list(image_ids)
    if len(set(image_ids)) != len(image_ids):
        raise ValueError("image ids must be unique")
    if len(rows) != len(image_ids):
        raise ValueError("one row of stage arrays required per image id")
    for name, channels, spatial in stages:
        if channels < 1 or spatial < 1:
            raise ValueError(f"stage {name!r}: channels and spatial must be >= 1")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<III", VERSION, len(image_ids), len(stages)))
        for name, channels, spatial in stages:
            f.write(_pack_string(name))
            f.write(struct.pack("<II", channels, spatial))
        for image_id in image_ids:
            f.write(_pack_string(image_id))
        for row in rows:
            if len(row) != len(stages):
                raise ValueError("stage array count mismatch")
            for (name, channels, spatial), arr in zip(stages, row):
                arr = np.asarray(arr, dtype=np.float32)
                if arr.shape != (channels, spatial):
                    raise ValueError(
                        f"stage {name!r}: expected {(channels, spatial)}, "
                        f"got {arr.shape}"
                    )
                if not np.all(np.isfinite(arr)):
                    raise ValueError(f"stage {name!r}: non-finite activations")
                f.write(arr.astype("<f4").tobytes())
