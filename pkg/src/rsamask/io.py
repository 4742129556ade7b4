"""File formats: AGF1 feature files, AGR1 RDM stacks, AGC1 text checkpoints.

All binary layouts are little-endian with explicit magic and version fields;
see FORMATS.md at the repository root for the normative byte layouts. Readers
bound-check every declared length against the remaining file size before
allocating, and reject NaN payloads, bad magic, truncation, and duplicate ids
with distinct error types.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DuplicateIdError,
    FormatError,
    MagicError,
    PayloadError,
    ShapeError,
    TruncationError,
    VersionError,
)
from .types import FeatureSet, Mask, MaskResolution, RdmStack, StageSpec

FEATURE_MAGIC = b"AGF1"
RDM_MAGIC = b"AGR1"
CHECKPOINT_FORMAT = "AGC1"
FORMAT_VERSION = 1

_MODALITY_CODES = {"fmri-evc": 0, "fmri-it": 1, "meg-early": 2, "meg-late": 3}
_MODALITY_NAMES = {v: k for k, v in _MODALITY_CODES.items()}
_OTHER_CODE = 4


class _Cursor:
    """Sequential reader over an in-memory file image with hard bounds."""

    def __init__(self, buf: bytes, label: str):
        self.buf = buf
        self.off = 0
        self.label = label

    @property
    def remaining(self) -> int:
        return len(self.buf) - self.off

    def take(self, n: int) -> bytes:
        if n < 0 or n > self.remaining:
            raise TruncationError(
                f"{self.label}: needed {n} bytes at offset {self.off}, "
                f"only {self.remaining} remain"
            )
        out = self.buf[self.off : self.off + n]
        self.off += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def f64(self) -> float:
        return struct.unpack("<d", self.take(8))[0]

    def string(self) -> str:
        n = self.u16()
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError as e:
            raise FormatError(f"{self.label}: malformed UTF-8 string") from e


def _pack_string(s: str) -> bytes:
    data = s.encode("utf-8")
    if len(data) > 0xFFFF:
        raise FormatError(f"string too long to encode ({len(data)} bytes)")
    return struct.pack("<H", len(data)) + data


def _read_id_table(cur: _Cursor, count: int) -> list[str]:
    # cheap lower bound before looping on an untrusted count
    if count * 2 > cur.remaining:
        raise TruncationError(
            f"{cur.label}: id table of {count} entries cannot fit in "
            f"{cur.remaining} bytes"
        )
    ids = [cur.string() for _ in range(count)]
    if len(set(ids)) != len(ids):
        raise DuplicateIdError(f"{cur.label}: duplicate image ids")
    return ids


# ---------------------------------------------------------------------------
# AGF1 feature files


def write_features(features: FeatureSet, path) -> None:
    with open(path, "wb") as f:
        f.write(FEATURE_MAGIC)
        f.write(struct.pack("<III", FORMAT_VERSION, features.n_images, len(features.stages)))
        for s in features.stages:
            f.write(_pack_string(s.name))
            f.write(struct.pack("<II", s.channels, s.spatial))
        for image_id in features.image_ids:
            f.write(_pack_string(image_id))
        for k in range(features.n_images):
            for arr in features.data:
                f.write(arr[k].astype("<f4").tobytes())


def read_features(path) -> FeatureSet:
    with open(path, "rb") as f:
        buf = f.read()
    cur = _Cursor(buf, f"feature file {path}")
    if cur.take(4) != FEATURE_MAGIC:
        raise MagicError(f"{cur.label}: bad magic, expected AGF1")
    version = cur.u32()
    if version != FORMAT_VERSION:
        raise VersionError(f"{cur.label}: unsupported version {version}")
    n_images = cur.u32()
    n_stages = cur.u32()
    if n_images < 1:
        raise FormatError(f"{cur.label}: image count must be >= 1")
    if n_stages < 1:
        raise FormatError(f"{cur.label}: stage count must be >= 1")
    if n_stages * 10 > cur.remaining:
        raise TruncationError(
            f"{cur.label}: {n_stages} stage headers cannot fit in "
            f"{cur.remaining} bytes"
        )
    stages = []
    for _ in range(n_stages):
        name = cur.string()
        channels = cur.u32()
        spatial = cur.u32()
        if channels < 1 or spatial < 1:
            raise FormatError(
                f"{cur.label}: stage {name!r} declares {channels}x{spatial}"
            )
        stages.append(StageSpec(name, channels, spatial))
    image_ids = _read_id_table(cur, n_images)
    per_image = sum(s.size for s in stages)
    expected = n_images * per_image * 4
    if cur.remaining < expected:
        raise TruncationError(
            f"{cur.label}: payload needs {expected} bytes, {cur.remaining} remain"
        )
    if cur.remaining > expected:
        raise FormatError(
            f"{cur.label}: {cur.remaining - expected} trailing bytes after payload"
        )
    payload = np.frombuffer(cur.take(expected), dtype="<f4").reshape(
        n_images, per_image
    )
    if not np.all(np.isfinite(payload)):
        raise PayloadError(f"{cur.label}: payload contains non-finite values")
    data = []
    off = 0
    for s in stages:
        block = payload[:, off : off + s.size].reshape(n_images, s.channels, s.spatial)
        data.append(np.ascontiguousarray(block))
        off += s.size
    return FeatureSet(image_ids, stages, data)


# ---------------------------------------------------------------------------
# AGR1 RDM stacks


def write_rdms(stack: RdmStack, path) -> None:
    code = _MODALITY_CODES.get(stack.modality_tag, _OTHER_CODE)
    with open(path, "wb") as f:
        f.write(RDM_MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(struct.pack("<B", code))
        if code == _OTHER_CODE:
            f.write(_pack_string(stack.modality_tag))
        f.write(
            struct.pack("<III", stack.subjects, stack.n_images, stack.n_slices)
        )
        for image_id in stack.image_ids:
            f.write(_pack_string(image_id))
        for timestamp, mats in stack.slices:
            f.write(struct.pack("<d", np.nan if timestamp is None else timestamp))
            f.write(mats.astype("<f4").tobytes())


def read_rdms(path) -> RdmStack:
    with open(path, "rb") as f:
        buf = f.read()
    cur = _Cursor(buf, f"RDM file {path}")
    if cur.take(4) != RDM_MAGIC:
        raise MagicError(f"{cur.label}: bad magic, expected AGR1")
    version = cur.u32()
    if version != FORMAT_VERSION:
        raise VersionError(f"{cur.label}: unsupported version {version}")
    code = cur.u8()
    if code in _MODALITY_NAMES:
        tag = _MODALITY_NAMES[code]
    elif code == _OTHER_CODE:
        tag = cur.string()
    else:
        raise FormatError(f"{cur.label}: unknown modality code {code}")
    subjects = cur.u32()
    n_images = cur.u32()
    n_slices = cur.u32()
    if subjects < 1 or n_images < 1 or n_slices < 1:
        raise FormatError(
            f"{cur.label}: counts must be >= 1 "
            f"(subjects={subjects}, images={n_images}, slices={n_slices})"
        )
    image_ids = _read_id_table(cur, n_images)
    matrix_bytes = subjects * n_images * n_images * 4
    expected = n_slices * (8 + matrix_bytes)
    if cur.remaining < expected:
        raise TruncationError(
            f"{cur.label}: slices need {expected} bytes, {cur.remaining} remain"
        )
    if cur.remaining > expected:
        raise FormatError(
            f"{cur.label}: {cur.remaining - expected} trailing bytes after slices"
        )
    slices = []
    for _ in range(n_slices):
        ts = cur.f64()
        mats = np.frombuffer(cur.take(matrix_bytes), dtype="<f4").reshape(
            subjects, n_images, n_images
        )
        if not np.all(np.isfinite(mats)):
            raise PayloadError(f"{cur.label}: matrix payload has non-finite values")
        slices.append((None if np.isnan(ts) else ts, mats.copy()))
    return RdmStack(image_ids, tag, slices)


# ---------------------------------------------------------------------------
# AGC1 checkpoints (text)


@dataclass
class Checkpoint:
    """Serialized mask, optimizer state, and training metadata."""

    mask: Mask
    adam_m: list[np.ndarray]
    adam_v: list[np.ndarray]
    step_count: int
    config: dict = field(default_factory=dict)
    fingerprint: str = ""
    version: int = FORMAT_VERSION


def _f32_str(x) -> str:
    # shortest decimal that round-trips through float64 back to this float32
    return repr(float(np.float32(x)))


def _f64_str(x) -> str:
    return repr(float(x))


def _encode_checkpoint(ckpt: Checkpoint) -> str:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": ckpt.version,
        "resolution": ckpt.mask.resolution.value,
        "stages": [
            {"name": s.name, "channels": s.channels, "spatial": s.spatial}
            for s in ckpt.mask.stages
        ],
        "coefficients": [[_f32_str(v) for v in c] for c in ckpt.mask.coefficients],
        "adam_m": [[_f64_str(v) for v in a] for a in ckpt.adam_m],
        "adam_v": [[_f64_str(v) for v in a] for a in ckpt.adam_v],
        "step_count": ckpt.step_count,
        "config": ckpt.config,
        "fingerprint": ckpt.fingerprint,
    }
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(_encode_checkpoint(ckpt))


def load_checkpoint(path, features: FeatureSet | None = None) -> Checkpoint:
    """Load a checkpoint; when ``features`` is given, validate that the mask
    fits its stage layout."""
    with open(path, "r", encoding="utf-8") as f:
        text = f.read()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise FormatError(f"checkpoint {path}: not valid JSON: {e}") from e
    if not isinstance(doc, dict) or doc.get("format") != CHECKPOINT_FORMAT:
        raise MagicError(f"checkpoint {path}: missing AGC1 format marker")
    if doc.get("version") != FORMAT_VERSION:
        raise VersionError(
            f"checkpoint {path}: unsupported version {doc.get('version')}"
        )
    try:
        stages = [
            StageSpec(s["name"], int(s["channels"]), int(s["spatial"]))
            for s in doc["stages"]
        ]
        resolution = MaskResolution(doc["resolution"])
        coeffs = [
            np.array([np.float32(float(v)) for v in c], dtype=np.float32)
            for c in doc["coefficients"]
        ]
        mask = Mask(resolution, stages, coeffs)
        adam_m = [
            np.array([float(v) for v in a], dtype=np.float64) for a in doc["adam_m"]
        ]
        adam_v = [
            np.array([float(v) for v in a], dtype=np.float64) for a in doc["adam_v"]
        ]
        ckpt = Checkpoint(
            mask=mask,
            adam_m=adam_m,
            adam_v=adam_v,
            step_count=int(doc["step_count"]),
            config=doc.get("config", {}),
            fingerprint=doc.get("fingerprint", ""),
        )
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"checkpoint {path}: malformed document: {e}") from e
    for arrs in (ckpt.adam_m, ckpt.adam_v):
        if len(arrs) != len(mask.coefficients) or any(
            a.shape != c.shape for a, c in zip(arrs, mask.coefficients)
        ):
            raise ShapeError(f"checkpoint {path}: optimizer state shape mismatch")
    if features is not None:
        mask.validate_against(features)
    return ckpt


def fingerprint_paths(paths) -> str:
    """Content hash of the input files, in the given order."""
    h = hashlib.sha256()
    for p in paths:
        with open(p, "rb") as f:
            data = f.read()
        h.update(struct.pack("<Q", len(data)))
        h.update(data)
    return "sha256:" + h.hexdigest()
