"""Core domain types: stage-wise feature sets, masks, RDM stacks, pair indexing.

Conventions shared by every module:

* numeric storage is float32, accumulations run in float64;
* RDM vectorization is the row-major upper triangle (``i < j``), identical
  everywhere so losses, scores, and files agree bit-exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import (
    DataError,
    DegenerateDataError,
    DuplicateIdError,
    ShapeError,
    ValidationError,
)

SYMMETRY_TOL = 1e-5
DIAGONAL_TOL = 1e-5

#: Canonical modality tags. Any other non-empty string is an "other" tag.
FMRI_TAGS = ("fmri-evc", "fmri-it")
MEG_TAGS = ("meg-early", "meg-late")


class MaskResolution(Enum):
    """Granularity of the learned multiplicative mask."""

    PER_STAGE = "per-stage"
    PER_CHANNEL = "per-channel"
    PER_FEATURE = "per-feature"


@dataclass(frozen=True)
class StageSpec:
    """One tracked network stage: a name, its channel count, and the
    flattened spatial extent of each channel."""

    name: str
    channels: int
    spatial: int

    def __post_init__(self):
        if self.channels < 1 or self.spatial < 1:
            raise ValidationError(
                f"stage {self.name!r}: channels and spatial must be >= 1, "
                f"got {self.channels}x{self.spatial}"
            )

    @property
    def size(self) -> int:
        return self.channels * self.spatial


@dataclass(frozen=True, order=True)
class PairIndex:
    """An unordered image pair, stored as i < j (upper triangle)."""

    i: int
    j: int

    def __post_init__(self):
        if not 0 <= self.i < self.j:
            raise ValidationError(f"pair requires 0 <= i < j, got ({self.i}, {self.j})")


def pair_count(n: int) -> int:
    """Number of unordered image pairs for ``n`` images."""
    if n < 2:
        raise DegenerateDataError(f"need at least 2 images to form pairs, got {n}")
    return n * (n - 1) // 2


def upper_triangle(matrix: np.ndarray) -> np.ndarray:
    """Row-major strict upper triangle of a square matrix as a flat vector.

    This ordering ((0,1), (0,2), ..., (0,n-1), (1,2), ...) is the canonical
    RDM vectorization used by every module.
    """
    m = np.asarray(matrix)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ShapeError(f"expected a square matrix, got shape {m.shape}")
    n = m.shape[0]
    if n < 2:
        raise DegenerateDataError(f"need at least a 2x2 matrix, got {n}x{n}")
    iu, ju = np.triu_indices(n, k=1)
    return m[iu, ju]


def from_upper_triangle(values: np.ndarray, n: int) -> np.ndarray:
    """Rebuild the symmetric zero-diagonal matrix from its upper triangle."""
    values = np.asarray(values)
    if values.shape != (pair_count(n),):
        raise ShapeError(
            f"expected {pair_count(n)} upper-triangle values for n={n}, "
            f"got shape {values.shape}"
        )
    out = np.zeros((n, n), dtype=values.dtype)
    iu, ju = np.triu_indices(n, k=1)
    out[iu, ju] = values
    out[ju, iu] = values
    return out


class FeatureSet:
    """Frozen per-image, per-stage activation arrays.

    ``data[s]`` has shape ``(n_images, channels(s), spatial(s))`` in float32.
    Instances are immutable once constructed and safe to share across workers.
    """

    def __init__(self, image_ids, stages, data):
        self.image_ids: list[str] = list(image_ids)
        self.stages: list[StageSpec] = list(stages)
        if len(set(self.image_ids)) != len(self.image_ids):
            raise DuplicateIdError("feature set image ids are not unique")
        if len({s.name for s in self.stages}) != len(self.stages):
            raise ValidationError("stage names are not unique")
        if len(data) != len(self.stages):
            raise ShapeError(
                f"expected {len(self.stages)} stage arrays, got {len(data)}"
            )
        n = len(self.image_ids)
        self.data: list[np.ndarray] = []
        for spec, arr in zip(self.stages, data):
            # own a copy so freezing it cannot affect caller-held buffers
            arr = np.array(arr, dtype=np.float32)
            if arr.shape != (n, spec.channels, spec.spatial):
                raise ShapeError(
                    f"stage {spec.name!r}: expected shape "
                    f"{(n, spec.channels, spec.spatial)}, got {arr.shape}"
                )
            if not np.all(np.isfinite(arr)):
                raise ValidationError(f"stage {spec.name!r} has non-finite values")
            arr.flags.writeable = False
            self.data.append(arr)
        self._index = {img: k for k, img in enumerate(self.image_ids)}

    @property
    def n_images(self) -> int:
        return len(self.image_ids)

    @property
    def embedding_length(self) -> int:
        return sum(s.size for s in self.stages)

    def has_image_id(self, image_id: str) -> bool:
        return image_id in self._index

    def index_of(self, image_id: str) -> int:
        try:
            return self._index[image_id]
        except KeyError:
            raise DataError(f"unknown image id {image_id!r}") from None

    def subset(self, indices) -> "FeatureSet":
        """New FeatureSet restricted to ``indices`` (in the given order)."""
        indices = list(indices)
        ids = [self.image_ids[k] for k in indices]
        data = [arr[indices] for arr in self.data]
        return FeatureSet(ids, self.stages, data)

    def subset_by_ids(self, image_ids) -> "FeatureSet":
        return self.subset([self.index_of(i) for i in image_ids])

    def flat(self, image: int) -> np.ndarray:
        """Raw concatenated (unmasked) feature row of one image, float32."""
        return np.concatenate([arr[image].ravel() for arr in self.data])


class Mask:
    """Learnable multiplicative coefficients, one flat array per stage.

    Array lengths per stage: 1 (PER_STAGE), channels (PER_CHANNEL), or
    channels*spatial (PER_FEATURE). The coefficients are the model's only
    parameters and the only mutable state in the package.
    """

    def __init__(self, resolution: MaskResolution, stages, coefficients):
        self.resolution = resolution
        self.stages: list[StageSpec] = list(stages)
        if len(coefficients) != len(self.stages):
            raise ShapeError(
                f"expected {len(self.stages)} coefficient arrays, "
                f"got {len(coefficients)}"
            )
        self.coefficients: list[np.ndarray] = []
        for spec, arr in zip(self.stages, coefficients):
            arr = np.array(arr, dtype=np.float32).reshape(-1)
            want = coefficient_length(spec, resolution)
            if arr.shape != (want,):
                raise ShapeError(
                    f"stage {spec.name!r}: expected {want} coefficients for "
                    f"{resolution.value}, got {arr.shape[0]}"
                )
            if not np.all(np.isfinite(arr)):
                raise ValidationError(f"stage {spec.name!r} mask has non-finite values")
            self.coefficients.append(arr)

    @classmethod
    def identity(cls, stages, resolution: MaskResolution) -> "Mask":
        """All-ones mask; composing it with any FeatureSet is a no-op."""
        coeffs = [
            np.ones(coefficient_length(s, resolution), dtype=np.float32)
            for s in stages
        ]
        return cls(resolution, stages, coeffs)

    @property
    def n_coefficients(self) -> int:
        return sum(c.shape[0] for c in self.coefficients)

    def copy(self) -> "Mask":
        return Mask(self.resolution, self.stages, [c.copy() for c in self.coefficients])

    def scaled(self, factor: float) -> "Mask":
        return Mask(
            self.resolution,
            self.stages,
            [c * np.float32(factor) for c in self.coefficients],
        )

    def validate_against(self, features: FeatureSet) -> None:
        """Raise ShapeError unless this mask fits the feature set's stages."""
        if len(self.stages) != len(features.stages):
            raise ShapeError(
                f"mask has {len(self.stages)} stages, features have "
                f"{len(features.stages)}"
            )
        for ms, fs in zip(self.stages, features.stages):
            if (ms.name, ms.channels, ms.spatial) != (fs.name, fs.channels, fs.spatial):
                raise ShapeError(f"stage mismatch: mask {ms} vs features {fs}")


def coefficient_length(spec: StageSpec, resolution: MaskResolution) -> int:
    if resolution is MaskResolution.PER_STAGE:
        return 1
    if resolution is MaskResolution.PER_CHANNEL:
        return spec.channels
    return spec.channels * spec.spatial


class RdmStack:
    """Per-subject dissimilarity matrices, optionally time-resolved.

    ``slices`` is a list of ``(timestamp, matrices)`` where ``matrices`` has
    shape ``(subjects, n, n)`` in float32. fMRI stacks carry exactly one
    untimestamped slice; MEG stacks carry one or more timestamped slices with
    strictly increasing timestamps. Other tags may use either layout.
    """

    def __init__(self, image_ids, modality_tag: str, slices):
        self.image_ids: list[str] = list(image_ids)
        self.modality_tag = str(modality_tag)
        if len(set(self.image_ids)) != len(self.image_ids):
            raise DuplicateIdError("RDM stack image ids are not unique")
        if not self.modality_tag:
            raise ValidationError("modality tag must be a non-empty string")
        if not slices:
            raise ValidationError("RDM stack needs at least one slice")
        n = len(self.image_ids)
        subjects = None
        self.slices: list[tuple[float | None, np.ndarray]] = []
        for k, (timestamp, mats) in enumerate(slices):
            mats = np.array(mats, dtype=np.float32)
            if mats.ndim != 3 or mats.shape[1] != n or mats.shape[2] != n:
                raise ShapeError(
                    f"slice {k}: expected (subjects, {n}, {n}), got {mats.shape}"
                )
            if subjects is None:
                subjects = mats.shape[0]
            elif mats.shape[0] != subjects:
                raise ShapeError("slices disagree on the subject count")
            _validate_rdm_matrices(mats, k)
            mats.flags.writeable = False
            ts = None if timestamp is None else float(timestamp)
            self.slices.append((ts, mats))
        if subjects < 1:
            raise ValidationError("subject count must be >= 1")
        self.subjects = subjects
        self._validate_timestamps()

    def _validate_timestamps(self):
        timestamps = [t for t, _ in self.slices]
        if self.is_fmri:
            if len(self.slices) != 1 or timestamps[0] is not None:
                raise ValidationError(
                    "fMRI stacks must hold exactly one untimestamped slice"
                )
        elif self.is_meg:
            if any(t is None for t in timestamps):
                raise ValidationError("MEG slices must all carry timestamps")
            if any(b <= a for a, b in zip(timestamps, timestamps[1:])):
                raise ValidationError("MEG timestamps must be strictly increasing")
        else:
            # "other" tags: either one untimestamped slice or all timestamped.
            if any(t is None for t in timestamps):
                if len(self.slices) != 1:
                    raise ValidationError(
                        "untimestamped stacks must hold exactly one slice"
                    )
            elif any(b <= a for a, b in zip(timestamps, timestamps[1:])):
                raise ValidationError("timestamps must be strictly increasing")

    @property
    def is_fmri(self) -> bool:
        return self.modality_tag in FMRI_TAGS

    @property
    def is_meg(self) -> bool:
        return self.modality_tag in MEG_TAGS

    @property
    def is_timestamped(self) -> bool:
        return self.slices[0][0] is not None

    @property
    def n_images(self) -> int:
        return len(self.image_ids)

    @property
    def n_slices(self) -> int:
        return len(self.slices)

    def matrices(self, slice_index: int = 0) -> np.ndarray:
        return self.slices[slice_index][1]

    def timestamps(self) -> list[float | None]:
        return [t for t, _ in self.slices]

    def midpoint_slice(self) -> int:
        """Index of the slice nearest the midpoint of the recorded interval;
        0 for untimestamped stacks."""
        if not self.is_timestamped:
            return 0
        ts = np.array([t for t, _ in self.slices], dtype=np.float64)
        mid = 0.5 * (ts[0] + ts[-1])
        return int(np.argmin(np.abs(ts - mid)))

    def nearest_slice(self, time: float) -> int:
        if not self.is_timestamped:
            raise ValidationError("stack has no timestamps to search")
        ts = np.array([t for t, _ in self.slices], dtype=np.float64)
        return int(np.argmin(np.abs(ts - float(time))))


def _validate_rdm_matrices(mats: np.ndarray, slice_index: int) -> None:
    if not np.all(np.isfinite(mats)):
        raise ValidationError(f"slice {slice_index}: non-finite RDM values")
    asym = np.abs(mats - np.transpose(mats, (0, 2, 1)))
    worst = np.unravel_index(np.argmax(asym), asym.shape)
    if asym[worst] > SYMMETRY_TOL:
        s, i, j = worst
        raise ValidationError(
            f"slice {slice_index}, subject {s}: matrix asymmetric at entry "
            f"({i}, {j}): |{mats[s, i, j]!r} - {mats[s, j, i]!r}| > {SYMMETRY_TOL}"
        )
    diags = np.abs(np.diagonal(mats, axis1=1, axis2=2))
    if diags.max() > DIAGONAL_TOL:
        s, i = np.unravel_index(np.argmax(diags), diags.shape)
        raise ValidationError(
            f"slice {slice_index}, subject {s}: nonzero diagonal at ({i}, {i}): "
            f"{mats[s, i, i]!r}"
        )
