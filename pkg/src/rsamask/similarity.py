"""Correlation primitives, predicted-RDM construction, and scoring.

Everything here is the *evaluation* path: correlations are exact (no variance
guard) and constant inputs raise :class:`ZeroVarianceError`. The training path
lives in :mod:`rsamask.encoder` and adds an epsilon guard instead.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import encoder
from .errors import DegenerateDataError, ShapeError, ZeroVarianceError
from .types import FeatureSet, Mask, RdmStack, upper_triangle


@dataclass
class ScoreReport:
    """Per-subject squared rank correlations plus the normalized summary.

    ``normalized_score_percent = 100 * mean(per_subject_r2) / noise_ceiling``.
    Values above 100% are possible and reported as-is.
    """

    per_subject_r2: list[float]
    noise_ceiling: float
    normalized_score_percent: float


def _as_vector_pair(x, y):
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ShapeError(f"length mismatch: {x.shape[0]} vs {y.shape[0]}")
    if x.shape[0] < 2:
        raise DegenerateDataError("correlation needs vectors of length >= 2")
    return x, y


def pearson(x, y) -> float:
    """Pearson product-moment correlation with 64-bit accumulation."""
    x, y = _as_vector_pair(x, y)
    xc = x - x.mean()
    yc = y - y.mean()
    sxx = float(xc @ xc)
    syy = float(yc @ yc)
    if sxx <= 0.0 or syy <= 0.0:
        raise ZeroVarianceError("pearson is undefined for a constant vector")
    return float((xc @ yc) / np.sqrt(sxx * syy))


def average_ranks(x) -> np.ndarray:
    """Fractional ranks (1-based); tied values receive their average rank."""
    x = np.asarray(x, dtype=np.float64).ravel()
    order = np.argsort(x, kind="stable")
    xs = x[order]
    group_start = np.r_[True, xs[1:] != xs[:-1]]
    group = np.cumsum(group_start) - 1
    counts = np.bincount(group)
    starts = np.r_[0, np.cumsum(counts)[:-1]]
    avg = starts + 0.5 * (counts - 1) + 1.0
    ranks = np.empty_like(x)
    ranks[order] = avg[group]
    return ranks


def spearman(x, y) -> float:
    """Spearman rank correlation; ties get average (mid-) ranks."""
    x, y = _as_vector_pair(x, y)
    rx = average_ranks(x)
    ry = average_ranks(y)
    try:
        return pearson(rx, ry)
    except ZeroVarianceError:
        raise ZeroVarianceError(
            "spearman is undefined: a vector is constant after ranking"
        ) from None


def predicted_rdm(features: FeatureSet, mask: Mask, subset=None) -> np.ndarray:
    """Dissimilarity matrix 1 - pearson(embedding_i, embedding_j).

    ``subset`` selects image indices (defaults to all). Output is float64,
    exactly symmetric, zero-diagonal, entries in [0, 2].
    """
    mask.validate_against(features)
    if subset is None:
        subset = range(features.n_images)
    subset = list(subset)
    if len(subset) < 2:
        raise DegenerateDataError("need at least 2 images to build an RDM")
    if features.embedding_length < 2:
        raise DegenerateDataError("embedding length must be >= 2")
    rows = np.stack([encoder.embed(features, mask, k) for k in subset])
    rows -= rows.mean(axis=1, keepdims=True)
    norms = np.sqrt(np.einsum("ij,ij->i", rows, rows))
    bad = np.where(norms == 0.0)[0]
    if bad.size:
        image_id = features.image_ids[subset[bad[0]]]
        raise ZeroVarianceError(
            f"image {image_id!r} has a constant masked embedding"
        )
    rows /= norms[:, None]
    d = 1.0 - rows @ rows.T
    d = 0.5 * (d + d.T)
    np.fill_diagonal(d, 0.0)
    return d


def noise_ceiling(target: RdmStack, slice_index: int = 0) -> float:
    """Leave-one-out ceiling: mean over subjects of the squared Spearman
    correlation between one subject's RDM and the mean RDM of the others."""
    mats = target.matrices(slice_index)
    s = mats.shape[0]
    if s < 2:
        raise DegenerateDataError("noise ceiling needs at least 2 subjects")
    uts = np.stack([upper_triangle(m).astype(np.float64) for m in mats])
    total = uts.sum(axis=0)
    acc = 0.0
    for k in range(s):
        others = (total - uts[k]) / (s - 1)
        acc += spearman(uts[k], others) ** 2
    return float(acc / s)


def score(
    predicted: np.ndarray,
    target: RdmStack,
    slice_index: int = 0,
    ceiling_override: float | None = None,
) -> ScoreReport:
    """Noise-normalized score of a predicted RDM against a subject stack.

    Requires ``predicted`` and ``target`` to share image ordering (callers
    join by image id before calling). ``ceiling_override`` substitutes the
    leave-one-out ceiling; mandatory for single-subject stacks.
    """
    predicted = np.asarray(predicted, dtype=np.float64)
    n = target.n_images
    if predicted.shape != (n, n):
        raise ShapeError(
            f"predicted RDM shape {predicted.shape} does not match the "
            f"target's {n} images"
        )
    pred_ut = upper_triangle(predicted)
    mats = target.matrices(slice_index)
    per_subject = [
        spearman(pred_ut, upper_triangle(m)) ** 2 for m in mats
    ]
    if ceiling_override is not None:
        ceiling = float(ceiling_override)
    else:
        ceiling = noise_ceiling(target, slice_index)
    if ceiling <= 0.0:
        raise DegenerateDataError("noise ceiling is not positive")
    normalized = 100.0 * float(np.mean(per_subject)) / ceiling
    return ScoreReport(
        per_subject_r2=[float(v) for v in per_subject],
        noise_ceiling=float(ceiling),
        normalized_score_percent=float(max(0.0, normalized)),
    )
