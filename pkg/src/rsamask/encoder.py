"""Differentiable forward model: mask -> embedding -> pairwise dissimilarity.

The dissimilarity of an image pair is ``1 - cov/sqrt((var_x+eps)(var_y+eps))``
over the masked, concatenated stage features. The gradient with respect to the
mask coefficients is the closed-form differential of that expression,
accumulated over each coefficient's broadcast group; there is no autodiff.

The epsilon guard (default 1e-12) keeps training gradients finite when a mask
transiently zeroes an embedding. Evaluation paths in :mod:`rsamask.similarity`
use exact Pearson and raise instead.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .types import (
    FeatureSet,
    Mask,
    MaskResolution,
    PairIndex,
    StageSpec,
    coefficient_length,
)

TRAINING_EPS = 1e-12


@dataclass
class PairGradient:
    """d(dissimilarity)/d(coefficient), same per-stage layout as the mask."""

    coefficients: list[np.ndarray]

    def flat(self) -> np.ndarray:
        return np.concatenate(self.coefficients)


def expand_stage(coeffs: np.ndarray, spec: StageSpec, resolution: MaskResolution) -> np.ndarray:
    """Broadcast one stage's coefficients to its flat feature extent."""
    coeffs = np.asarray(coeffs, dtype=np.float64).reshape(-1)
    if coeffs.shape[0] != coefficient_length(spec, resolution):
        raise ShapeError(
            f"stage {spec.name!r}: got {coeffs.shape[0]} coefficients for "
            f"{resolution.value}"
        )
    if resolution is MaskResolution.PER_STAGE:
        return np.full(spec.size, coeffs[0])
    if resolution is MaskResolution.PER_CHANNEL:
        return np.repeat(coeffs, spec.spatial)
    return coeffs


def reduce_stage(flat_grad: np.ndarray, spec: StageSpec, resolution: MaskResolution) -> np.ndarray:
    """Sum a flat per-feature gradient over each coefficient's broadcast group."""
    if resolution is MaskResolution.PER_STAGE:
        return np.array([flat_grad.sum()])
    if resolution is MaskResolution.PER_CHANNEL:
        return flat_grad.reshape(spec.channels, spec.spatial).sum(axis=1)
    return flat_grad.copy()


def expand_mask(mask: Mask) -> np.ndarray:
    """Full-length float64 multiplier vector for a mask."""
    return np.concatenate(
        [
            expand_stage(c, s, mask.resolution)
            for c, s in zip(mask.coefficients, mask.stages)
        ]
    )


def embed(features: FeatureSet, mask: Mask, image: int) -> np.ndarray:
    """Masked concatenated embedding of one image, float64, length L."""
    mask.validate_against(features)
    return expand_mask(mask) * features.flat(image).astype(np.float64)


def _pair_vectors(features, coeff_arrays, resolution, pair):
    multiplier = np.concatenate(
        [
            expand_stage(c, s, resolution)
            for c, s in zip(coeff_arrays, features.stages)
        ]
    )
    fa = features.flat(pair.i).astype(np.float64)
    fb = features.flat(pair.j).astype(np.float64)
    return multiplier * fa, multiplier * fb, fa, fb


def _guarded_stats(x, y, eps):
    xc = x - x.mean()
    yc = y - y.mean()
    sxy = float(xc @ yc)
    sxx = float(xc @ xc)
    syy = float(yc @ yc)
    denom = np.sqrt((sxx + eps) * (syy + eps))
    return xc, yc, sxy, sxx, syy, denom


def dissimilarity_at(
    features: FeatureSet,
    coeff_arrays,
    resolution: MaskResolution,
    pair: PairIndex,
    eps: float = TRAINING_EPS,
) -> float:
    """Guarded pair dissimilarity at raw (possibly float64) coefficients.

    This is the primal the finite-difference check perturbs; it never rounds
    the coefficients to float32.
    """
    x, y, _, _ = _pair_vectors(features, coeff_arrays, resolution, pair)
    _, _, sxy, _, _, denom = _guarded_stats(x, y, eps)
    return 1.0 - sxy / denom


def pair_dissimilarity(
    features: FeatureSet, mask: Mask, pair: PairIndex, eps: float = TRAINING_EPS
) -> float:
    mask.validate_against(features)
    return dissimilarity_at(features, mask.coefficients, mask.resolution, pair, eps)


def pair_gradient(
    features: FeatureSet, mask: Mask, pair: PairIndex, eps: float = TRAINING_EPS
) -> tuple[float, PairGradient]:
    """Dissimilarity and its analytic gradient w.r.t. every mask coefficient."""
    mask.validate_against(features)
    x, y, fa, fb = _pair_vectors(features, mask.coefficients, mask.resolution, pair)
    xc, yc, sxy, sxx, syy, denom = _guarded_stats(x, y, eps)
    d = 1.0 - sxy / denom
    # d(d)/dx_k = -(yc_k - sxy/(sxx+eps) * xc_k)/denom; centering drops out
    # because sum(yc) = 0.
    gx = -(yc - (sxy / (sxx + eps)) * xc) / denom
    gy = -(xc - (sxy / (syy + eps)) * yc) / denom
    flat = gx * fa + gy * fb
    grads = []
    off = 0
    for spec in features.stages:
        grads.append(reduce_stage(flat[off : off + spec.size], spec, mask.resolution))
        off += spec.size
    return d, PairGradient(grads)


@dataclass
class GradCheckReport:
    """Outcome of the finite-difference gradient suite."""

    instances: int
    max_rel_error: float
    tolerance: float
    failures: list[int]
    rel_errors: list[float]

    @property
    def passed(self) -> bool:
        return not self.failures


def _random_instance(rng, resolution):
    n_stages = int(rng.integers(2, 5))
    stages = [
        StageSpec(
            name=f"layer{k}",
            channels=int(rng.integers(1, 9)),
            spatial=int(rng.integers(1, 6)),
        )
        for k in range(n_stages)
    ]
    data = [
        rng.standard_normal((2, s.channels, s.spatial)).astype(np.float32)
        for s in stages
    ]
    features = FeatureSet(["a", "b"], stages, data)
    coeffs = [
        rng.normal(1.0, 0.75, coefficient_length(s, resolution)).astype(np.float32)
        for s in stages
    ]
    mask = Mask(resolution, stages, coeffs)
    return features, mask


def finite_difference_gradient(features, mask, pair, eps=TRAINING_EPS):
    """Central differences with per-coefficient step 1e-3 * (1 + |beta|),
    evaluated in float64 throughout."""
    base = [c.astype(np.float64) for c in mask.coefficients]
    grads = []
    for s_idx in range(len(base)):
        g = np.zeros_like(base[s_idx])
        for c_idx in range(base[s_idx].shape[0]):
            h = 1e-3 * (1.0 + abs(base[s_idx][c_idx]))
            plus = [c.copy() for c in base]
            minus = [c.copy() for c in base]
            plus[s_idx][c_idx] += h
            minus[s_idx][c_idx] -= h
            dp = dissimilarity_at(features, plus, mask.resolution, pair, eps)
            dm = dissimilarity_at(features, minus, mask.resolution, pair, eps)
            g[c_idx] = (dp - dm) / (2.0 * h)
        grads.append(g)
    return grads


def run_gradient_check(
    seed: int = 0,
    instances: int = 100,
    tolerance: float = 1e-4,
    corrupt: bool = False,
) -> GradCheckReport:
    """Compare analytic and central finite-difference gradients on random
    instances spanning all three mask resolutions.

    The relative error of an instance is ``max|analytic - fd|`` over
    ``max(max|analytic|, max|fd|, 1e-12)``. ``corrupt=True`` perturbs one
    analytic component per instance (negative control for the harness).
    """
    rng = np.random.default_rng(seed)
    resolutions = list(MaskResolution)
    failures = []
    rel_errors = []
    pair = PairIndex(0, 1)
    for k in range(instances):
        features, mask = _random_instance(rng, resolutions[k % 3])
        _, analytic = pair_gradient(features, mask, pair)
        if corrupt:
            analytic.coefficients[0][0] = analytic.coefficients[0][0] * 1.01 + 1e-3
        fd = finite_difference_gradient(features, mask, pair)
        a = analytic.flat()
        f = np.concatenate(fd)
        scale = max(np.abs(a).max(), np.abs(f).max(), 1e-12)
        rel = float(np.abs(a - f).max() / scale)
        rel_errors.append(rel)
        if rel > tolerance:
            failures.append(k)
    return GradCheckReport(
        instances=instances,
        max_rel_error=max(rel_errors) if rel_errors else 0.0,
        tolerance=tolerance,
        failures=failures,
        rel_errors=rel_errors,
    )
