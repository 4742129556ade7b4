"""Shared builders and independent oracles for the test suite.

The oracle functions here deliberately avoid the package's vectorized code
paths: they materialize embeddings with plain Python loops and lean on
textbook formulas (or scipy) so they stay an independent route.
"""

import math

import numpy as np
import pytest

from rsamask.types import FeatureSet, Mask, MaskResolution, RdmStack, StageSpec


def make_features(rng, n_images, shapes, prefix="img"):
    """Random FeatureSet; ``shapes`` is a list of (channels, spatial)."""
    stages = [StageSpec(f"layer{k}", c, p) for k, (c, p) in enumerate(shapes)]
    data = [rng.standard_normal((n_images, c, p)).astype(np.float32) for c, p in shapes]
    ids = [f"{prefix}{k:03d}" for k in range(n_images)]
    return FeatureSet(ids, stages, data)


def random_mask(rng, stages, resolution, loc=1.0, scale=0.6):
    from rsamask.types import coefficient_length

    coeffs = [
        rng.normal(loc, scale, coefficient_length(s, resolution)).astype(np.float32)
        for s in stages
    ]
    return Mask(resolution, stages, coeffs)


def symmetric_noise(rng, n, std):
    e = rng.normal(0.0, std, (n, n))
    e = np.triu(e, 1)
    return e + e.T


def make_stack(image_ids, tag, matrices, timestamps=None):
    """RdmStack from a list of (S, N, N) arrays, one per slice."""
    if timestamps is None:
        timestamps = [None] * len(matrices)
    return RdmStack(image_ids, tag, list(zip(timestamps, matrices)))


# ---------------------------------------------------------------------------
# oracles


def oracle_pearson(x, y):
    """Textbook covariance over product of standard deviations."""
    x = [float(v) for v in x]
    y = [float(v) for v in y]
    n = len(x)
    mx = sum(x) / n
    my = sum(y) / n
    cov = sum((a - mx) * (b - my) for a, b in zip(x, y)) / n
    vx = sum((a - mx) ** 2 for a in x) / n
    vy = sum((b - my) ** 2 for b in y) / n
    return cov / math.sqrt(vx * vy)


def oracle_ranks(v):
    """Average ranks assigned explicitly by counting."""
    out = []
    for a in v:
        less = sum(1 for b in v if b < a)
        eq = sum(1 for b in v if b == a)
        out.append(less + (eq + 1) / 2.0)
    return out


def oracle_spearman(x, y):
    return oracle_pearson(oracle_ranks(list(x)), oracle_ranks(list(y)))


def oracle_embedding(features, mask, image):
    """Materialize the full masked embedding with plain loops."""
    out = []
    for spec, arr, coeffs in zip(features.stages, features.data, mask.coefficients):
        for c in range(spec.channels):
            for p in range(spec.spatial):
                if mask.resolution is MaskResolution.PER_STAGE:
                    beta = coeffs[0]
                elif mask.resolution is MaskResolution.PER_CHANNEL:
                    beta = coeffs[c]
                else:
                    beta = coeffs[c * spec.spatial + p]
                out.append(float(beta) * float(arr[image, c, p]))
    return out


def oracle_rdm(features, mask, subset=None):
    """Brute-force RDM: full embeddings pairwise through oracle_pearson."""
    if subset is None:
        subset = range(features.n_images)
    subset = list(subset)
    embs = [oracle_embedding(features, mask, k) for k in subset]
    n = len(subset)
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            d = 1.0 - oracle_pearson(embs[i], embs[j])
            out[i, j] = out[j, i] = d
    return out


def oracle_noise_ceiling(matrices):
    """Direct transcription of the leave-one-out definition using scipy."""
    from scipy import stats

    s, n, _ = matrices.shape
    iu, ju = np.triu_indices(n, k=1)
    uts = [m[iu, ju].astype(np.float64) for m in matrices]
    total = 0.0
    for k in range(s):
        others = np.mean([uts[m] for m in range(s) if m != k], axis=0)
        rho = stats.spearmanr(uts[k], others).statistic
        total += rho**2
    return total / s


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
