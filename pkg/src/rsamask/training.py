"""Training loop: reliability weights, weighted multi-subject loss, Adam,
pair batching, dataset concatenation, splits, and MEG timestamp sampling.

The corpus is a flat list of (dataset, pair) rows built from one or more
(FeatureSet, RdmStack) datasets that all share the same stage layout. A single
mask is trained against every subject of every dataset simultaneously; the
per-pair loss is the weighted mean over subjects of the L1 (or squared)
deviation between the predicted dissimilarity and each subject's value.

Predictions are quantized to float32 (the targets' storage precision) before
the residual is formed, so representation rounding noise cannot generate loss
signal: self-generated targets are an exact fixed point of training.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import encoder
from .errors import (
    DataError,
    DegenerateDataError,
    DivergenceError,
    ShapeError,
    ValidationError,
)
from .io import Checkpoint
from .types import FeatureSet, Mask, MaskResolution, PairIndex, RdmStack

LOG_HEADER = "epoch\tstep\ttrain_loss\tval_loss\twall_time"


@dataclass
class TrainConfig:
    """Hyperparameters and switches for one training run."""

    learning_rate: float = 0.01
    batch_size: int = 40
    epochs: int = 15
    loss_kind: str = "l1"  # "l1" or "mse"
    use_reliability_weights: bool = True
    resolution: MaskResolution = MaskResolution.PER_CHANNEL
    val_fraction: float = 0.10
    seed: int = 0
    meg_gaussian_sampling: bool = True
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_alpha: float = 0.25
    weight_beta: float = 1.0
    noise_sample_std: bool = False  # population std unless toggled

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValidationError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValidationError("epochs must be >= 0")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValidationError("val_fraction must lie in (0, 1)")
        if self.loss_kind not in ("l1", "mse"):
            raise ValidationError(f"unknown loss kind {self.loss_kind!r}")

    def to_dict(self) -> dict:
        d = self.__dict__.copy()
        d["resolution"] = self.resolution.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["resolution"] = MaskResolution(d["resolution"])
        return cls(**d)


def compute_noise(
    target: RdmStack, pair: PairIndex, slice_index: int = 0, sample_std: bool = False
) -> float:
    """Standard deviation of one RDM entry across subjects (population form
    by default)."""
    mats = target.matrices(slice_index)
    if mats.shape[0] < 2:
        raise DegenerateDataError("noise needs at least 2 subjects")
    vals = mats[:, pair.i, pair.j].astype(np.float64)
    return float(vals.std(ddof=1 if sample_std else 0))


def reliability_weight(
    noise: float, n_bar: float, alpha: float = 0.25, beta_exp: float = 1.0
) -> float:
    """Per-pair loss weight (1 / (N + alpha * N_bar)) ** beta."""
    if noise < 0 or n_bar < 0:
        raise ValidationError("noise terms must be non-negative")
    denom = noise + alpha * n_bar
    if denom <= 0.0:
        raise DegenerateDataError(
            "reliability weight undefined: noise and mean noise are both zero"
        )
    return (1.0 / denom) ** beta_exp


def pair_loss(predicted: float, targets, weight: float, loss_kind: str = "l1") -> float:
    """Weighted mean over subjects of |residual| (l1) or residual^2 (mse)."""
    t = np.asarray(targets, dtype=np.float64).ravel()
    if t.size < 1:
        raise DegenerateDataError("pair loss needs at least one target value")
    res = float(predicted) - t
    if loss_kind == "l1":
        return weight * float(np.mean(np.abs(res)))
    if loss_kind == "mse":
        return weight * float(np.mean(res * res))
    raise ValidationError(f"unknown loss kind {loss_kind!r}")


def sample_meg_slice(stack: RdmStack, rng, sigma: float | None = None) -> int:
    """Draw a slice index with a truncated Gaussian over the recorded interval
    (peaked at the midpoint, sigma = interval/4 unless overridden), then snap
    to the nearest timestamp."""
    if not stack.is_timestamped:
        raise ValidationError("timestamp sampling needs a timestamped (MEG) stack")
    ts = [t for t, _ in stack.slices]
    t_min, t_max = ts[0], ts[-1]
    mid = 0.5 * (t_min + t_max)
    if sigma is None:
        sigma = 0.25 * (t_max - t_min)
    for _ in range(10_000):
        t = rng.normal(mid, sigma)
        if t_min <= t <= t_max:
            return stack.nearest_slice(t)
    raise RuntimeError("timestamp sampling failed to land inside the interval")


@dataclass
class DatasetView:
    """One (features, RDM stack) dataset prepared for training."""

    features: FeatureSet  # reindexed to the stack's image order
    stack: RdmStack
    pair_i: np.ndarray  # (n_pairs,) upper-triangle row indices
    pair_j: np.ndarray
    targets: np.ndarray  # (n_slices, subjects, n_pairs) float32
    noise: np.ndarray  # (n_slices, n_pairs) float64; NaN when S == 1
    flat32: np.ndarray  # (n_images, L) raw concatenated features
    weights: np.ndarray | None = None  # (n_slices, n_pairs), set after split
    n_bar: np.ndarray | None = None  # (n_slices,)

    @property
    def n_pairs(self) -> int:
        return self.pair_i.shape[0]


class TrainingCorpus:
    """Concatenated datasets with a flat (dataset, pair) row table."""

    def __init__(self, datasets: list[DatasetView]):
        self.datasets = datasets
        self.dataset_of = np.concatenate(
            [np.full(ds.n_pairs, k, dtype=np.int64) for k, ds in enumerate(datasets)]
        )
        self.pair_pos = np.concatenate(
            [np.arange(ds.n_pairs, dtype=np.int64) for ds in datasets]
        )
        self.is_val: np.ndarray | None = None

    @property
    def n_rows(self) -> int:
        return self.dataset_of.shape[0]

    @property
    def train_rows(self) -> np.ndarray:
        if self.is_val is None:
            raise ValidationError("corpus has not been split yet")
        return np.where(~self.is_val)[0]

    @property
    def val_rows(self) -> np.ndarray:
        if self.is_val is None:
            raise ValidationError("corpus has not been split yet")
        return np.where(self.is_val)[0]


def build_corpus(features_list, targets_list, sample_std: bool = False) -> TrainingCorpus:
    """Join each RDM stack to the feature set covering its image ids.

    The stack's image order defines the join; all feature sets must share one
    stage layout so a single mask applies everywhere.
    """
    features_list = list(features_list)
    targets_list = list(targets_list)
    if not features_list or not targets_list:
        raise DegenerateDataError("need at least one feature set and one RDM stack")
    ref_stages = features_list[0].stages
    for fs in features_list[1:]:
        if fs.stages != ref_stages:
            raise ShapeError("feature sets disagree on the stage layout")
    datasets = []
    for stack in targets_list:
        if stack.n_images < 2:
            raise DegenerateDataError("an RDM stack needs at least 2 images")
        source = None
        for fs in features_list:
            if all(fs.has_image_id(i) for i in stack.image_ids):
                source = fs
                break
        if source is None:
            raise DataError(
                f"no feature set covers the image ids of the "
                f"{stack.modality_tag!r} stack"
            )
        view = source.subset_by_ids(stack.image_ids)
        n = stack.n_images
        iu, ju = np.triu_indices(n, k=1)
        targets = np.stack(
            [
                np.stack([m[iu, ju] for m in mats])
                for _, mats in stack.slices
            ]
        )  # (n_slices, S, n_pairs)
        if stack.subjects >= 2:
            ddof = 1 if sample_std else 0
            noise = targets.astype(np.float64).std(axis=1, ddof=ddof)
        else:
            noise = np.full((stack.n_slices, iu.shape[0]), np.nan)
        flat32 = np.concatenate(
            [arr.reshape(n, -1) for arr in view.data], axis=1
        )
        datasets.append(
            DatasetView(
                features=view,
                stack=stack,
                pair_i=iu.astype(np.int64),
                pair_j=ju.astype(np.int64),
                targets=targets,
                noise=noise,
                flat32=flat32,
            )
        )
    return TrainingCorpus(datasets)


def split_corpus(corpus: TrainingCorpus, val_fraction: float, seed: int) -> TrainingCorpus:
    """Uniform pair-level split; |val| = round(val_fraction * total)."""
    total = corpus.n_rows
    if total < 10:
        raise DegenerateDataError(f"need at least 10 pairs to split, got {total}")
    n_val = int(round(val_fraction * total))
    if n_val < 1 or n_val >= total:
        raise DegenerateDataError(
            f"val fraction {val_fraction} leaves an empty split for {total} pairs"
        )
    perm = np.random.default_rng(seed).permutation(total)
    is_val = np.zeros(total, dtype=bool)
    is_val[perm[:n_val]] = True
    corpus.is_val = is_val
    return corpus


def finalize_weights(corpus: TrainingCorpus, config: TrainConfig) -> None:
    """Fill per-pair reliability weights. N_bar is the mean noise over the
    dataset's training-split pairs, computed per slice."""
    for ds_id, ds in enumerate(corpus.datasets):
        if not config.use_reliability_weights:
            ds.weights = np.ones_like(ds.targets[:, 0, :], dtype=np.float64)
            ds.n_bar = None
            continue
        if ds.stack.subjects < 2:
            raise DegenerateDataError(
                f"reliability weights need >= 2 subjects; the "
                f"{ds.stack.modality_tag!r} stack has {ds.stack.subjects} "
                f"(disable use_reliability_weights)"
            )
        row_sel = (corpus.dataset_of == ds_id) & ~corpus.is_val
        train_pos = corpus.pair_pos[row_sel]
        if train_pos.size == 0:
            raise DegenerateDataError("a dataset has no training pairs")
        n_bar = ds.noise[:, train_pos].mean(axis=1)  # (n_slices,)
        denom = ds.noise + config.weight_alpha * n_bar[:, None]
        if np.any(denom <= 0.0):
            raise DegenerateDataError(
                "reliability weights undefined: zero noise and zero mean noise"
            )
        ds.weights = (1.0 / denom) ** config.weight_beta
        ds.n_bar = n_bar


@dataclass
class AdamState:
    """First/second moment estimates (float64) and the step counter."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, mask: Mask) -> "AdamState":
        return cls(
            m=[np.zeros(c.shape, dtype=np.float64) for c in mask.coefficients],
            v=[np.zeros(c.shape, dtype=np.float64) for c in mask.coefficients],
        )

    def copy(self) -> "AdamState":
        return AdamState([a.copy() for a in self.m], [a.copy() for a in self.v], self.step)


def adam_step(mask: Mask, grads, state: AdamState, config: TrainConfig):
    """One bias-corrected Adam update, in place. ``grads`` is a per-stage list
    of gradient arrays (or a PairGradient)."""
    if hasattr(grads, "coefficients"):
        grads = grads.coefficients
    if len(grads) != len(mask.coefficients):
        raise ShapeError("gradient layout does not match the mask")
    state.step += 1
    t = state.step
    b1, b2 = config.adam_beta1, config.adam_beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for k, g in enumerate(grads):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != mask.coefficients[k].shape:
            raise ShapeError("gradient shape mismatch")
        state.m[k] = b1 * state.m[k] + (1.0 - b1) * g
        state.v[k] = b2 * state.v[k] + (1.0 - b2) * g * g
        m_hat = state.m[k] / bc1
        v_hat = state.v[k] / bc2
        updated = (
            mask.coefficients[k].astype(np.float64)
            - config.learning_rate * m_hat / (np.sqrt(v_hat) + config.adam_eps)
        )
        mask.coefficients[k] = updated.astype(np.float32)
    return mask, state


def _midpoint_slices(corpus: TrainingCorpus) -> dict[int, int]:
    return {k: ds.stack.midpoint_slice() for k, ds in enumerate(corpus.datasets)}


def _batch_eval(corpus, mask, rows, slice_for_dataset, config, with_grad):
    """Loss sum (and optionally the flat-feature-space gradient sum) over a
    set of corpus rows. Summation order is fixed: ascending dataset id, then
    the given row order within a dataset."""
    multiplier = encoder.expand_mask(mask)
    eps = encoder.TRAINING_EPS
    loss_sum = 0.0
    gm = np.zeros_like(multiplier) if with_grad else None
    rows = np.asarray(rows, dtype=np.int64)
    for ds_id in np.unique(corpus.dataset_of[rows]):
        sel = rows[corpus.dataset_of[rows] == ds_id]
        ds = corpus.datasets[ds_id]
        if ds.weights is None:
            raise ValidationError("corpus weights not finalized before evaluation")
        sl = slice_for_dataset[int(ds_id)]
        pos = corpus.pair_pos[sel]
        ii = ds.pair_i[pos]
        jj = ds.pair_j[pos]
        uniq, inv = np.unique(np.concatenate([ii, jj]), return_inverse=True)
        raw = ds.flat32[uniq].astype(np.float64)
        masked = multiplier * raw
        centered = masked - masked.mean(axis=1, keepdims=True)
        sq = np.einsum("ij,ij->i", centered, centered)
        local_a = inv[: ii.shape[0]]
        local_b = inv[ii.shape[0] :]
        targets = ds.targets[sl]
        weights = ds.weights[sl]
        for r in range(sel.shape[0]):
            a = local_a[r]
            b = local_b[r]
            xc = centered[a]
            yc = centered[b]
            sxy = float(xc @ yc)
            denom = np.sqrt((sq[a] + eps) * (sq[b] + eps))
            d = 1.0 - sxy / denom
            # quantize to the targets' storage precision
            q = float(np.float32(d))
            t = targets[:, pos[r]].astype(np.float64)
            w = float(weights[pos[r]])
            res = q - t
            if config.loss_kind == "l1":
                loss_sum += w * float(np.mean(np.abs(res)))
                dl_dd = w * float(np.mean(np.sign(res))) if with_grad else 0.0
            else:
                loss_sum += w * float(np.mean(res * res))
                dl_dd = w * float(np.mean(2.0 * res)) if with_grad else 0.0
            if with_grad and dl_dd != 0.0:
                gx = -(yc - (sxy / (sq[a] + eps)) * xc) / denom
                gy = -(xc - (sxy / (sq[b] + eps)) * yc) / denom
                gm += dl_dd * (gx * raw[a] + gy * raw[b])
    return loss_sum, rows.shape[0], gm


def _reduce_to_mask(gm, mask: Mask) -> list[np.ndarray]:
    grads = []
    off = 0
    for spec in mask.stages:
        grads.append(
            encoder.reduce_stage(gm[off : off + spec.size], spec, mask.resolution)
        )
        off += spec.size
    return grads


def evaluate_loss(corpus: TrainingCorpus, mask: Mask, config: TrainConfig, rows) -> float:
    """Full-batch mean per-pair loss over ``rows`` at the deterministic
    midpoint slice of every dataset. Reference path for validation loss and
    for batch-partition invariance checks."""
    rows = np.asarray(rows, dtype=np.int64)
    if rows.size == 0:
        raise DegenerateDataError("no rows to evaluate")
    loss_sum, n, _ = _batch_eval(
        corpus, mask, rows, _midpoint_slices(corpus), config, with_grad=False
    )
    return loss_sum / n


@dataclass
class EpochRecord:
    epoch: int
    step: int
    train_loss: float
    val_loss: float
    wall_time: float

    def as_line(self) -> str:
        return (
            f"{self.epoch}\t{self.step}\t{self.train_loss!r}\t"
            f"{self.val_loss!r}\t{self.wall_time:.3f}"
        )


@dataclass
class TrainResult:
    best: Checkpoint
    final: Checkpoint
    history: list[EpochRecord]
    best_epoch: int
    best_val_loss: float
    corpus: TrainingCorpus


def _make_checkpoint(mask, state, config, fingerprint):
    return Checkpoint(
        mask=mask.copy(),
        adam_m=[a.copy() for a in state.m],
        adam_v=[a.copy() for a in state.v],
        step_count=state.step,
        config=config.to_dict(),
        fingerprint=fingerprint,
    )


def train(
    features_list,
    targets_list,
    config: TrainConfig,
    fingerprint: str = "",
    log_path=None,
    batch_hook=None,
) -> TrainResult:
    """Fit a mask to all datasets jointly; returns best-validation and final
    checkpoints plus the per-epoch history.

    ``batch_hook(epoch, global_step, rows)`` is an instrumentation callback
    receiving the corpus rows whose gradients entered each update.
    """
    corpus = build_corpus(features_list, targets_list, config.noise_sample_std)
    split_corpus(corpus, config.val_fraction, config.seed)
    finalize_weights(corpus, config)

    stages = corpus.datasets[0].features.stages
    mask = Mask.identity(stages, config.resolution)
    state = AdamState.zeros_like(mask)

    shuffle_seed, meg_seed = np.random.SeedSequence(config.seed).spawn(2)
    shuffle_rng = np.random.default_rng(shuffle_seed)
    meg_rng = np.random.default_rng(meg_seed)

    midpoints = _midpoint_slices(corpus)
    meg_ids = [
        k
        for k, ds in enumerate(corpus.datasets)
        if ds.stack.is_meg and config.meg_gaussian_sampling
    ]

    train_rows = corpus.train_rows
    val_rows = corpus.val_rows
    history: list[EpochRecord] = []
    t0 = time.monotonic()

    best_val = evaluate_loss(corpus, mask, config, val_rows)
    best_epoch = 0
    best_snapshot = (mask.copy(), state.copy())
    global_step = 0

    log_file = open(log_path, "w") if log_path is not None else None
    try:
        if log_file:
            log_file.write(LOG_HEADER + "\n")
        for epoch in range(1, config.epochs + 1):
            order = train_rows[shuffle_rng.permutation(train_rows.shape[0])]
            epoch_loss = 0.0
            epoch_pairs = 0
            for start in range(0, order.shape[0], config.batch_size):
                batch = order[start : start + config.batch_size]
                slices = dict(midpoints)
                for k in meg_ids:
                    slices[k] = sample_meg_slice(corpus.datasets[k].stack, meg_rng)
                loss_sum, n, gm = _batch_eval(
                    corpus, mask, batch, slices, config, with_grad=True
                )
                if not np.isfinite(loss_sum):
                    raise DivergenceError(
                        f"training loss became non-finite at epoch {epoch}, "
                        f"step {global_step + 1}"
                    )
                grads = _reduce_to_mask(gm / n, mask)
                adam_step(mask, grads, state, config)
                global_step += 1
                if batch_hook is not None:
                    batch_hook(epoch, global_step, batch)
                epoch_loss += loss_sum
                epoch_pairs += n
            train_loss = epoch_loss / epoch_pairs
            val_loss = evaluate_loss(corpus, mask, config, val_rows)
            if not np.isfinite(val_loss):
                raise DivergenceError(f"validation loss non-finite at epoch {epoch}")
            if val_loss < best_val:
                best_val = val_loss
                best_epoch = epoch
                best_snapshot = (mask.copy(), state.copy())
            record = EpochRecord(
                epoch=epoch,
                step=global_step,
                train_loss=train_loss,
                val_loss=val_loss,
                wall_time=time.monotonic() - t0,
            )
            history.append(record)
            if log_file:
                log_file.write(record.as_line() + "\n")
    finally:
        if log_file:
            log_file.close()

    best = _make_checkpoint(best_snapshot[0], best_snapshot[1], config, fingerprint)
    final = _make_checkpoint(mask, state, config, fingerprint)
    return TrainResult(
        best=best,
        final=final,
        history=history,
        best_epoch=best_epoch,
        best_val_loss=best_val,
        corpus=corpus,
    )
