"""Learned multiplicative masking of multi-stage image features, trained so
Pearson dissimilarities between masked embeddings reconstruct multi-subject
RDMs."""

from .encoder import (
    PairGradient,
    embed,
    pair_dissimilarity,
    pair_gradient,
    run_gradient_check,
)
from .io import (
    Checkpoint,
    fingerprint_paths,
    load_checkpoint,
    read_features,
    read_rdms,
    save_checkpoint,
    write_features,
    write_rdms,
)
from .similarity import (
    ScoreReport,
    noise_ceiling,
    pearson,
    predicted_rdm,
    score,
    spearman,
)
from .training import (
    AdamState,
    TrainConfig,
    TrainResult,
    adam_step,
    build_corpus,
    compute_noise,
    evaluate_loss,
    pair_loss,
    reliability_weight,
    sample_meg_slice,
    split_corpus,
    train,
)
from .types import (
    FeatureSet,
    Mask,
    MaskResolution,
    PairIndex,
    RdmStack,
    StageSpec,
    from_upper_triangle,
    pair_count,
    upper_triangle,
)

__version__ = "0.1.0"
