"""Structure-texture disentangling autoencoder for lung imaging, with
masked Frechet evaluation, hybrid-image augmentation, and a texture-encoder
classification harness."""

from .augmentation import AugmentationPlan, build_hybrid_augmentation
from .corpus import (
    CorpusManifest,
    ImageRecord,
    SyntheticSpec,
    generate_synthetic_corpus,
    load_manifest,
    preprocess,
    sample_swap_pairs,
    save_manifest,
)
from .masking import LocationSet, PatchSample, sample_locations, sample_patch
from .metrics import (
    GaussianStats,
    OverlapReport,
    balanced_error_rate,
    frechet_distance,
    masked_feature_stats,
    masked_sifid,
    mean_auc,
    overlap_metrics,
    threshold_lung_segmentation,
)
from .networks import (
    LatentCodes,
    LungSwapModel,
    NetworkConfig,
    load_checkpoint,
    save_checkpoint,
)
from .objectives import (
    LossBreakdown,
    LossWeights,
    discriminator_loss,
    generator_adversarial_loss,
    in_lung_texture_loss,
    nce_loss,
    r1_penalty,
    reconstruction_loss,
    structure_suppression_loss,
    total_loss,
)
from .oracle import TextureOracle, train_texture_oracle
from .training import (
    FinetuneConfig,
    TrainConfig,
    finetune_lr,
    finetune_texture_encoder,
    r1_due,
    train_lsae,
)

__version__ = "0.1.0"

__all__ = [
    "AugmentationPlan", "build_hybrid_augmentation",
    "CorpusManifest", "ImageRecord", "SyntheticSpec",
    "generate_synthetic_corpus", "load_manifest", "preprocess",
    "sample_swap_pairs", "save_manifest",
    "LocationSet", "PatchSample", "sample_locations", "sample_patch",
    "GaussianStats", "OverlapReport", "balanced_error_rate",
    "frechet_distance", "masked_feature_stats", "masked_sifid", "mean_auc",
    "overlap_metrics", "threshold_lung_segmentation",
    "LatentCodes", "LungSwapModel", "NetworkConfig",
    "load_checkpoint", "save_checkpoint",
    "LossBreakdown", "LossWeights", "discriminator_loss",
    "generator_adversarial_loss", "in_lung_texture_loss", "nce_loss",
    "r1_penalty", "reconstruction_loss", "structure_suppression_loss",
    "total_loss",
    "TextureOracle", "train_texture_oracle",
    "FinetuneConfig", "TrainConfig", "finetune_lr",
    "finetune_texture_encoder", "r1_due", "train_lsae",
]
