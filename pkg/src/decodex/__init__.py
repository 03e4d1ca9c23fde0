"""Detector-guided diffusion counterfactuals for biased classifiers.

Pipeline: generate a confounded synthetic dataset, train a disease
classifier / artifact detector / attribute probe and an unconditional
denoising diffusion model, synthesize counterfactuals whose class flips
while the artifact state is held fixed, score them, and retrain with the
counterfactuals folded into the train split.
"""

__version__ = "0.1.0"

from .dataset import (
    ArtifactSpec,
    DatasetIndex,
    DatasetManifest,
    DatasetSpec,
    DotArtifact,
    ImageSample,
    NuisanceSpec,
    PathologySpec,
    SUBGROUPS,
    generate_dataset,
    inject_artifact,
    load_manifest,
    load_split,
    subgroup_of,
)
from .diffusion import (
    DdpmTrainConfig,
    DenoiserCheckpoint,
    NoiseSchedule,
    build_schedule,
    forward_noise,
    load_denoiser,
    predict_x0,
    reverse_step,
    sample_unconditional,
    save_denoiser,
    train_denoiser,
)
from .guidance import (
    CounterfactualRecord,
    GuidanceConfig,
    explain_detector,
    generate_counterfactual,
    generate_counterfactuals,
    guidance_loss,
    guided_gradient,
    guided_step,
)
from .metrics import (
    MetricsReport,
    attribute_preservation,
    cfr,
    cpg,
    drr,
    l1_distance,
    metrics_report,
    scls,
)
from .predictors import (
    GroupWeights,
    PredictorCheckpoint,
    SubgroupAccuracyReport,
    TrainConfig,
    evaluate_subgroups,
    input_gradient,
    load_checkpoint,
    predict_prob,
    save_checkpoint,
    train_erm,
    train_group_dro,
    update_group_weights,
)
from .augmentation import (
    AugmentedManifest,
    load_augmented_manifest,
    retrain_with_augmentation,
    synthesize_augmentation_set,
)
