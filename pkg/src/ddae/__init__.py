"""Disentangled diffusion autoencoder for multi-site image harmonization."""

__version__ = "0.1.0"

from .combat import CombatModel, combat_apply, combat_fit, combat_harmonize_dataset
from .data import CovariateRecord, Dataset, ingest, load_dataset, save_dataset
from .estimators import CombatHarmonizer, DdaeHarmonizer, ImageProbe
from .evalsuite import (
    EvalReport,
    ProbeConfig,
    embed_latents_2d,
    evaluate,
    frechet_distance,
    pcc,
    psnr,
    train_probe,
)
from .harmonize import HarmonizationJob, harmonize_dataset, harmonize_image
from .model import (
    DdaeModel,
    FingerprintMismatchError,
    ModelConfig,
    load_checkpoint,
    save_checkpoint,
)
from .phantoms import (
    CohortSpec,
    SiteEffectSpec,
    apply_site_effect,
    default_site_specs,
    generate_cohort,
    interpolated_site_specs,
    render_phantom,
)
from .sampling import SamplerConfig, ddim_decode, ddim_encode
from .schedule import NoiseSchedule, forward_noise, make_linear_schedule, sample_timesteps
from .training import LossBreakdown, TrainConfig, ddae_loss, train

__all__ = [
    "__version__",
    "CohortSpec",
    "CombatHarmonizer",
    "CombatModel",
    "CovariateRecord",
    "Dataset",
    "DdaeHarmonizer",
    "DdaeModel",
    "EvalReport",
    "FingerprintMismatchError",
    "HarmonizationJob",
    "ImageProbe",
    "LossBreakdown",
    "ModelConfig",
    "NoiseSchedule",
    "ProbeConfig",
    "SamplerConfig",
    "SiteEffectSpec",
    "TrainConfig",
    "apply_site_effect",
    "combat_apply",
    "combat_fit",
    "combat_harmonize_dataset",
    "ddae_loss",
    "ddim_decode",
    "ddim_encode",
    "default_site_specs",
    "embed_latents_2d",
    "evaluate",
    "forward_noise",
    "frechet_distance",
    "generate_cohort",
    "harmonize_dataset",
    "harmonize_image",
    "ingest",
    "interpolated_site_specs",
    "load_checkpoint",
    "load_dataset",
    "make_linear_schedule",
    "pcc",
    "psnr",
    "render_phantom",
    "sample_timesteps",
    "save_checkpoint",
    "save_dataset",
    "train",
    "train_probe",
]
