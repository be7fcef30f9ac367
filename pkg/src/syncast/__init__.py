"""SynCast: desk-scale regional air-pollution forecasting.

Windowed-attention forecasting backbone with croppable positional bias,
low-rank regional adapters, a climatology-gated diffusion refiner for the
particulate channels, synthetic data generation, and extreme-aware
verification metrics.
"""

__version__ = "0.1.0"

from .backbone import Backbone, ModelConfig, crop_to_region, forward_state, rollout
from .diffusion import (
    Climatology,
    Denoiser,
    DiffusionConfig,
    NoiseSchedule,
    build_climatology,
    climatology_gate,
    denoise_sample,
    forward_noise,
    train_dee,
)
from .errors import SyncastError
from .grid import (
    AtmosphericState,
    GridSpec,
    NormalizationStats,
    RegionSpec,
    VariableCatalog,
    crop_region,
    lat_weights,
    normalize_state,
    denormalize_state,
    pm_log_forward,
    pm_log_inverse,
)
from .harmonize import (
    downsample_to_resolution,
    regrid_bilinear,
    temporal_upsample_linear,
)
from .lora import attach_lora, merge_lora
from .scg import read_grid_file, write_grid_file
from .synthetic import SyntheticConfig, gen_synthetic_sequence, make_training_pairs
from .training import TrainConfig, finetune_lora, grad_check, smooth_l1, train_backbone
from .verification import (
    MetricReport,
    contingency,
    evaluate,
    lat_weighted_rmse,
    rqe,
    sedi,
)

__all__ = [name for name in dir() if not name.startswith("_")]
