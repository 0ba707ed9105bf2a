"""
adaptrack - desk-scale multi-domain adaptive single-object tracking
"""

from .config import (
    DataConfig,
    EmaFrequency,
    EncoderConfig,
    EvalConfig,
    HeadConfig,
    RunConfig,
    SceneConfig,
    Settings,
    TCAConfig,
    TrainConfig,
    load_settings,
)
from .datagen import (
    BatchSampler,
    build_eval_suite,
    build_pools,
    corrupt_sequence,
    crop_search,
    crop_template,
    generate_sequence,
    make_labels,
    sample_batch,
)
from .errors import *
from .evaluation import (
    NetworkTracker,
    ablate,
    ablation_grid,
    export_metrics,
    run_ope,
    success_curve,
)
from .losses import focal_loss, giou_loss, l1_box, total_loss
from .models import *
from .network import DomainAdapter, Encoder, Head, ResponseMap, Tracker, build_tracker, decode_box
from .numerics import ParameterSet, grad_check
from .tca import cost_map, lp_oracle, psot_loss, sinkhorn
from .trainer import Trainer, ema_update, make_pseudo_labels, train_stage2_dca
from .weather import apply_weather, ssim

__version__ = "0.1.0"

__all__ = [
    # Config
    "Settings",
    "SceneConfig",
    "DataConfig",
    "EncoderConfig",
    "HeadConfig",
    "TCAConfig",
    "TrainConfig",
    "EvalConfig",
    "EmaFrequency",
    "RunConfig",
    "load_settings",
    # Models
    "DomainTag",
    "WeatherKind",
    "WeatherParams",
    "BBox",
    "Frame",
    "Sequence",
    "SamplePair",
    "LabelMaps",
    "PseudoLabel",
    "LossWeights",
    "EvalResult",
    "RunSummary",
    # Data
    "generate_sequence",
    "corrupt_sequence",
    "crop_template",
    "crop_search",
    "make_labels",
    "build_pools",
    "build_eval_suite",
    "BatchSampler",
    "sample_batch",
    "apply_weather",
    "ssim",
    # Model and training
    "Encoder",
    "DomainAdapter",
    "Head",
    "Tracker",
    "ResponseMap",
    "build_tracker",
    "decode_box",
    "focal_loss",
    "l1_box",
    "giou_loss",
    "total_loss",
    "cost_map",
    "sinkhorn",
    "lp_oracle",
    "psot_loss",
    "ParameterSet",
    "grad_check",
    "Trainer",
    "ema_update",
    "make_pseudo_labels",
    "train_stage2_dca",
    # Evaluation
    "NetworkTracker",
    "run_ope",
    "success_curve",
    "export_metrics",
    "ablation_grid",
    "ablate",
    # Errors
    "AdaptrackError",
    "ValidationError",
    "DimensionError",
    "ConfigurationError",
    "NumericalError",
    "CheckpointError",
    "SinkhornConvergenceWarning",
]
