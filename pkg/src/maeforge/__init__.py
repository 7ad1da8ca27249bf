"""Masked-autoencoder pretraining and transfer learning on a small numpy autodiff core."""

from .mae import DESK_MAE, FULL_MAE, MaeConfig, init_mae, mae_forward, reconstruction_loss
from .pipelines import StagePlan, build_ablation_plan, load_checkpoint, run_plan, save_checkpoint
from .tensor import Tensor, backward
from .vit import DESK_ENCODER, FULL_ENCODER, EncoderConfig

__version__ = "0.1.0"

__all__ = [
    "DESK_ENCODER",
    "DESK_MAE",
    "EncoderConfig",
    "MaeConfig",
    "FULL_ENCODER",
    "FULL_MAE",
    "StagePlan",
    "Tensor",
    "backward",
    "build_ablation_plan",
    "init_mae",
    "load_checkpoint",
    "mae_forward",
    "reconstruction_loss",
    "run_plan",
    "save_checkpoint",
]
