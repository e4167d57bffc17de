"""Video super-resolution with windowed one-hot cross-frame attention and a
learned memory bank, on a small numpy autodiff core."""

from .tensor import NumericsError, Tape, TapeError, Tensor
from .model import (
    CheckpointError,
    ManaModel,
    ModelConfig,
    desk_config,
    init_model,
    load_checkpoint,
    mana_forward,
    paper_config,
    save_checkpoint,
)
from .data import Clip, DataError, SynthSpec, psnr, ssim, synth_clip
from .training import TrainSchedule, desk_schedule, paper_schedule, run_three_stage

__version__ = "0.1.0"

__all__ = [
    "CheckpointError",
    "Clip",
    "DataError",
    "ManaModel",
    "ModelConfig",
    "NumericsError",
    "SynthSpec",
    "Tape",
    "TapeError",
    "Tensor",
    "TrainSchedule",
    "desk_config",
    "desk_schedule",
    "init_model",
    "load_checkpoint",
    "mana_forward",
    "paper_config",
    "paper_schedule",
    "psnr",
    "save_checkpoint",
    "ssim",
    "synth_clip",
    "__version__",
]
