"""Slice-wise conditional diffusion inpainting for 3D volumes."""

from .diffusion import (
    ConditionedBatch,
    concat_condition,
    generate_unconditional,
    q_sample,
    reverse_step,
    sample_slice,
    sample_slices,
    training_loss,
)
from .metrics import masked_mse, masked_psnr, masked_ssim
from .nn import time_embedding
from .schedule import NoiseSchedule, default_schedule, linear_schedule
from .tensor import Parameter, Tape, Tensor, backward
from .trainer import (
    Adam,
    Checkpoint,
    Ema,
    SliceDataset,
    TrainerConfig,
    load_checkpoint,
    model_from_checkpoint,
    save_checkpoint,
    train,
)
from .unet import DenoiserModel, UNetConfig, build, predict_noise
from .volumes import (
    MaskedCase,
    PhantomSpec,
    Volume,
    center_crop_slices,
    gaussian_smooth,
    generate_phantom,
    preprocess,
    read_volume,
    reassemble,
    renormalize_output,
    select_slices,
    write_volume,
)

__version__ = "0.1.0"
