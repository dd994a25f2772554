"""Denoising diffusion model for generating animal sprites."""

from .adam import AdamState, adam_update
from .engine import (
    StepResult,
    load_checkpoint,
    reverse_sample,
    reverse_step,
    save_checkpoint,
    sprite_to_tensor,
    tensor_to_image,
    tensor_to_sprite,
    train,
    train_step,
)
from .network import DenoiserConfig, DenoiserParams, init_params, loss_and_grads, predict_noise
from .schedule import NoiseSchedule, forward_sample, make_schedule

__all__ = [
    "AdamState", "DenoiserConfig", "DenoiserParams", "NoiseSchedule", "StepResult",
    "adam_update", "forward_sample", "init_params", "load_checkpoint", "loss_and_grads",
    "make_schedule", "predict_noise", "reverse_sample", "reverse_step", "save_checkpoint",
    "sprite_to_tensor", "tensor_to_image", "tensor_to_sprite", "train", "train_step",
]
