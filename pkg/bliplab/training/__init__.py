from bliplab.training.checkpoint import load_checkpoint, save_checkpoint
from bliplab.training.engine import (
    Checkpoint,
    TrainConfig,
    elbo_loss,
    train_baseline,
    train_blip,
    train_ensemble,
)
from bliplab.training.forces import gradient_force
from bliplab.training.optim import AdamState, adam_step

__all__ = [
    "AdamState",
    "Checkpoint",
    "TrainConfig",
    "adam_step",
    "elbo_loss",
    "gradient_force",
    "load_checkpoint",
    "save_checkpoint",
    "train_baseline",
    "train_blip",
    "train_ensemble",
]
