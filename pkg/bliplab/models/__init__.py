from bliplab.models.mpnn import (
    BlipModel,
    ModelConfig,
    forward,
    forward_egnn,
    forward_gnn,
    forward_mc_dropout,
    init_model,
)

__all__ = [
    "BlipModel",
    "ModelConfig",
    "forward",
    "forward_egnn",
    "forward_gnn",
    "forward_mc_dropout",
    "init_model",
]
