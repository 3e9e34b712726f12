"""GRL restoration network."""

from .checkpoint import decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint
from .config import TASKS, GRLConfig
from .network import (
    GRL,
    MIN_SIZE,
    channel_attention_conv,
    count_parameters,
    forward,
    init_parameters,
    parameter_shapes,
    stage,
    transformer_layer,
)

__all__ = [
    "GRL",
    "GRLConfig",
    "MIN_SIZE",
    "TASKS",
    "channel_attention_conv",
    "count_parameters",
    "decode_checkpoint",
    "encode_checkpoint",
    "forward",
    "init_parameters",
    "load_checkpoint",
    "parameter_shapes",
    "save_checkpoint",
    "stage",
    "transformer_layer",
]
