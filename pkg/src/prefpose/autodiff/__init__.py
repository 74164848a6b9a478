from . import tensor as ops
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .params import (
    AdamState,
    GradcheckReport,
    ParameterSet,
    adam_step,
    gradient_check,
    gradient_check_report,
    init_layernorm,
    init_linear,
    linear,
)
from .tensor import ShapeError, Tensor, backward, no_grad

__all__ = [
    "AdamState",
    "CheckpointError",
    "ParameterSet",
    "ShapeError",
    "Tensor",
    "adam_step",
    "backward",
    "gradient_check",
    "gradient_check_report",
    "GradcheckReport",
    "init_layernorm",
    "init_linear",
    "linear",
    "load_checkpoint",
    "no_grad",
    "ops",
    "save_checkpoint",
]
