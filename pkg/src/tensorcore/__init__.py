from src.tensorcore.tensor import (
    ComputationTape,
    Tensor,
    backward,
    current_tape,
    default_dtype,
    recording,
    shadow_precision,
)
from src.tensorcore.param_view import NamedParams, ParamView, matrix_role

__all__ = [
    "ComputationTape",
    "Tensor",
    "backward",
    "current_tape",
    "default_dtype",
    "recording",
    "shadow_precision",
    "NamedParams",
    "ParamView",
    "matrix_role",
]
