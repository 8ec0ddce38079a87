"""Small numpy autodiff substrate: eager tensors, taped backward, Adam."""

from . import ops
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .gradcheck import NonDeterministicBuilderError, finite_diff_check
from .module import MLP, Conv1d, LayerNorm, Linear, Module
from .optim import Adam, AdamState, adam_step
from .tensor import (
    OP_KINDS,
    Graph,
    GraphConsumedError,
    NonFiniteError,
    Parameter,
    ShapeError,
    Tensor,
    as_tensor,
    default_dtype,
    precision,
    record_op,
)

__all__ = [
    "ops",
    "Tensor",
    "Parameter",
    "Graph",
    "record_op",
    "OP_KINDS",
    "ShapeError",
    "NonFiniteError",
    "GraphConsumedError",
    "NonDeterministicBuilderError",
    "precision",
    "default_dtype",
    "as_tensor",
    "Adam",
    "AdamState",
    "adam_step",
    "finite_diff_check",
    "save_checkpoint",
    "load_checkpoint",
    "CheckpointError",
    "Module",
    "Linear",
    "Conv1d",
    "LayerNorm",
    "MLP",
]
