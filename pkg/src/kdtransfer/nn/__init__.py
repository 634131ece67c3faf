"""Minimal numpy neural-network engine."""

from .checkpoint import ArchitectureMismatch, CheckpointError, load_checkpoint, save_checkpoint
from .functional import cross_entropy, log_softmax, softmax
from .layers import (
    DTYPE,
    AddSkip,
    ConcatBranch,
    Conv2d,
    Dense,
    Flatten,
    GlobalAvgPool,
    Layer,
    MaxPool2d,
    ReLU,
    ShapeError,
)
from .model import INPUT, GraphBuilder, Model, Node, forward, input_gradient, param_gradients
from .optim import AdamState, NonFiniteError, adam_step

__all__ = [
    "DTYPE", "INPUT", "AddSkip", "AdamState", "ArchitectureMismatch", "CheckpointError",
    "ConcatBranch", "Conv2d", "Dense", "Flatten", "GlobalAvgPool", "GraphBuilder", "Layer",
    "MaxPool2d", "Model", "Node", "NonFiniteError", "ReLU", "ShapeError", "adam_step",
    "cross_entropy", "forward", "input_gradient", "load_checkpoint", "log_softmax",
    "param_gradients", "save_checkpoint", "softmax",
]
