"""Minimal numpy autodiff: tensors, parameter sets, Adam, SIREN MLP and a small CNN."""

from .layers import (ConvSpec, MlpSpec, conv2d, forward_convnet, forward_mlp, init_convnet,
                     init_siren, timestep_embedding)
from .optim import AdamState, adam_step
from .params import ParamSet, load, loads, save, dumps
from .tensor import (ComputeGraph, GraphError, NonFiniteError, Tensor, backward, linear_map,
                     mse)

__all__ = [
    "AdamState", "ComputeGraph", "ConvSpec", "GraphError", "MlpSpec", "NonFiniteError",
    "ParamSet", "Tensor", "adam_step", "backward", "conv2d", "dumps", "forward_convnet",
    "forward_mlp", "init_convnet", "init_siren", "linear_map", "load", "loads", "mse", "save",
    "timestep_embedding",
]
