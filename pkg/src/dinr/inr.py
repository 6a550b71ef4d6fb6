"""FBP-conditioned SIREN over the voxel lattice and its proximal training loss."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import nnkit
from .nnkit import tensor as T
from .nnkit.layers import MlpSpec, forward_mlp, init_siren
from .nnkit.params import ParamSet
from .tomo import Sinogram, Volume, project_tensor


@dataclass(frozen=True, eq=False)
class CoordinateGrid:
    points: np.ndarray
    dims: tuple[int, int, int]

    @classmethod
    def for_dims(cls, dims: tuple[int, int, int], dtype=np.float64) -> "CoordinateGrid":
        s, h, w = dims

        def axis(n):
            # (2i - (n-1)) / (n-1) is exactly antisymmetric in floating point
            if n == 1:
                return np.zeros(1)
            return (2.0 * np.arange(n) - (n - 1)) / (n - 1)

        zz, yy, xx = np.meshgrid(axis(s), axis(h), axis(w), indexing="ij")
        pts = np.stack([xx.ravel(), yy.ravel(), zz.ravel()], axis=1).astype(dtype)
        return cls(pts, (int(s), int(h), int(w)))

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass
class InrModel:
    params: ParamSet
    arch: MlpSpec

    def __post_init__(self):
        if self.arch.widths[0] != 4:
            raise ValueError("INR input width must be 3 coordinates + 1 FBP channel")

    @classmethod
    def create(cls, hidden: tuple[int, ...] = (128, 128, 128), w0: float = 30.0, seed: int = 0,
               dtype=np.float32) -> "InrModel":
        arch = MlpSpec((4, *hidden, 1), "sine", w0)
        return cls(init_siren(arch, np.random.default_rng(seed), dtype), arch)

    def copy(self) -> "InrModel":
        return InrModel(self.params.copy(), self.arch)

    def save(self, path) -> None:
        nnkit.save(path, self.params, {"model": "inr", "arch": self.arch.to_dict()})

    @classmethod
    def load(cls, path, dtype=np.float32) -> "InrModel":
        params, meta, _ = nnkit.load(Path(path), dtype=dtype)
        if meta.get("model") != "inr":
            raise ValueError(f"{path} is not an INR weights file")
        return cls(params, MlpSpec.from_dict(meta["arch"]))


def inr_input(grid: CoordinateGrid, fbp_vol: Volume, dtype) -> np.ndarray:
    if tuple(fbp_vol.shape) != grid.dims:
        raise ValueError(f"FBP volume {fbp_vol.shape} does not match grid {grid.dims}")
    return np.concatenate([grid.points, fbp_vol.data.reshape(-1, 1)], axis=1).astype(dtype)


def inr_tensor(model: InrModel, grid: CoordinateGrid, fbp_vol: Volume) -> T.Tensor:
    """F_phi on every lattice point, as an (S, H, W) tensor with graph attached."""
    x = inr_input(grid, fbp_vol, model.params.dtype)
    out = forward_mlp(model.params, x, model.arch)
    return T.reshape(out, grid.dims)


def inr_forward(model: InrModel, grid: CoordinateGrid, fbp_vol: Volume) -> Volume:
    return Volume(inr_tensor(model, grid, fbp_vol).data.copy())


class LossTerms(NamedTuple):
    total: float
    data_term: float
    prox_term: float
    rho: float


def proximal_loss(model: InrModel, grid: CoordinateGrid, y: Sinogram, fbp_vol: Volume,
                  x_hat: Volume | None, rho: float) -> LossTerms:
    """MSE(A F, y) + rho MSE(x_hat, F), with gradients accumulated into model.params.grads.

    With rho == 0 the proximal branch is never built, so x_hat has no influence.
    """
    if rho < 0:
        raise ValueError("rho must be non-negative")
    if rho > 0 and x_hat is None:
        raise ValueError("rho > 0 requires a diffusion estimate x_hat")
    f = inr_tensor(model, grid, fbp_vol)
    target = np.asarray(y.data, dtype=model.params.dtype)
    data = T.mse(project_tensor(f, y.geometry), target)
    data_val = data.item()
    prox_val = 0.0
    loss = data
    if rho > 0:
        prox = T.mse(f, np.asarray(x_hat.data, dtype=model.params.dtype))
        prox_val = prox.item()
        loss = T.add(data, T.scale(prox, rho))
    nnkit.backward(loss)
    return LossTerms(data_val + rho * prox_val, data_val, prox_val, rho)


def fit_inr(model: InrModel, grid: CoordinateGrid, y: Sinogram, fbp_vol: Volume,
            x_hat: Volume | None, rho: float, steps: int, lr: float,
            state: nnkit.AdamState | None = None) -> tuple[InrModel, list[LossTerms]]:
    """Adam on the proximal loss for ``steps`` iterations starting from the current weights.

    ``history`` holds the loss terms evaluated before each update.  lr == 0
    leaves the weights untouched.
    """
    if steps < 1:
        raise ValueError("fit_inr needs steps >= 1")
    state = state or nnkit.AdamState.for_params(model.params)
    history: list[LossTerms] = []
    for i in range(steps):
        model.params.zero_grad()
        terms = proximal_loss(model, grid, y, fbp_vol, x_hat, rho)
        if not math.isfinite(terms.total):
            raise FloatingPointError(f"INR loss is not finite at step {i}")
        history.append(terms)
        if lr > 0:
            nnkit.adam_step(model.params, state, lr)
    if lr > 0 and steps > 1 and history[-1].total > history[0].total:
        warnings.warn(f"INR fit did not improve the loss ({history[0].total:.4g} -> "
                      f"{history[-1].total:.4g})", RuntimeWarning, stacklevel=2)
    return model, history


def resolve_rho(data_term: float, prox_term: float, ratio_target: float) -> float:
    """rho such that rho * prox_term / data_term equals ``ratio_target``."""
    if ratio_target < 0:
        raise ValueError("ratio_target must be non-negative")
    if ratio_target == 0:
        return 0.0
    if prox_term == 0:
        warnings.warn("proximal term is zero; falling back to rho = 0", RuntimeWarning,
                      stacklevel=2)
        return 0.0
    return ratio_target * data_term / prox_term

