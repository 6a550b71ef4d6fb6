"""Noise schedules, the eps-predicting denoiser, DDPM pretraining and DDIM updates.

``alphas`` always holds the cumulative products (alpha-bar); index t runs
1..T and alpha-bar at t = 0 is taken as 1.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import nnkit
from .nnkit import tensor as T
from .nnkit.layers import ConvSpec, forward_convnet, init_convnet, timestep_embedding
from .nnkit.params import ParamSet
from .tomo import Volume

log = logging.getLogger(__name__)

SCHEDULE_KINDS = ("linear-beta", "cosine")


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    alphas: np.ndarray
    kind: str = "linear-beta"
    timesteps: np.ndarray | None = None   # training-time index of each entry (1-based)

    def __post_init__(self):
        a = np.asarray(self.alphas, dtype=np.float64)
        object.__setattr__(self, "alphas", a)
        if a.ndim != 1 or a.size < 1:
            raise ValueError("schedule needs at least one alpha")
        if np.any(a <= 0) or np.any(a > 1):
            raise ValueError("cumulative alphas must lie in (0, 1]")
        if np.any(np.diff(a) >= 0):
            raise ValueError("cumulative alphas must be strictly decreasing")
        ts = np.arange(1, a.size + 1) if self.timesteps is None else np.asarray(self.timesteps)
        if ts.shape != a.shape:
            raise ValueError("timesteps must align with alphas")
        object.__setattr__(self, "timesteps", ts.astype(np.int64))

    @property
    def T(self) -> int:
        return int(self.alphas.size)

    @property
    def betas(self) -> np.ndarray:
        prev = np.concatenate([[1.0], self.alphas[:-1]])
        return 1.0 - self.alphas / prev

    def alpha_bar(self, t: int) -> float:
        """Cumulative alpha at step t in 0..T (t = 0 gives 1)."""
        if not 0 <= t <= self.T:
            raise ValueError(f"timestep {t} outside [0, {self.T}]")
        return 1.0 if t == 0 else float(self.alphas[t - 1])

    def train_step(self, t: int) -> int:
        """Training-schedule index fed to the denoiser's timestep embedding."""
        return int(self.timesteps[t - 1])

    def stride(self, n: int) -> "NoiseSchedule":
        """Evenly strided sub-schedule with ``n`` steps, always ending at the last one."""
        if not 1 <= n <= self.T:
            raise ValueError(f"cannot stride {self.T} steps down to {n}")
        idx = np.round(np.linspace(self.T / n, self.T, n)).astype(int) - 1
        return NoiseSchedule(self.alphas[idx], self.kind, self.timesteps[idx])

    def to_dict(self) -> dict:
        return {"kind": self.kind, "T": self.T, "timesteps": self.timesteps.tolist()}


def make_schedule(T: int, kind: str = "linear-beta") -> NoiseSchedule:
    if T < 2:
        raise ValueError("schedule needs T >= 2")
    if kind == "linear-beta":
        scale = 1000.0 / T
        betas = np.linspace(scale * 1e-4, scale * 0.02, T)
        betas = np.clip(betas, 0.0, 0.999)
    elif kind == "cosine":
        s = 0.008
        steps = np.arange(T + 1) / T
        f = np.cos((steps + s) / (1 + s) * np.pi / 2) ** 2
        abar = f / f[0]
        betas = np.clip(1.0 - abar[1:] / abar[:-1], 0.0, 0.999)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    return NoiseSchedule(np.cumprod(1.0 - betas), kind)


def q_sample(x0: np.ndarray, t: int, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    if not 1 <= t <= sched.T:
        raise ValueError(f"timestep {t} outside [1, {sched.T}]")
    x0 = np.asarray(x0)
    if np.shape(eps) != x0.shape:
        raise ValueError("noise shape does not match x0")
    a = sched.alpha_bar(t)
    return math.sqrt(a) * x0 + math.sqrt(1.0 - a) * np.asarray(eps)


# ---------------------------------------------------------------- denoiser

@dataclass
class DenoiserModel:
    params: ParamSet
    arch: ConvSpec
    schedule: NoiseSchedule

    @classmethod
    def create(cls, arch: ConvSpec | None = None, schedule: NoiseSchedule | None = None,
               seed: int = 0, dtype=np.float32) -> "DenoiserModel":
        arch = arch or ConvSpec()
        schedule = schedule or make_schedule(1000)
        return cls(init_convnet(arch, np.random.default_rng(seed), dtype), arch, schedule)

    def predict_eps(self, x_t, train_t) -> T.Tensor:
        """Noise prediction for an (S, H, W) batch at training timestep(s) ``train_t``."""
        x_t = T.as_tensor(x_t)
        s, h, w = x_t.shape
        x4 = T.reshape(x_t, (s, 1, h, w))
        emb = timestep_embedding(np.broadcast_to(np.asarray(train_t), (s,)), self.arch.emb_dim,
                                 self.params.dtype)
        out = forward_convnet(self.params, x4, self.arch, emb)
        return T.reshape(out, (s, h, w))

    def denoise(self, x_t, t: int, sched: NoiseSchedule | None = None):
        """Posterior-mean estimate and predicted noise at step t of ``sched``.

        x_hat = (x_t - sqrt(1 - abar_t) eps) / sqrt(abar_t)
        """
        sched = sched or self.schedule
        a = sched.alpha_bar(t)
        eps = self.predict_eps(x_t, sched.train_step(t))
        x_hat = T.scale(T.sub(x_t, T.scale(eps, math.sqrt(1.0 - a))), 1.0 / math.sqrt(a))
        return x_hat, eps

    def copy(self) -> "DenoiserModel":
        return DenoiserModel(self.params.copy(), self.arch, self.schedule)

    def save(self, path) -> None:
        meta = {"model": "denoiser", "arch": self.arch.to_dict(), "schedule": self.schedule.to_dict()}
        nnkit.save(path, self.params, meta, self.schedule.alphas)

    @classmethod
    def load(cls, path, dtype=np.float32) -> "DenoiserModel":
        params, meta, alphas = nnkit.load(Path(path), dtype=dtype)
        if meta.get("model") != "denoiser":
            raise ValueError(f"{path} is not a denoiser weights file")
        sd = meta["schedule"]
        sched = NoiseSchedule(alphas, sd["kind"], np.asarray(sd["timesteps"]))
        return cls(params, ConvSpec.from_dict(meta["arch"]), sched)


def pretrain(model: DenoiserModel, dataset: Sequence[Volume], epochs: int, lr: float,
             seed: int, batch_size: int = 8, crop: int | None = None,
             state: nnkit.AdamState | None = None) -> tuple[DenoiserModel, list[float]]:
    """Fit eps-prediction by Adam on E||eps - eps_theta(q_sample(x0, t, eps), t)||^2.

    Returns the model (updated in place) and the mean training loss per epoch.
    ``crop`` trains on random square crops (the net is fully convolutional).
    """
    if len(dataset) == 0:
        raise ValueError("pretraining dataset is empty")
    rng = np.random.default_rng(seed)
    dtype = model.params.dtype
    images = np.concatenate([np.asarray(v.data) for v in dataset]).astype(dtype)
    state = state or nnkit.AdamState.for_params(model.params)
    sched = model.schedule
    losses: list[float] = []
    for epoch in range(epochs):
        order = rng.permutation(len(images))
        total, count = 0.0, 0
        for start in range(0, len(order), batch_size):
            batch = images[order[start:start + batch_size]]
            if crop and crop < batch.shape[-1]:
                r0, c0 = rng.integers(0, batch.shape[-1] - crop + 1, size=2)
                batch = batch[:, r0:r0 + crop, c0:c0 + crop]
            b = batch.shape[0]
            t = rng.integers(1, sched.T + 1, size=b)
            eps = rng.standard_normal(batch.shape).astype(dtype)
            ab = sched.alphas[t - 1].astype(dtype)[:, None, None]
            x_t = np.sqrt(ab) * batch + np.sqrt(1 - ab) * eps
            model.params.zero_grad()
            pred = model.predict_eps(x_t, sched.timesteps[t - 1])
            loss = T.mse(pred, eps)
            if not np.isfinite(loss.item()):
                raise FloatingPointError(f"pretraining diverged at epoch {epoch + 1}")
            nnkit.backward(loss)
            nnkit.adam_step(model.params, state, lr)
            total += loss.item() * b
            count += b
        losses.append(total / count)
        log.info("pretrain epoch %d loss %.6f", epoch + 1, losses[-1])
    return model, losses


# ---------------------------------------------------------------- sampling

def ddim_step(x_hat, eps_theta, eps_slerp, t: int, eta: float, sched: NoiseSchedule):
    """sqrt(abar_{t-1}) x_hat + sqrt(1 - abar_{t-1}) (eta eps_slerp + (1 - eta) eps_theta)."""
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"eta must be in [0, 1], got {eta}")
    if not 1 <= t <= sched.T:
        raise ValueError(f"timestep {t} outside [1, {sched.T}]")
    a = sched.alpha_bar(t - 1)
    if a == 1.0:
        return np.array(x_hat, copy=True)
    noise = eta * np.asarray(eps_slerp) + (1.0 - eta) * np.asarray(eps_theta)
    return math.sqrt(a) * np.asarray(x_hat) + math.sqrt(1.0 - a) * noise


@dataclass
class NoiseDraw:
    """Fixed reference noise plus a mixing weight for spherical interpolation."""
    reference: np.ndarray
    lam: float = 0.2
    last_gamma: float = field(default=float("nan"), init=False)

    @classmethod
    def from_seed(cls, shape, seed: int, lam: float = 0.2, dtype=np.float64) -> "NoiseDraw":
        ref = np.random.default_rng(seed).standard_normal(shape).astype(dtype)
        return cls(ref, lam)


def slerp(a: np.ndarray, b: np.ndarray, lam: float) -> tuple[np.ndarray, float]:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return np.array(a, copy=True), 0.0
    cosg = float(np.clip(np.vdot(a, b) / (na * nb), -1.0, 1.0))
    gamma = math.acos(cosg)
    if math.sin(gamma) < 1e-6:  # colinear or antipodal
        return np.array(a, copy=True), gamma
    if lam == 0:
        return np.array(a, copy=True), gamma
    if lam == 1:
        return np.array(b, copy=True), gamma
    sg = math.sin(gamma)
    return (math.sin((1 - lam) * gamma) / sg) * a + (math.sin(lam * gamma) / sg) * b, gamma


def slerp_noise(draw: NoiseDraw, seed: int, step: int) -> np.ndarray:
    """Great-circle mix of the reference draw with a fresh draw keyed by (seed, step)."""
    if draw.reference is None:
        raise ValueError("noise draw has no reference")
    fresh = np.random.default_rng([seed, step]).standard_normal(draw.reference.shape)
    out, gamma = slerp(draw.reference, fresh.astype(draw.reference.dtype), draw.lam)
    draw.last_gamma = gamma
    return out
