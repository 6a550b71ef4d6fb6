"""Reconstruction drivers: FBP, plain INR, DD3IP (CG data consistency) and DINR.

The diffusion loop works in the network range [-1, 1]; projector losses and
the INR always live in attenuation units [0, 1].  ``to_net``/``to_att`` are
the affine maps between the two.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Callable

import numpy as np

from . import nnkit
from .diffusion import DenoiserModel, NoiseDraw, NoiseSchedule, ddim_step, slerp_noise
from .inr import (CoordinateGrid, InrModel, LossTerms, fit_inr, inr_forward, inr_tensor,
                  resolve_rho)
from .metrics import psnr
from .nnkit import tensor as T
from .tomo import Sinogram, Volume, backproject_array, fbp, project_array, project_tensor

log = logging.getLogger(__name__)

METHODS = ("fbp", "inr", "dd3ip", "dinr")


class ReconstructionError(RuntimeError):
    pass


def to_net(x):
    return 2.0 * x - 1.0


def to_att(x):
    return 0.5 * (x + 1.0)


@dataclass
class ReconConfig:
    method: str = "dinr"
    omega: float = 0.02
    omega_mode: str = "noise"          # "noise": eps * omega; "signal": A*y / omega
    rho_ratio: float = 1e-5
    eta: float = 0.0
    T: int = 25
    adapt_steps: int = 10
    adapt_lr: float = 1e-4
    inr_steps_init: int = 200
    inr_steps_per_t: int = 50
    inr_lr: float = 1e-4
    inr_hidden: tuple[int, ...] = (128, 128, 128)
    inr_w0: float = 30.0
    cg_iters: int = 50
    cg_mu: float = 1.0
    slerp_lambda: float = 0.2
    noise_seed: int = 0
    init_seed: int = 0
    apodization: str = "ram-lak"
    dtype: str = "float32"
    keep_trajectory: bool = False

    def __post_init__(self):
        self.inr_hidden = tuple(self.inr_hidden)
        self.validate()

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if not self.omega > 0:
            raise ValueError("omega must be > 0")
        if self.omega_mode not in ("noise", "signal"):
            raise ValueError("omega_mode must be 'noise' or 'signal'")
        if self.rho_ratio < 0:
            raise ValueError("rho_ratio must be >= 0")
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError("eta must be in [0, 1]")
        if self.T < 1:
            raise ValueError("T must be >= 1")
        for name in ("adapt_steps", "inr_steps_init", "inr_steps_per_t", "cg_iters"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.adapt_lr < 0 or self.inr_lr < 0:
            raise ValueError("learning rates must be >= 0")
        if self.cg_mu < 0:
            raise ValueError("cg_mu must be >= 0")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["inr_hidden"] = list(self.inr_hidden)
        return d


@dataclass
class StepLog:
    t: int
    adapt_loss: float
    data_term: float
    prox_term: float
    psnr: float | None = None
    theta_before: str = ""
    theta_after: str = ""


@dataclass
class ReconResult:
    x0: Volume
    log: list[StepLog] = field(default_factory=list)
    wall_time: float = 0.0
    config: dict = field(default_factory=dict)
    rho: float = 0.0
    trajectory: list[np.ndarray] = field(default_factory=list)


# ---------------------------------------------------------------- building blocks

def init_xT(fbp_net: np.ndarray, sched: NoiseSchedule, omega: float, eps: np.ndarray,
            mode: str = "noise") -> np.ndarray:
    """x_T = sqrt(abar_T) A*y + sqrt(1 - abar_T) eps * omega (``fbp_net`` already in [-1, 1]).

    mode "signal" instead divides the FBP term by omega (same SNR, different scale).
    """
    if not omega > 0:
        raise ValueError("omega must be > 0")
    if np.shape(eps) != np.shape(fbp_net):
        raise ValueError("noise shape does not match FBP volume")
    a = sched.alpha_bar(sched.T)
    if mode == "signal":
        return math.sqrt(a) * np.asarray(fbp_net) / omega + math.sqrt(1.0 - a) * np.asarray(eps)
    return math.sqrt(a) * np.asarray(fbp_net) + math.sqrt(1.0 - a) * np.asarray(eps) * omega


def adaptation_loss(model: DenoiserModel, x_t: np.ndarray, y: Sinogram, t: int,
                    sched: NoiseSchedule) -> T.Tensor:
    """MSE(A D_theta(x_t), y) with D_theta mapped back to attenuation units."""
    x_hat, _ = model.denoise(np.asarray(x_t, dtype=model.params.dtype), t, sched)
    att = T.scale(T.add(x_hat, 1.0), 0.5)
    return T.mse(project_tensor(att, y.geometry), np.asarray(y.data, dtype=model.params.dtype))


def adapt_weights(model: DenoiserModel, x_t: np.ndarray, y: Sinogram, steps: int, lr: float,
                  t: int, sched: NoiseSchedule,
                  state: nnkit.AdamState | None = None) -> tuple[DenoiserModel, float]:
    """``steps`` Adam iterations on the adaptation loss, warm-started from current theta.

    Returns the model and the loss after adaptation.
    """
    if steps < 0:
        raise ValueError("steps must be >= 0")
    state = state or nnkit.AdamState.for_params(model.params)
    for i in range(steps):
        model.params.zero_grad()
        loss = adaptation_loss(model, x_t, y, t, sched)
        if not math.isfinite(loss.item()):
            raise FloatingPointError(f"adaptation loss not finite at inner step {i}")
        nnkit.backward(loss)
        if lr > 0:
            nnkit.adam_step(model.params, state, lr)
    return model, adaptation_loss(model, x_t, y, t, sched).item()


def cg_solve(apply_op: Callable[[np.ndarray], np.ndarray], rhs: np.ndarray, x0: np.ndarray,
             iters: int, history: list[float] | None = None) -> np.ndarray:
    """Conjugate gradients for a symmetric positive (semi-)definite operator."""
    x = np.array(x0, dtype=np.float64, copy=True)
    r = rhs - apply_op(x)
    p = r.copy()
    rr = float(np.vdot(r, r))
    if history is not None:
        history.append(math.sqrt(rr))
    floor = 1e-30 * max(rr, 1e-300)
    for _ in range(iters):
        if rr <= floor:
            break
        ap = apply_op(p)
        pap = float(np.vdot(p, ap))
        if pap <= 0:
            break
        alpha = rr / pap
        x += alpha * p
        r -= alpha * ap
        rr_new = float(np.vdot(r, r))
        if not math.isfinite(rr_new):
            raise FloatingPointError("CG produced non-finite residual")
        if history is not None:
            history.append(math.sqrt(rr_new))
        p = r + (rr_new / rr) * p
        rr = rr_new
    return x


def data_consistency(x_hat_att: np.ndarray, y: Sinogram, mu: float, iters: int,
                     history: list[float] | None = None) -> np.ndarray:
    """CG on (A^T A + mu I) x = A^T y + mu x_hat, started at x_hat."""
    g = y.geometry
    x_hat_att = np.asarray(x_hat_att, dtype=np.float64)

    def normal_op(v):
        return backproject_array(project_array(v, g), g) + mu * v

    rhs = backproject_array(np.asarray(y.data, dtype=np.float64), g) + mu * x_hat_att
    return cg_solve(normal_op, rhs, x_hat_att, iters, history)


# ---------------------------------------------------------------- drivers

def _fbp_net(y: Sinogram, cfg: ReconConfig) -> tuple[Volume, np.ndarray]:
    f = fbp(y, cfg.apodization)
    return f, to_net(f.data)


def _maybe_psnr(x: np.ndarray, truth: Volume | None) -> float | None:
    return None if truth is None else psnr(np.clip(x, 0.0, 1.0), truth.data, 1.0)


def dinr_reconstruct(y: Sinogram, model: DenoiserModel, inr: InrModel, cfg: ReconConfig,
                     sched: NoiseSchedule | None = None, truth: Volume | None = None) -> ReconResult:
    """Diffusion-regularised INR reconstruction.

    phi_T <- fit with rho = 0; x_T from FBP; then for t = T..1: adapt theta on
    MSE(A D_theta(x_t), y), take x_hat_t = D_theta(x_t), refit phi on the
    proximal loss toward x_hat_t, and either return F_phi (t == 1) or DDIM-step
    from F_phi.  With ``inr_steps_per_t == 0`` the proximal fit is skipped and
    x_hat_t itself is stepped, which reduces the loop to plain DDIM.
    ``model`` and ``inr`` are updated in place.
    """
    start = time.perf_counter()
    sched = sched or model.schedule.stride(cfg.T)
    if sched.T != cfg.T:
        raise ValueError("sampling schedule length does not match cfg.T")
    dt = model.params.dtype
    fbp_vol, fbp_net = _fbp_net(y, cfg)
    grid = CoordinateGrid.for_dims(fbp_vol.shape)
    inr_state = nnkit.AdamState.for_params(inr.params)
    theta_state = nnkit.AdamState.for_params(model.params)
    if cfg.inr_steps_init > 0:
        fit_inr(inr, grid, y, fbp_vol, None, 0.0, cfg.inr_steps_init, cfg.inr_lr, inr_state)
    rng = np.random.default_rng(cfg.noise_seed)
    eps0 = rng.standard_normal(fbp_net.shape)
    x_t = init_xT(fbp_net, sched, cfg.omega, eps0, cfg.omega_mode).astype(dt)
    draw = NoiseDraw(rng.standard_normal(fbp_net.shape).astype(dt), cfg.slerp_lambda)
    rho = None
    result = ReconResult(Volume(np.zeros_like(fbp_vol.data)), config=cfg.to_dict())
    if cfg.keep_trajectory:
        result.trajectory.append(x_t.copy())
    for t in range(sched.T, 0, -1):
        try:
            before = model.params.digest()
            model, adapt_loss = adapt_weights(model, x_t, y, cfg.adapt_steps, cfg.adapt_lr, t,
                                              sched, theta_state)
            x_hat_net, eps_theta = model.denoise(x_t, t, sched)
            x_hat_att = Volume(to_att(x_hat_net.data.astype(np.float64)))
            if rho is None:
                probe = fit_terms(inr, grid, y, fbp_vol, x_hat_att)
                rho = resolve_rho(probe.data_term, probe.prox_term, cfg.rho_ratio)
            if cfg.inr_steps_per_t > 0:
                fit_inr(inr, grid, y, fbp_vol, x_hat_att, rho, cfg.inr_steps_per_t,
                        cfg.inr_lr, inr_state)
                est = inr_forward(inr, grid, fbp_vol).data
            else:
                # no proximal fit: the diffusion estimate is carried forward unchanged
                est = x_hat_att.data
            terms = fit_terms(inr, grid, y, fbp_vol, x_hat_att, rho)
            if t == 1:
                x_next = np.asarray(est, dtype=np.float64)
            else:
                eps_s = slerp_noise(draw, cfg.noise_seed, t) if cfg.eta > 0 else np.zeros_like(x_t)
                x_next = ddim_step(to_net(est), eps_theta.data, eps_s, t, cfg.eta, sched).astype(dt)
        except (FloatingPointError, nnkit.NonFiniteError) as exc:
            raise ReconstructionError(f"DINR failed at timestep t={t}: {exc}") from exc
        result.log.append(StepLog(t, adapt_loss, terms.data_term, terms.prox_term,
                                  _maybe_psnr(est, truth), before, model.params.digest()))
        x_t = x_next
        if cfg.keep_trajectory:
            result.trajectory.append(np.array(x_t, copy=True))
    result.x0 = Volume(np.asarray(x_t, dtype=np.float64))
    result.rho = float(rho or 0.0)
    result.wall_time = time.perf_counter() - start
    return result


def fit_terms(inr: InrModel, grid: CoordinateGrid, y: Sinogram, fbp_vol: Volume,
              x_hat: Volume, rho: float = 1.0) -> LossTerms:
    """Evaluate data and proximal terms at the current weights (gradients discarded)."""
    f = inr_tensor(inr, grid, fbp_vol).data.astype(np.float64)
    data = float(np.mean((project_array(f, y.geometry) - y.data) ** 2))
    prox = float(np.mean((np.asarray(x_hat.data) - f) ** 2))
    return LossTerms(data + rho * prox, data, prox, rho)


def dd3ip_reconstruct(y: Sinogram, model: DenoiserModel, cfg: ReconConfig,
                      sched: NoiseSchedule | None = None, truth: Volume | None = None) -> ReconResult:
    """Same outer loop as DINR with the posterior mean from CG data consistency."""
    start = time.perf_counter()
    sched = sched or model.schedule.stride(cfg.T)
    dt = model.params.dtype
    _, fbp_net = _fbp_net(y, cfg)
    rng = np.random.default_rng(cfg.noise_seed)
    eps0 = rng.standard_normal(fbp_net.shape)
    x_t = init_xT(fbp_net, sched, cfg.omega, eps0, cfg.omega_mode).astype(dt)
    draw = NoiseDraw(rng.standard_normal(fbp_net.shape).astype(dt), cfg.slerp_lambda)
    theta_state = nnkit.AdamState.for_params(model.params)
    result = ReconResult(Volume(np.zeros(fbp_net.shape)), config=cfg.to_dict())
    for t in range(sched.T, 0, -1):
        try:
            before = model.params.digest()
            model, adapt_loss = adapt_weights(model, x_t, y, cfg.adapt_steps, cfg.adapt_lr, t,
                                              sched, theta_state)
            x_hat_net, eps_theta = model.denoise(x_t, t, sched)
            x_hat_att = to_att(x_hat_net.data.astype(np.float64))
            sol = data_consistency(x_hat_att, y, cfg.cg_mu, cfg.cg_iters)
            if t == 1:
                x_next = sol
            else:
                eps_s = slerp_noise(draw, cfg.noise_seed, t) if cfg.eta > 0 else np.zeros_like(x_t)
                x_next = ddim_step(to_net(sol), eps_theta.data, eps_s, t, cfg.eta, sched).astype(dt)
        except (FloatingPointError, nnkit.NonFiniteError) as exc:
            raise ReconstructionError(f"DD3IP failed at timestep t={t}: {exc}") from exc
        data_term = float(np.mean((project_array(sol, y.geometry) - y.data) ** 2))
        prox_term = float(np.mean((sol - x_hat_att) ** 2))
        result.log.append(StepLog(t, adapt_loss, data_term, prox_term,
                                  _maybe_psnr(sol, truth), before, model.params.digest()))
        x_t = x_next
    result.x0 = Volume(np.asarray(x_t, dtype=np.float64))
    result.wall_time = time.perf_counter() - start
    return result


def inr_reconstruct(y: Sinogram, inr: InrModel, cfg: ReconConfig,
                    truth: Volume | None = None) -> ReconResult:
    """Plain INR baseline: rho = 0 with the same total step budget DINR spends."""
    start = time.perf_counter()
    fbp_vol = fbp(y, cfg.apodization)
    grid = CoordinateGrid.for_dims(fbp_vol.shape)
    steps = cfg.inr_steps_init + cfg.T * cfg.inr_steps_per_t
    result = ReconResult(Volume(np.zeros_like(fbp_vol.data)), config=cfg.to_dict())
    if steps > 0:
        fit_inr(inr, grid, y, fbp_vol, None, 0.0, steps, cfg.inr_lr)
    out = inr_forward(inr, grid, fbp_vol).data.astype(np.float64)
    result.x0 = Volume(out)
    result.wall_time = time.perf_counter() - start
    return result


def make_inr(cfg: ReconConfig) -> InrModel:
    return InrModel.create(cfg.inr_hidden, cfg.inr_w0, cfg.init_seed, cfg.np_dtype)


def reconstruct(y: Sinogram, cfg: ReconConfig, denoiser: DenoiserModel | str | None = None,
                truth: Volume | None = None) -> ReconResult:
    """Dispatch on ``cfg.method``; diffusion methods need denoiser weights (model or path)."""
    cfg.validate()
    if cfg.method == "fbp":
        start = time.perf_counter()
        res = ReconResult(fbp(y, cfg.apodization), config=cfg.to_dict())
        res.wall_time = time.perf_counter() - start
        return res
    if cfg.method == "inr":
        return inr_reconstruct(y, make_inr(cfg), cfg, truth)
    if denoiser is None:
        raise ReconstructionError(f"method {cfg.method!r} needs pretrained denoiser weights")
    if not isinstance(denoiser, DenoiserModel):
        denoiser = DenoiserModel.load(denoiser, dtype=cfg.np_dtype)
    else:
        denoiser = DenoiserModel(denoiser.params.astype(cfg.np_dtype), denoiser.arch,
                                 denoiser.schedule)
    if cfg.method == "dd3ip":
        return dd3ip_reconstruct(y, denoiser, cfg, truth=truth)
    return dinr_reconstruct(y, denoiser, make_inr(cfg), cfg, truth=truth)


def with_overrides(cfg: ReconConfig, **kw) -> ReconConfig:
    return replace(cfg, **kw)
