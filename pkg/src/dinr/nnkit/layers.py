"""The two network families the pipeline needs: a SIREN-style MLP and a small CNN."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import tensor as T
from .params import ParamSet
from .tensor import Tensor

ACTIVATIONS = ("sine", "relu", "identity")


@dataclass(frozen=True)
class MlpSpec:
    widths: tuple[int, ...]
    activation: str = "sine"
    w0: float = 30.0

    def __post_init__(self):
        if len(self.widths) < 2:
            raise ValueError("an MLP needs at least input and output widths")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    def layout(self) -> list[tuple[str, tuple[int, ...]]]:
        out = []
        for i, (a, b) in enumerate(zip(self.widths[:-1], self.widths[1:])):
            out += [(f"l{i}.w", (a, b)), (f"l{i}.b", (b,))]
        return out

    def to_dict(self) -> dict:
        return {"widths": list(self.widths), "activation": self.activation, "w0": self.w0}

    @classmethod
    def from_dict(cls, d: dict) -> "MlpSpec":
        return cls(tuple(d["widths"]), d.get("activation", "sine"), float(d.get("w0", 30.0)))


@dataclass(frozen=True)
class ConvSpec:
    channels: tuple[int, ...] = (1, 16, 32, 32, 16, 1)
    kernel: int = 3
    emb_dim: int = 16
    activation: str = "relu"

    def __post_init__(self):
        if self.kernel % 2 != 1:
            raise ValueError("kernel size must be odd")
        if len(self.channels) < 2:
            raise ValueError("a conv net needs at least input and output channels")

    def layout(self) -> list[tuple[str, tuple[int, ...]]]:
        k = self.kernel
        out = []
        for i, (a, b) in enumerate(zip(self.channels[:-1], self.channels[1:])):
            out += [(f"c{i}.w", (b, a, k, k)), (f"c{i}.b", (b,))]
        out.append(("temb.w", (self.emb_dim, self.channels[1])))
        return out

    def to_dict(self) -> dict:
        return {"channels": list(self.channels), "kernel": self.kernel,
                "emb_dim": self.emb_dim, "activation": self.activation}

    @classmethod
    def from_dict(cls, d: dict) -> "ConvSpec":
        return cls(tuple(d["channels"]), int(d["kernel"]), int(d["emb_dim"]),
                   d.get("activation", "relu"))


def _check_layout(params: ParamSet, layout) -> None:
    expect = [(n, tuple(s)) for n, s in layout]
    have = [(s.name, s.shape) for s in params.layout]
    if expect != have:
        raise ValueError("parameter layout does not match architecture")


# ---------------------------------------------------------------- init

def init_siren(arch: MlpSpec, rng: np.random.Generator, dtype=np.float64) -> ParamSet:
    """SIREN scheme: first layer U(-1/n, 1/n), later layers U(-sqrt(6/n)/w0, +)."""
    p = ParamSet(arch.layout(), dtype=dtype)
    for i, n in enumerate(arch.widths[:-1]):
        bound = 1.0 / n if i == 0 else math.sqrt(6.0 / n) / arch.w0
        w = p.array(f"l{i}.w")
        w[...] = rng.uniform(-bound, bound, size=w.shape)
        b = p.array(f"l{i}.b")
        b[...] = rng.uniform(-1 / math.sqrt(n), 1 / math.sqrt(n), size=b.shape)
    return p


def init_convnet(arch: ConvSpec, rng: np.random.Generator, dtype=np.float64) -> ParamSet:
    p = ParamSet(arch.layout(), dtype=dtype)
    k = arch.kernel
    n_layers = len(arch.channels) - 1
    for i, cin in enumerate(arch.channels[:-1]):
        fan_in = cin * k * k
        std = math.sqrt(2.0 / fan_in)
        if i == n_layers - 1:
            std *= 0.1
        w = p.array(f"c{i}.w")
        w[...] = rng.normal(0.0, std, size=w.shape)
    te = p.array("temb.w")
    te[...] = rng.normal(0.0, 1.0 / math.sqrt(arch.emb_dim), size=te.shape)
    return p


# ---------------------------------------------------------------- MLP

def _activate(h: Tensor, activation: str, w0: float) -> Tensor:
    if activation == "sine":
        return T.sin(T.scale(h, w0))
    if activation == "relu":
        return T.relu(h)
    return h


def forward_mlp(params: ParamSet, x, arch: MlpSpec) -> Tensor:
    """Evaluate the MLP on rows of ``x``; every hidden layer uses ``arch.activation``,
    the output layer is affine."""
    x = T.as_tensor(x)
    if x.shape[-1] != arch.widths[0]:
        raise ValueError(f"input width {x.shape[-1]} != architecture input {arch.widths[0]}")
    _check_layout(params, arch.layout())
    h = x
    n = len(arch.widths) - 1
    for i in range(n):
        h = T.matmul(h, params[f"l{i}.w"]) + params[f"l{i}.b"]
        if i < n - 1:
            h = _activate(h, arch.activation, arch.w0)
    return h


# ---------------------------------------------------------------- conv

def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """'Same' zero-padded 2-D cross-correlation. x: (N, C, H, W), w: (Co, C, k, k)."""
    x, w = T.as_tensor(x), T.as_tensor(w)
    n, c, h, wd = x.shape
    co, ci, k, k2 = w.shape
    if ci != c:
        raise ValueError(f"channel mismatch: input has {c}, kernel expects {ci}")
    if k > h or k2 > wd:
        raise ValueError(f"kernel {k}x{k2} larger than input {h}x{wd}")
    p = k // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)))
    cols = sliding_window_view(xp, (k, k), axis=(2, 3))           # N C H W k k
    cols = cols.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * wd, c * k * k)
    wmat = w.data.reshape(co, -1)
    out = cols @ wmat.T
    out = out.reshape(n, h, wd, co).transpose(0, 3, 1, 2)

    def fn(g):
        gm = g.transpose(0, 2, 3, 1).reshape(n * h * wd, co)
        gw = (gm.T @ cols).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (gm @ wmat).reshape(n, h, wd, c, k, k)
            dxp = np.zeros(xp.shape, dtype=x.dtype)
            for i in range(k):
                for j in range(k):
                    dxp[:, :, i:i + h, j:j + wd] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = dxp[:, :, p:p + h, p:p + wd]
        return gx, gw

    y = T._make(np.ascontiguousarray(out), (x, w), fn, "conv2d")
    if b is not None:
        y = y + T.reshape(b, (1, co, 1, 1))
    return y


def timestep_embedding(t, dim: int, dtype=np.float64) -> np.ndarray:
    """Sinusoidal embedding of integer timestep(s); shape (dim,) or (len(t), dim)."""
    t_arr = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half, 1))
    ang = t_arr[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    if emb.shape[1] < dim:
        emb = np.pad(emb, ((0, 0), (0, dim - emb.shape[1])))
    emb = emb.astype(dtype)
    return emb[0] if np.ndim(t) == 0 else emb


def forward_convnet(params: ParamSet, x, arch: ConvSpec, t_embed) -> Tensor:
    """Run the CNN on (C, H, W) or (N, C, H, W) input.

    ``t_embed`` is a raw timestep embedding, (emb_dim,) or (N, emb_dim); it is
    projected to the first hidden width and added per channel after layer 1.
    """
    x = T.as_tensor(x)
    squeeze = x.data.ndim == 3
    if squeeze:
        x = T.reshape(x, (1,) + x.shape)
    if x.data.ndim != 4:
        raise ValueError("convnet input must be (C, H, W) or (N, C, H, W)")
    if x.shape[1] != arch.channels[0]:
        raise ValueError(f"channel mismatch: input has {x.shape[1]}, arch expects {arch.channels[0]}")
    _check_layout(params, arch.layout())
    emb = T.as_tensor(t_embed)
    if emb.data.ndim == 1:
        emb = T.reshape(emb, (1, emb.shape[0]))
    if emb.shape[1] != arch.emb_dim:
        raise ValueError(f"timestep embedding width {emb.shape[1]} != {arch.emb_dim}")
    n_layers = len(arch.channels) - 1
    h = x
    for i in range(n_layers):
        h = conv2d(h, params[f"c{i}.w"], params[f"c{i}.b"])
        if i < n_layers - 1:
            h = _activate(h, arch.activation, 1.0)
        if i == 0:
            proj = T.matmul(emb, params["temb.w"])
            h = h + T.reshape(proj, (proj.shape[0], proj.shape[1], 1, 1))
    if squeeze:
        h = T.reshape(h, h.shape[1:])
    return h
