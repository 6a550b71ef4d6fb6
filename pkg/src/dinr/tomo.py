"""Parallel-beam geometry, matched Joseph projector pair, FBP and view subsampling.

Conventions: pixel (row r, col c) sits at x = c - (W-1)/2, y = r - (H-1)/2.
A view at angle theta integrates along direction d = (-sin theta, cos theta);
the detector axis is u = (cos theta, sin theta), so at theta = 0 rays run
along +y and detector bins map left-to-right onto columns.  Bin k is centred
at s_k = (k - (n_det-1)/2) * spacing.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from .nnkit import tensor as T


class GeometryError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Geometry:
    angles: np.ndarray
    n_detectors: int
    image_size: tuple[int, int]
    detector_spacing: float = 1.0

    def __post_init__(self):
        a = np.asarray(self.angles, dtype=np.float64)
        object.__setattr__(self, "angles", a)
        object.__setattr__(self, "image_size", tuple(int(v) for v in self.image_size))
        if a.ndim != 1 or a.size == 0:
            raise GeometryError("angles must be a non-empty 1-D array")
        if np.any(a < 0) or np.any(a >= np.pi):
            raise GeometryError("angles must lie in [0, pi)")
        if np.any(np.diff(a) <= 0):
            raise GeometryError("angles must be strictly increasing")
        if self.n_detectors < 1:
            raise GeometryError("n_detectors must be positive")
        if self.detector_spacing <= 0:
            raise GeometryError("detector_spacing must be positive")
        h, w = self.image_size
        if self.n_detectors * self.detector_spacing < math.hypot(h, w):
            warnings.warn("detector array narrower than the image diagonal; "
                          "corner regions are not fully covered", stacklevel=3)

    @property
    def n_views(self) -> int:
        return int(self.angles.size)

    def key(self) -> tuple:
        return (self.angles.tobytes(), self.n_detectors, self.image_size, float(self.detector_spacing))

    def __eq__(self, other):
        return isinstance(other, Geometry) and self.key() == other.key()

    def __hash__(self):
        return hash(self.key())


def default_detectors(n: int) -> int:
    """Smallest odd detector count covering the diagonal of an n x n image."""
    d = math.ceil(math.sqrt(2.0) * n)
    return d if d % 2 else d + 1


def parallel_geometry(n_views: int, image_size: int, n_detectors: int | None = None,
                      detector_spacing: float = 1.0) -> Geometry:
    """Equally spaced angles over [0, pi)."""
    angles = np.arange(n_views) * (np.pi / n_views)
    return Geometry(angles, n_detectors or default_detectors(image_size),
                    (image_size, image_size), detector_spacing)


@dataclass
class Volume:
    data: np.ndarray
    pixel_size: float = 1.0
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim == 2:
            self.data = self.data[None]
        if self.data.ndim != 3:
            raise ValueError("volume data must be (slices, H, W)")
        if self.data.shape[1] != self.data.shape[2]:
            raise ValueError("volume slices must be square")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass
class Sinogram:
    geometry: Geometry
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim == 2:
            self.data = self.data[None]
        g = self.geometry
        if self.data.ndim != 3 or self.data.shape[1:] != (g.n_views, g.n_detectors):
            raise GeometryError(f"sinogram shape {self.data.shape} inconsistent with geometry "
                                f"({g.n_views} views, {g.n_detectors} detectors)")


# ---------------------------------------------------------------- system matrix

def _joseph_view(theta: float, geom: Geometry):
    h, w = geom.image_size
    nd = geom.n_detectors
    s = (np.arange(nd) - (nd - 1) / 2.0) * geom.detector_spacing
    live = np.abs(s) <= min(h, w) / 2.0
    c, sn = math.cos(theta), math.sin(theta)
    if abs(c) >= abs(sn):
        # step over rows; x = s/cos - y tan
        ys = np.arange(h) - (h - 1) / 2.0
        pos = s[:, None] / c - ys[None, :] * (sn / c) + (w - 1) / 2.0
        step = 1.0 / abs(c)
        fixed = np.broadcast_to(np.arange(h)[None, :], pos.shape)
        n_moving = w
        along_rows = True
    else:
        # step over columns; y = s/sin - x cot
        xs = np.arange(w) - (w - 1) / 2.0
        pos = s[:, None] / sn - xs[None, :] * (c / sn) + (h - 1) / 2.0
        step = 1.0 / abs(sn)
        fixed = np.broadcast_to(np.arange(w)[None, :], pos.shape)
        n_moving = h
        along_rows = False
    lo = np.floor(pos)
    frac = pos - lo
    lo = lo.astype(np.int64)
    det = np.broadcast_to(np.arange(nd)[:, None], pos.shape)
    rows, cols, vals = [], [], []
    for idx, wt in ((lo, (1.0 - frac) * step), (lo + 1, frac * step)):
        ok = (idx >= 0) & (idx < n_moving) & live[:, None] & (wt != 0)
        m = idx[ok]
        f = fixed[ok]
        pix = f * w + m if along_rows else m * w + f
        rows.append(det[ok])
        cols.append(pix)
        vals.append(wt[ok])
    return np.concatenate(rows), np.concatenate(cols), np.concatenate(vals)


@lru_cache(maxsize=32)
def _system_matrix_cached(geom: Geometry, dtype_str: str) -> sp.csr_matrix:
    h, w = geom.image_size
    nd = geom.n_detectors
    rows, cols, vals = [], [], []
    for v, theta in enumerate(geom.angles):
        r, c, val = _joseph_view(float(theta), geom)
        rows.append(r + v * nd)
        cols.append(c)
        vals.append(val)
    mat = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                        shape=(geom.n_views * nd, h * w)).tocsr()
    mat.sum_duplicates()
    mat.sort_indices()
    return mat.astype(np.dtype(dtype_str))


def system_matrix(geom: Geometry, dtype=np.float64) -> sp.csr_matrix:
    """Sparse Joseph matrix A, rows = (view, detector), cols = (row, col) pixels."""
    return _system_matrix_cached(geom, np.dtype(dtype).str)


def _transpose(geom: Geometry, dtype) -> sp.csr_matrix:
    return _transpose_cached(geom, np.dtype(dtype).str)


@lru_cache(maxsize=32)
def _transpose_cached(geom: Geometry, dtype_str: str) -> sp.csr_matrix:
    return _system_matrix_cached(geom, dtype_str).T.tocsr()


def _apply(mat: sp.csr_matrix, x: np.ndarray, out_tail: tuple[int, ...]) -> np.ndarray:
    s = x.shape[0]
    flat = x.reshape(s, -1).T
    res = mat @ flat
    return np.ascontiguousarray(res.T).reshape((s,) + out_tail)


def project_array(x: np.ndarray, geom: Geometry) -> np.ndarray:
    """A applied slice-wise to an (S, H, W) array."""
    if x.shape[1:] != geom.image_size:
        raise GeometryError(f"volume slices {x.shape[1:]} do not match geometry {geom.image_size}")
    dt = x.dtype if x.dtype in (np.float32, np.float64) else np.float64
    return _apply(system_matrix(geom, dt), x.astype(dt, copy=False), (geom.n_views, geom.n_detectors))


def backproject_array(y: np.ndarray, geom: Geometry) -> np.ndarray:
    """A^T applied slice-wise to an (S, views, detectors) array."""
    if y.shape[1:] != (geom.n_views, geom.n_detectors):
        raise GeometryError(f"sinogram {y.shape[1:]} does not match geometry")
    dt = y.dtype if y.dtype in (np.float32, np.float64) else np.float64
    return _apply(_transpose(geom, dt), y.astype(dt, copy=False), geom.image_size)


def project(vol: Volume, geom: Geometry) -> Sinogram:
    return Sinogram(geom, project_array(vol.data, geom))


def backproject(sino: Sinogram) -> Volume:
    return Volume(backproject_array(sino.data, sino.geometry))


def project_tensor(x: T.Tensor, geom: Geometry) -> T.Tensor:
    """Differentiable A for an (S, H, W) tensor."""
    return T.linear_map(x, lambda a: project_array(a, geom),
                        lambda g: backproject_array(g, geom), name="project")


# ---------------------------------------------------------------- FBP

def ramp_filter(n_detectors: int, spacing: float = 1.0, apodization: str = "ram-lak") -> np.ndarray:
    """Frequency response of the band-limited ramp on the zero-padded grid.

    Built from the sampled spatial ramp kernel (1/4 at 0, -1/(pi n)^2 at odd n)
    so the DC term is correct; magnitude tracks |f| up to Nyquist.
    """
    size = 1 << int(math.ceil(math.log2(max(2 * n_detectors, 2))))
    n = np.concatenate([np.arange(0, size // 2 + 1), np.arange(-size // 2 + 1, 0)])
    h = np.zeros(size)
    h[0] = 0.25
    odd = n % 2 == 1
    h[odd] = -1.0 / (np.pi * n[odd]) ** 2
    resp = np.real(np.fft.rfft(h)) / spacing
    if apodization == "hann":
        f = np.fft.rfftfreq(size)
        resp *= 0.5 * (1.0 + np.cos(2.0 * np.pi * f))
    elif apodization != "ram-lak":
        raise ValueError(f"unknown apodization {apodization!r}")
    return resp


def filter_sinogram(data: np.ndarray, spacing: float = 1.0, apodization: str = "ram-lak") -> np.ndarray:
    nd = data.shape[-1]
    resp = ramp_filter(nd, spacing, apodization)
    size = 2 * (resp.size - 1)
    spec = np.fft.rfft(data, n=size, axis=-1)
    return np.fft.irfft(spec * resp, n=size, axis=-1)[..., :nd]


def fbp(sino: Sinogram, apodization: str = "ram-lak") -> Volume:
    """Ramp-filtered backprojection through the matched adjoint, scaled by pi / n_views."""
    g = sino.geometry
    if g.n_detectors < 2:
        raise GeometryError("FBP needs at least 2 detectors")
    q = filter_sinogram(np.asarray(sino.data, dtype=np.float64), g.detector_spacing, apodization)
    return Volume(backproject_array(q, g) * (np.pi / g.n_views))


# ---------------------------------------------------------------- sub-sampling

def subsample_views(geom: Geometry, factor: int) -> Geometry:
    """Keep every ``factor``-th angle starting at index 0 (ceil(n / factor) views)."""
    if factor < 1:
        raise ValueError("factor must be >= 1")
    if factor > geom.n_views:
        raise ValueError(f"factor {factor} exceeds number of views {geom.n_views}")
    return Geometry(geom.angles[::factor], geom.n_detectors, geom.image_size, geom.detector_spacing)


def select_views(geom: Geometry, n_views: int) -> Geometry:
    """Keep ``n_views`` angles evenly strided through the full set (preset view counts)."""
    if not 1 <= n_views <= geom.n_views:
        raise ValueError(f"cannot select {n_views} of {geom.n_views} views")
    idx = np.unique(np.round(np.linspace(0, geom.n_views, n_views, endpoint=False)).astype(int))
    return Geometry(geom.angles[idx], geom.n_detectors, geom.image_size, geom.detector_spacing)
