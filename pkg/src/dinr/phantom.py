"""Synthetic images: random ellipses for pretraining, disc microstructures for evaluation.

Positions and sizes are in normalised units: the image spans [-1, 1] on both
axes and the inscribed circle is the unit disc.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .tomo import Volume


class PhantomError(RuntimeError):
    pass


@dataclass(frozen=True)
class EllipseSpec:
    center: tuple[float, float]
    semi_axes: tuple[float, float]
    rotation: float
    intensity: float

    def __post_init__(self):
        a, b = self.semi_axes
        if a <= 0 or b <= 0:
            raise ValueError("semi-axes must be positive")


@dataclass(frozen=True)
class Disc:
    x: float
    y: float
    r: float
    intensity: float


@dataclass(frozen=True)
class PhantomConfig:
    image_size: int = 64
    n_slices: int = 2
    seed: int = 0
    # ellipse images
    ellipse_count: tuple[int, int] = (1, 8)
    ellipse_intensity: tuple[float, float] = (0.1, 1.0)
    ellipse_axes: tuple[float, float] = (0.05, 0.6)
    ellipse_center: float = 0.7
    # microstructure
    matrix_radius: float = 0.85
    matrix_intensity: float = 0.5
    aggregate_count: tuple[int, int] = (10, 14)
    aggregate_radius: tuple[float, float] = (0.07, 0.17)
    aggregate_intensity: tuple[float, float] = (0.7, 0.9)
    pore_count: tuple[int, int] = (12, 20)
    pore_radius: tuple[float, float] = (0.035, 0.06)
    min_gap: float = 0.02
    slice_jitter: float = 0.15
    supersample: int = 4
    max_attempts: int = 1000

    def __post_init__(self):
        if self.image_size < 2 or self.n_slices < 1:
            raise ValueError("image_size must be >= 2 and n_slices >= 1")
        for name in ("ellipse_count", "ellipse_intensity", "ellipse_axes", "aggregate_count",
                     "aggregate_radius", "aggregate_intensity", "pore_count", "pore_radius"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name}: empty range ({lo}, {hi})")
            if lo < 0:
                raise ValueError(f"{name}: negative bound")
        if not 0 < self.matrix_radius <= 1:
            raise ValueError("matrix_radius must be in (0, 1]")
        if self.supersample < 1:
            raise ValueError("supersample must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


def _pixel_coords(n: int, supersample: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Normalised (x, y) sample positions, shape (n, n, ss*ss)."""
    off = (np.arange(supersample) + 0.5) / supersample - 0.5
    ox, oy = np.meshgrid(off, off)
    idx = np.arange(n) - (n - 1) / 2.0
    xs = (idx[None, :, None] + ox.ravel()[None, None, :]) / (n / 2.0)
    ys = (idx[:, None, None] + oy.ravel()[None, None, :]) / (n / 2.0)
    return np.broadcast_to(xs, (n, n, ox.size)), np.broadcast_to(ys, (n, n, ox.size))


def fov_mask(n: int) -> np.ndarray:
    x, y = _pixel_coords(n)
    return (x[..., 0] ** 2 + y[..., 0] ** 2) <= 1.0


def render_ellipses(ellipses: Sequence[EllipseSpec], n: int) -> np.ndarray:
    """Sum of ellipse indicators at pixel centres, clipped to [0, 1], zero outside the FOV."""
    x, y = _pixel_coords(n)
    x, y = x[..., 0], y[..., 0]
    img = np.zeros((n, n))
    for e in ellipses:
        c, s = np.cos(e.rotation), np.sin(e.rotation)
        dx, dy = x - e.center[0], y - e.center[1]
        u = dx * c + dy * s
        v = -dx * s + dy * c
        inside = (u / e.semi_axes[0]) ** 2 + (v / e.semi_axes[1]) ** 2 <= 1.0
        img[inside] += e.intensity
    img = np.clip(img, 0.0, 1.0)
    img[~fov_mask(n)] = 0.0
    return img


def random_ellipses(cfg: PhantomConfig, rng: np.random.Generator) -> list[EllipseSpec]:
    k = int(rng.integers(cfg.ellipse_count[0], cfg.ellipse_count[1] + 1))
    out = []
    for _ in range(k):
        center = tuple(rng.uniform(-cfg.ellipse_center, cfg.ellipse_center, size=2))
        axes = tuple(rng.uniform(*cfg.ellipse_axes, size=2))
        out.append(EllipseSpec(center, axes, float(rng.uniform(0, np.pi)),
                               float(rng.uniform(*cfg.ellipse_intensity))))
    return out


def random_ellipse_image(cfg: PhantomConfig, seed: int) -> Volume:
    rng = np.random.default_rng(seed)
    img = render_ellipses(random_ellipses(cfg, rng), cfg.image_size)
    return Volume(img[None], meta={"seed": int(seed), "kind": "ellipses"})


def ellipse_dataset(cfg: PhantomConfig, n: int, base_seed: int) -> list[Volume]:
    """``n`` ellipse images seeded ``base_seed + i``, mapped to [-1, 1] by x -> 2x - 1."""
    if n < 1:
        raise ValueError("dataset size must be >= 1")
    out = []
    for i in range(n):
        v = random_ellipse_image(cfg, base_seed + i)
        out.append(Volume(2.0 * v.data - 1.0, meta={**v.meta, "normalized": True}))
    return out


def write_manifest(path, entries: Sequence[tuple[int, int, str]]) -> None:
    with open(path, "w") as fh:
        for idx, seed, fpath in entries:
            fh.write(f"{idx} {seed} {fpath}\n")


# ---------------------------------------------------------------- microstructure

def _place(rng, count_range, radius_range, intensity_range, placed, cfg, limit):
    count = int(rng.integers(count_range[0], count_range[1] + 1))
    new = []
    for _ in range(count):
        for _attempt in range(cfg.max_attempts):
            r = float(rng.uniform(*radius_range))
            reach = limit - r - cfg.min_gap
            if reach <= 0:
                continue
            rad = reach * np.sqrt(rng.uniform())
            ang = rng.uniform(0, 2 * np.pi)
            x, y = rad * np.cos(ang), rad * np.sin(ang)
            if all(np.hypot(x - d.x, y - d.y) >= r + d.r + cfg.min_gap for d in placed + new):
                lo, hi = intensity_range
                new.append(Disc(float(x), float(y), r, float(rng.uniform(lo, hi)) if hi > lo else lo))
                break
        else:
            raise PhantomError(f"could not place disc after {cfg.max_attempts} attempts; "
                               "configuration is overcrowded")
    return new


def microstructure_layout(cfg: PhantomConfig) -> list[list[Disc]]:
    """Per-slice disc lists: aggregates (intensity > 0) followed by pores (intensity 0).

    Slices share centres; later slices shrink each radius by a random factor in
    [1 - slice_jitter, 1], which keeps every pair non-overlapping.
    """
    rng = np.random.default_rng(cfg.seed)
    agg = _place(rng, cfg.aggregate_count, cfg.aggregate_radius, cfg.aggregate_intensity,
                 [], cfg, cfg.matrix_radius)
    pores = _place(rng, cfg.pore_count, cfg.pore_radius, (0.0, 0.0), agg, cfg, cfg.matrix_radius)
    base = agg + pores
    slices = [base]
    for _ in range(1, cfg.n_slices):
        f = rng.uniform(1.0 - cfg.slice_jitter, 1.0, size=len(base))
        slices.append([Disc(d.x, d.y, d.r * float(k), d.intensity) for d, k in zip(base, f)])
    return slices


def render_discs(discs: Sequence[Disc], cfg: PhantomConfig) -> np.ndarray:
    n = cfg.image_size
    x, y = _pixel_coords(n, cfg.supersample)
    sub = np.zeros(x.shape)
    sub[x ** 2 + y ** 2 <= cfg.matrix_radius ** 2] = cfg.matrix_intensity
    for d in discs:
        sub[(x - d.x) ** 2 + (y - d.y) ** 2 <= d.r ** 2] = d.intensity
    img = sub.mean(axis=-1)
    img[~fov_mask(n)] = 0.0
    return img


def microstructure_phantom(cfg: PhantomConfig) -> Volume:
    """Matrix disc with aggregates and pores, ``cfg.n_slices`` correlated slices, in [0, 1]."""
    layout = microstructure_layout(cfg)
    data = np.stack([render_discs(d, cfg) for d in layout])
    return Volume(data, meta={"seed": cfg.seed, "kind": "microstructure"})
