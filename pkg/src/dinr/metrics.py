"""PSNR, SSIM and nested-ROI PSNR sweeps."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

EXACT = math.inf   # PSNR of identical inputs
SSIM_WINDOW = 7
K1, K2 = 0.01, 0.03

NOMINAL_ANCHOR = (64, 96)
NOMINAL_SIZES = (64, 48, 32, 16, 8)


def _arr(x) -> np.ndarray:
    return np.asarray(getattr(x, "data", x), dtype=np.float64)


def psnr(x, ref, data_range: float = 1.0) -> float:
    """10 log10(range^2 / MSE); ``EXACT`` (inf) when the inputs are identical."""
    a, b = _arr(x), _arr(ref)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if not data_range > 0:
        raise ValueError("data_range must be positive")
    err = float(np.mean((a - b) ** 2))
    if err == 0.0:
        return EXACT
    return 10.0 * math.log10(data_range ** 2 / err)


def is_exact(value: float) -> bool:
    return value == EXACT


def _ssim_slice(a: np.ndarray, b: np.ndarray, data_range: float, win: int) -> float:
    c1 = (K1 * data_range) ** 2
    c2 = (K2 * data_range) ** 2
    wa = sliding_window_view(a, (win, win))
    wb = sliding_window_view(b, (win, win))
    mu_a = wa.mean(axis=(-2, -1))
    mu_b = wb.mean(axis=(-2, -1))
    var_a = (wa * wa).mean(axis=(-2, -1)) - mu_a ** 2
    var_b = (wb * wb).mean(axis=(-2, -1)) - mu_b ** 2
    cov = (wa * wb).mean(axis=(-2, -1)) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def ssim(x, ref, data_range: float = 1.0, window: int = SSIM_WINDOW) -> float:
    """Mean local SSIM over all valid 7x7 uniform windows, averaged over slices."""
    a, b = _arr(x), _arr(ref)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if not data_range > 0:
        raise ValueError("data_range must be positive")
    if a.ndim == 2:
        a, b = a[None], b[None]
    if a.shape[-1] < window or a.shape[-2] < window:
        raise ValueError(f"SSIM window {window} exceeds image {a.shape[-2:]}")
    if np.array_equal(a, b):
        return 1.0
    vals = [_ssim_slice(sa, sb, data_range, window) for sa, sb in zip(a, b)]
    return float(np.clip(np.mean(vals), -1.0, 1.0))


# ---------------------------------------------------------------- ROI sweep

@dataclass
class RoiSpec:
    """Anchor rectangle (row, col, height, width) plus nested square sizes.

    ``nominal_sizes`` are the labels reported; ``sizes`` the crop edge actually
    used (they differ only after :meth:`scaled_for`).
    """
    anchor: tuple[int, int, int, int]
    nominal_sizes: tuple[int, ...] = NOMINAL_SIZES
    sizes: tuple[int, ...] | None = None
    scale: float = 1.0

    def __post_init__(self):
        if self.sizes is None:
            self.sizes = tuple(self.nominal_sizes)
        if len(self.sizes) != len(self.nominal_sizes):
            raise ValueError("sizes and nominal_sizes must align")
        if any(b >= a for a, b in zip(self.sizes, self.sizes[1:])):
            raise ValueError("ROI sizes must be strictly decreasing")
        _, _, h, w = self.anchor
        if any(s > h or s > w for s in self.sizes):
            raise ValueError("every ROI must fit inside the anchor")

    def crop_box(self, size: int) -> tuple[int, int]:
        r, c, h, w = self.anchor
        return r + (h - size) // 2, c + (w - size) // 2

    @classmethod
    def scaled_for(cls, image_shape: tuple[int, int], anchor_rc: tuple[int, int] | None = None,
                   nominal_anchor: tuple[int, int] = NOMINAL_ANCHOR,
                   nominal_sizes: Sequence[int] = NOMINAL_SIZES) -> "RoiSpec":
        """Nominal 64x96 anchor and 64..8 crops, shrunk proportionally to fit the image."""
        h, w = image_shape
        scale = min(1.0, h / nominal_anchor[0], w / nominal_anchor[1])
        ah = max(1, int(round(nominal_anchor[0] * scale)))
        aw = max(1, int(round(nominal_anchor[1] * scale)))
        ah, aw = min(ah, h), min(aw, w)
        sizes = tuple(max(1, int(round(s * scale))) for s in nominal_sizes)
        sizes = tuple(min(s, ah, aw) for s in sizes)
        if anchor_rc is None:
            anchor_rc = ((h - ah) // 2, (w - aw) // 2)
        return cls((anchor_rc[0], anchor_rc[1], ah, aw), tuple(nominal_sizes), sizes, scale)


@dataclass
class RoiSweep:
    values: dict[int, float]            # nominal size -> dB
    sizes: dict[int, int]               # nominal size -> crop edge used
    scale: float = 1.0

    def rows(self) -> list[tuple[int, int, float]]:
        return [(n, self.sizes[n], v) for n, v in self.values.items()]


def crop(x: np.ndarray, spec: RoiSpec, size: int) -> np.ndarray:
    r0, c0 = spec.crop_box(size)
    return x[..., r0:r0 + size, c0:c0 + size]


def roi_psnr_sweep(x, ref, spec: RoiSpec, data_range: float = 1.0) -> RoiSweep:
    a, b = _arr(x), _arr(ref)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    r, c, h, w = spec.anchor
    if r < 0 or c < 0 or r + h > a.shape[-2] or c + w > a.shape[-1]:
        raise ValueError(f"anchor {spec.anchor} outside image {a.shape[-2:]}")
    values, used = {}, {}
    for nominal, size in zip(spec.nominal_sizes, spec.sizes):
        values[nominal] = psnr(crop(a, spec, size), crop(b, spec, size), data_range)
        used[nominal] = size
    return RoiSweep(values, used, spec.scale)


def propose_anchor(truth, height: int, width: int, threshold: float = 0.05) -> tuple[int, int]:
    """Top-left corner whose window best balances foreground and background
    (first slice; earliest position wins ties)."""
    img = _arr(truth)
    if img.ndim == 3:
        img = img[0]
    fg = (img > threshold).astype(np.float64)
    if height > img.shape[0] or width > img.shape[1]:
        raise ValueError("anchor larger than image")
    frac = sliding_window_view(fg, (height, width)).mean(axis=(-2, -1))
    score = np.abs(frac - 0.5)
    idx = np.unravel_index(np.argmin(score), score.shape)
    return int(idx[0]), int(idx[1])


def write_roi_csv(path, sweeps: dict[str, RoiSweep]) -> None:
    """Plot data: one row per ROI size, one column per method."""
    methods = list(sweeps)
    first = next(iter(sweeps.values()))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["size", "crop", *methods])
        for nominal in first.values:
            w.writerow([nominal, first.sizes[nominal],
                        *[fmt_db(sweeps[m].values[nominal]) for m in methods]])


# ---------------------------------------------------------------- reports

REPORT_COLUMNS = ["method", "views", "psnr", "ssim", "roi8", "roi16", "roi32", "roi48", "roi64"]


@dataclass
class MetricReport:
    method: str
    views: int
    psnr: float
    ssim: float
    roi_psnr: dict[int, float] = field(default_factory=dict)
    reference: str = "ground-truth"
    data_range: float = 1.0

    def row(self) -> list[str]:
        roi = [fmt_db(self.roi_psnr.get(k, float("nan"))) for k in (8, 16, 32, 48, 64)]
        return [self.method, str(self.views), fmt_db(self.psnr), f"{self.ssim:.4f}", *roi]


def fmt_db(v: float) -> str:
    if v == EXACT:
        return "exact"
    return f"{v:.4f}"


def evaluate(method: str, views: int, x, truth, spec: RoiSpec | None = None,
             data_range: float = 1.0) -> MetricReport:
    a = np.clip(_arr(x), 0.0, data_range)
    b = _arr(truth)
    roi = roi_psnr_sweep(a, b, spec, data_range).values if spec is not None else {}
    return MetricReport(method, views, psnr(a, b, data_range), ssim(a, b, data_range), roi,
                        data_range=data_range)


def write_reports(path, reports: Iterable[MetricReport]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_COLUMNS)
        for r in reports:
            w.writerow(r.row())
