import csv
import math

import numpy as np
import pytest

from dinr.metrics import (
    EXACT,
    NOMINAL_SIZES,
    MetricReport,
    RoiSpec,
    crop,
    evaluate,
    fmt_db,
    is_exact,
    propose_anchor,
    psnr,
    roi_psnr_sweep,
    ssim,
    write_reports,
    write_roi_csv,
)


def ssim_oracle(a, b, rng_=1.0, win=7):
    """Literal per-window formula with population statistics."""
    c1, c2 = (0.01 * rng_) ** 2, (0.03 * rng_) ** 2
    vals = []
    for i in range(a.shape[0] - win + 1):
        for j in range(a.shape[1] - win + 1):
            pa = a[i:i + win, j:j + win].ravel()
            pb = b[i:i + win, j:j + win].ravel()
            ma, mb = sum(pa) / pa.size, sum(pb) / pb.size
            va = sum((v - ma) ** 2 for v in pa) / pa.size
            vb = sum((v - mb) ** 2 for v in pb) / pb.size
            cv = sum((p - ma) * (q - mb) for p, q in zip(pa, pb)) / pa.size
            vals.append((2 * ma * mb + c1) * (2 * cv + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2)))
    return sum(vals) / len(vals)


# ---------------------------------------------------------------- psnr

def test_psnr_exact_sentinel():
    x = np.random.default_rng(0).uniform(size=(8, 8))
    assert is_exact(psnr(x, x.copy())) and psnr(x, x) == EXACT


def test_psnr_constant_offset():
    assert abs(psnr(np.full((4, 4), 0.1), np.zeros((4, 4)), 1.0) - 20.0) < 1e-12


def test_psnr_matches_independent_computation():
    rng = np.random.default_rng(1)
    a, b = rng.uniform(size=(64, 64)), rng.uniform(size=(64, 64))
    mse = ((a - b) ** 2).sum() / a.size
    assert abs(psnr(a, b, 1.0) - 20 * math.log10(1.0 / math.sqrt(mse))) < 1e-10


def test_psnr_symmetric_and_scaling():
    rng = np.random.default_rng(2)
    a, b = rng.uniform(size=(16, 16)), rng.uniform(size=(16, 16))
    assert psnr(a, b) == psnr(b, a)
    assert abs(psnr(3 * a + 1, 3 * b + 1, 3.0) - psnr(a, b, 1.0)) < 1e-10


def test_psnr_errors():
    with pytest.raises(ValueError):
        psnr(np.zeros(3), np.zeros(4))
    with pytest.raises(ValueError):
        psnr(np.zeros(3), np.ones(3), 0.0)


# ---------------------------------------------------------------- ssim

def test_ssim_identical_is_one():
    x = np.random.default_rng(0).uniform(size=(16, 16))
    assert ssim(x, x) == 1.0


def test_ssim_anticorrelated_negative():
    # period-7 pattern: every 7x7 window has zero mean, so only the structure term flips
    i, j = np.mgrid[0:21, 0:21]
    ref = np.sin(2 * np.pi * j / 7) + np.cos(2 * np.pi * i / 7)
    assert ssim(-ref, ref) < -0.9


def test_ssim_matches_scalar_oracle():
    rng = np.random.default_rng(4)
    a, b = rng.uniform(size=(12, 13)), rng.uniform(size=(12, 13))
    assert abs(ssim(a, b) - ssim_oracle(a, b)) < 1e-8


def test_ssim_symmetric_and_bounded():
    rng = np.random.default_rng(5)
    for _ in range(20):
        a, b = rng.normal(size=(2, 10, 10)), rng.normal(size=(2, 10, 10))
        s = ssim(a, b, 4.0)
        assert -1 <= s <= 1 and abs(s - ssim(b, a, 4.0)) < 1e-15


def test_ssim_scale_invariance():
    rng = np.random.default_rng(6)
    a, b = rng.uniform(size=(16, 16)), rng.uniform(size=(16, 16))
    assert abs(ssim(5 * a, 5 * b, 5.0) - ssim(a, b, 1.0)) < 1e-6


def test_ssim_per_slice_average():
    rng = np.random.default_rng(7)
    a, b = rng.uniform(size=(2, 9, 9)), rng.uniform(size=(2, 9, 9))
    assert abs(ssim(a, b) - (ssim(a[0], b[0]) + ssim(a[1], b[1])) / 2) < 1e-14


def test_ssim_window_too_large():
    with pytest.raises(ValueError, match="window"):
        ssim(np.zeros((5, 5)), np.ones((5, 5)))


# ---------------------------------------------------------------- ROI

def test_roi_sizes_nominal_at_full_scale():
    spec = RoiSpec.scaled_for((128, 128))
    assert spec.scale == 1.0 and spec.anchor[2:] == (64, 96)
    assert spec.sizes == NOMINAL_SIZES == (64, 48, 32, 16, 8)


def test_roi_scaled_at_64px():
    spec = RoiSpec.scaled_for((64, 64))
    assert math.isclose(spec.scale, 64 / 96)
    assert spec.anchor[2:] == (43, 64)
    assert spec.nominal_sizes == (64, 48, 32, 16, 8)
    assert spec.sizes == (43, 32, 21, 11, 5)
    sw = roi_psnr_sweep(np.zeros((64, 64)), np.zeros((64, 64)), spec)
    assert list(sw.values) == [64, 48, 32, 16, 8] and sw.scale == spec.scale


def test_roi_regions_inside_anchor():
    spec = RoiSpec.scaled_for((200, 200), anchor_rc=(10, 20))
    r, c, h, w = spec.anchor
    for s in spec.sizes:
        r0, c0 = spec.crop_box(s)
        assert r <= r0 and r0 + s <= r + h and c <= c0 and c0 + s <= c + w


def test_roi_identical_all_exact():
    x = np.random.default_rng(0).uniform(size=(100, 100))
    sw = roi_psnr_sweep(x, x.copy(), RoiSpec.scaled_for((100, 100)))
    assert all(is_exact(v) for v in sw.values.values())


def test_roi_locality():
    rng = np.random.default_rng(1)
    ref = rng.uniform(size=(100, 100))
    x = ref.copy()
    x[:3, :3] += 0.5
    spec = RoiSpec.scaled_for((100, 100))
    assert all(is_exact(v) for v in roi_psnr_sweep(x, ref, spec).values.values())
    assert math.isfinite(psnr(x, ref))


def test_roi_crop_oracle():
    rng = np.random.default_rng(2)
    a, b = rng.uniform(size=(2, 64, 64)), rng.uniform(size=(2, 64, 64))
    spec = RoiSpec.scaled_for((64, 64), anchor_rc=(5, 0))
    sw = roi_psnr_sweep(a, b, spec)
    r, c, h, w = spec.anchor
    for nominal, s in zip(spec.nominal_sizes, spec.sizes):
        r0, c0 = r + (h - s) // 2, c + (w - s) // 2
        direct = psnr(a[:, r0:r0 + s, c0:c0 + s], b[:, r0:r0 + s, c0:c0 + s])
        assert abs(sw.values[nominal] - direct) < 1e-10
        assert np.array_equal(crop(a, spec, s), a[:, r0:r0 + s, c0:c0 + s])


def test_roi_full_image_equals_global():
    rng = np.random.default_rng(3)
    a, b = rng.uniform(size=(32, 32)), rng.uniform(size=(32, 32))
    spec = RoiSpec((0, 0, 32, 32), nominal_sizes=(32,))
    assert roi_psnr_sweep(a, b, spec).values[32] == psnr(a, b)


def test_roi_errors():
    with pytest.raises(ValueError):
        roi_psnr_sweep(np.zeros((50, 50)), np.zeros((50, 50)), RoiSpec((0, 0, 64, 96)))
    with pytest.raises(ValueError):
        RoiSpec((0, 0, 64, 96), nominal_sizes=(8, 16))
    with pytest.raises(ValueError):
        RoiSpec((0, 0, 32, 32), nominal_sizes=(64,))


def test_propose_anchor_balances_foreground():
    img = np.zeros((40, 40))
    img[:, 20:] = 1.0
    r, c = propose_anchor(img, 10, 20)
    assert c == 10


# ---------------------------------------------------------------- reports

def test_report_row_and_csv(tmp_path):
    rep = MetricReport("fbp", 8, 21.123456, 0.5, {8: EXACT, 16: 30.0, 32: 25.0, 48: 22.0, 64: 21.0})
    assert rep.row() == ["fbp", "8", "21.1235", "0.5000", "exact", "30.0000", "25.0000",
                         "22.0000", "21.0000"]
    write_reports(tmp_path / "r.csv", [rep])
    rows = list(csv.reader(open(tmp_path / "r.csv")))
    assert rows[0] == ["method", "views", "psnr", "ssim", "roi8", "roi16", "roi32", "roi48", "roi64"]


def test_evaluate_clips_and_reports():
    truth = np.random.default_rng(0).uniform(size=(1, 64, 64))
    rep = evaluate("x", 4, truth + 2.0, truth, RoiSpec.scaled_for((64, 64)))
    assert rep.psnr == psnr(np.ones_like(truth), truth)
    assert set(rep.roi_psnr) == set(NOMINAL_SIZES)


def test_roi_plot_csv(tmp_path):
    a = np.random.default_rng(0).uniform(size=(64, 64))
    spec = RoiSpec.scaled_for((64, 64))
    sweeps = {"fbp": roi_psnr_sweep(a, a * 0.9, spec), "inr": roi_psnr_sweep(a, a, spec)}
    write_roi_csv(tmp_path / "roi.csv", sweeps)
    rows = list(csv.reader(open(tmp_path / "roi.csv")))
    assert rows[0] == ["size", "crop", "fbp", "inr"]
    assert [r[0] for r in rows[1:]] == ["64", "48", "32", "16", "8"]
    assert all(r[3] == "exact" for r in rows[1:])
    assert fmt_db(12.0) == "12.0000"
