import math

import numpy as np
import pytest

from glfcr.engine import ShapeError
from glfcr.metrics import (BIN_EDGES, PSNR_PERFECT, SceneMetrics, bin_index,
                           binned_report, format_report, mae, psnr,
                           report_to_tsv, sam, score_scene, ssim)


def rand_pair(seed, bands=3, h=24, w=24):
    rng = np.random.default_rng(seed)
    return rng.random((bands, h, w)), rng.random((bands, h, w))


# ---------------------------------------------------------------------------
# psnr


def test_psnr_perfect_sentinel():
    x, _ = rand_pair(0)
    assert psnr(x, x.copy()) == PSNR_PERFECT


def test_psnr_uniform_error_closed_form():
    x, _ = rand_pair(1)
    x = np.clip(x, 0.0, 0.9)
    assert abs(psnr(x + 0.1, x) - 20.0) < 1e-6


def test_psnr_matches_two_pass_oracle():
    pred, ref = rand_pair(2)
    mse = 0.0
    for v in (pred - ref).ravel():
        mse += v * v
    mse /= pred.size
    assert abs(psnr(pred, ref) - 10 * math.log10(1 / mse)) < 1e-9


def test_psnr_symmetric_and_monotone():
    pred, ref = rand_pair(3)
    assert abs(psnr(pred, ref) - psnr(ref, pred)) < 1e-12
    worse = ref + 2 * (pred - ref)
    assert psnr(worse, ref) < psnr(pred, ref)


def test_psnr_dim_mismatch():
    with pytest.raises(ShapeError):
        psnr(np.zeros((2, 4, 4)), np.zeros((3, 4, 4)))


# ---------------------------------------------------------------------------
# ssim


def ssim_loops(pred, ref, size=11, sigma=1.5, k1=0.01, k2=0.03):
    half = (size - 1) / 2.0
    g = np.exp(-((np.arange(size) - half) ** 2) / (2 * sigma * sigma))
    kern = np.outer(g, g)
    kern /= kern.sum()
    c1, c2 = k1 * k1, k2 * k2
    vals = []
    for b in range(pred.shape[0]):
        for i in range(pred.shape[1] - size + 1):
            for j in range(pred.shape[2] - size + 1):
                wp = pred[b, i:i + size, j:j + size]
                wr = ref[b, i:i + size, j:j + size]
                mp, mr = (kern * wp).sum(), (kern * wr).sum()
                vp = (kern * wp * wp).sum() - mp * mp
                vr = (kern * wr * wr).sum() - mr * mr
                cov = (kern * wp * wr).sum() - mp * mr
                vals.append(((2 * mp * mr + c1) * (2 * cov + c2))
                            / ((mp * mp + mr * mr + c1) * (vp + vr + c2)))
    return float(np.mean(vals))


def test_ssim_self_similarity():
    x, _ = rand_pair(4)
    assert abs(ssim(x, x.copy()) - 1.0) < 1e-12


def test_ssim_constant_offset_closed_form():
    mu1, c = 0.4, 0.2
    ref = np.full((1, 16, 16), mu1)
    pred = ref + c
    mu2 = mu1 + c
    c1 = 0.01 ** 2
    expect = (2 * mu1 * mu2 + c1) / (mu1 * mu1 + mu2 * mu2 + c1)
    assert abs(ssim(pred, ref) - expect) < 1e-12


def test_ssim_matches_sliding_window_reference():
    pred, ref = rand_pair(5, bands=2, h=20, w=18)
    assert abs(ssim(pred, ref) - ssim_loops(pred, ref)) < 1e-8


def test_ssim_bounded_above_by_one():
    pred, ref = rand_pair(6)
    assert ssim(pred, ref) <= 1.0


def test_ssim_window_size_guard():
    with pytest.raises(ShapeError):
        ssim(np.zeros((1, 8, 8)), np.zeros((1, 8, 8)))


# ---------------------------------------------------------------------------
# sam


def test_sam_parallel_is_zero():
    x, _ = rand_pair(7)
    x = x + 0.1
    assert abs(sam(x, x.copy())) < 1e-8


def test_sam_orthogonal_spectra():
    h = w = 4
    pred = np.stack([np.ones((h, w)), np.zeros((h, w))])
    ref = np.stack([np.zeros((h, w)), np.ones((h, w))])
    assert abs(sam(pred, ref) - 90.0) < 1e-8


def test_sam_matches_per_pixel_loop():
    pred, ref = rand_pair(8, bands=4, h=6, w=6)
    pred, ref = pred + 0.05, ref + 0.05
    total = 0.0
    for i in range(6):
        for j in range(6):
            p, r = pred[:, i, j], ref[:, i, j]
            cosang = np.dot(p, r) / max(np.linalg.norm(p) * np.linalg.norm(r), 1e-8)
            total += math.degrees(math.acos(min(1.0, max(-1.0, cosang))))
    assert abs(sam(pred, ref) - total / 36) < 1e-8


def test_sam_scale_invariant():
    pred, ref = rand_pair(9)
    pred, ref = pred + 0.1, ref + 0.1
    scale = np.random.default_rng(10).uniform(0.5, 2.0, size=(1,) + pred.shape[1:])
    assert abs(sam(pred * scale, ref) - sam(pred, ref)) < 1e-8


# ---------------------------------------------------------------------------
# mae


def test_mae_basics():
    x, y = rand_pair(11)
    assert mae(x, x.copy()) == 0.0
    assert abs(mae(x + 0.05, x) - 0.05) < 1e-12
    loop = float(np.mean([abs(v) for v in (x - y).ravel()]))
    assert abs(mae(x, y) - loop) < 1e-12


def test_mae_triangle_inequality():
    x, y = rand_pair(12)
    z = np.random.default_rng(13).random(x.shape)
    assert mae(x, z) <= mae(x, y) + mae(y, z) + 1e-12


# ---------------------------------------------------------------------------
# binned report


def fake_scene(cov, value=1.0):
    return SceneMetrics(psnr=30 + value, ssim=0.9, sam=5.0, mae=value / 100,
                        coverage=cov)


def test_single_scene_low_coverage_bin():
    rep = binned_report([fake_scene(0.0)])
    assert rep.bins[0].count == 1
    assert all(b.count == 0 for b in rep.bins[1:])


def test_one_scene_per_bin():
    rep = binned_report([fake_scene(c) for c in (0.10, 0.30, 0.50, 0.70, 0.90)])
    assert [b.count for b in rep.bins] == [1, 1, 1, 1, 1]


def test_bin_boundaries():
    assert bin_index(0.199999) == 0
    assert bin_index(0.20) == 1
    assert bin_index(0.999) == 4
    assert bin_index(1.0) == 4  # last bin is inclusive


def test_bin_counts_and_weighted_means_consistent():
    rng = np.random.default_rng(14)
    scenes = [fake_scene(float(rng.random()), value=float(rng.random()))
              for _ in range(100)]
    rep = binned_report(scenes)
    assert sum(b.count for b in rep.bins) == 100
    for name in ("psnr", "ssim", "sam", "mae"):
        weighted = sum(b.count * b.means[name] for b in rep.bins if b.count) / 100
        assert abs(weighted - rep.overall[name]) < 1e-12


def test_empty_report_rejected():
    with pytest.raises(ValueError):
        binned_report([])


def test_report_serialization():
    rep = binned_report([fake_scene(0.1), fake_scene(0.5)])
    tsv = report_to_tsv(rep)
    assert tsv.startswith("metric\tbin\tvalue\tcount\n")
    assert "psnr\tall\t" in tsv and "mae\t80-100\t\t0" in tsv
    table = format_report(rep)
    assert "all" in table and "0-20" in table


def test_score_scene_band_subset():
    rng = np.random.default_rng(15)
    pred = rng.random((4, 16, 16))
    ref = rng.random((4, 16, 16))
    mask = np.zeros((1, 16, 16))
    full = score_scene(pred, ref, mask)
    sub = score_scene(pred, ref, mask, bands=[0, 2])
    assert full.coverage == 0.0
    assert abs(sub.mae - mae(pred[[0, 2]], ref[[0, 2]])) < 1e-12
    assert sub.mae != full.mae
