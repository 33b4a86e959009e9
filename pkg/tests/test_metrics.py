from __future__ import annotations

import math

import numpy as np
import pytest
from scipy import signal

from tcmcodec.errors import EvaluationError
from tcmcodec.metrics import (
    MS_SSIM_WEIGHTS,
    FrameStats,
    RdCurve,
    RdReport,
    bd_rate,
    bpp,
    cascaded_loss,
    frame_stats,
    mean_or_none,
    ms_ssim,
    ms_ssim_scales,
    mse,
    optional_ms_ssim,
    psnr,
    rd_loss,
)

ANCHOR = RdCurve([0.05, 0.1, 0.2, 0.4], [30.0, 32.5, 35.0, 37.0])


def scaled(curve, factor):
    return RdCurve([r * factor for r in curve.rates], list(curve.qualities))


# ── PSNR ──


def test_psnr_identical_is_infinite():
    frame = np.random.default_rng(0).uniform(size=(3, 16, 16))
    assert psnr(frame, frame) == math.inf


def test_psnr_of_known_error():
    a = np.zeros((1, 4, 4))
    b = np.full((1, 4, 4), 0.1)
    assert mse(a, b) == pytest.approx(0.01)
    assert psnr(a, b) == pytest.approx(20.0)


def test_psnr_of_eight_bit_step():
    a = np.zeros((3, 8, 8))
    b = np.full((3, 8, 8), 1 / 255)
    assert psnr(a, b) == pytest.approx(20 * math.log10(255))


def test_shape_mismatch_is_evaluation_error():
    with pytest.raises(EvaluationError):
        mse(np.zeros((1, 4, 4)), np.zeros((1, 4, 5)))


# ── MS-SSIM ──


def reference_ms_ssim(x, y):
    """Straightforward 2-D convolution version for a single channel."""
    g = np.exp(-((np.arange(11) - 5.0) ** 2) / (2 * 1.5 ** 2))
    window = np.outer(g, g) / np.outer(g, g).sum()
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    scales = ms_ssim_scales(*x.shape)
    weights = np.array(MS_SSIM_WEIGHTS[:scales])
    weights = weights / weights.sum()
    value = 1.0
    for s in range(scales):
        mu_x = signal.convolve2d(x, window, mode="valid")
        mu_y = signal.convolve2d(y, window, mode="valid")
        sxx = signal.convolve2d(x * x, window, mode="valid") - mu_x ** 2
        syy = signal.convolve2d(y * y, window, mode="valid") - mu_y ** 2
        sxy = signal.convolve2d(x * y, window, mode="valid") - mu_x * mu_y
        cs = (2 * sxy + c2) / (sxx + syy + c2)
        lum = (2 * mu_x * mu_y + c1) / (mu_x ** 2 + mu_y ** 2 + c1)
        if s < scales - 1:
            value *= max(cs.mean(), 0) ** weights[s]
            h, w = x.shape[0] // 2 * 2, x.shape[1] // 2 * 2
            x = x[:h, :w].reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))
            y = y[:h, :w].reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))
        else:
            value *= max((lum * cs).mean(), 0) ** weights[s]
    return value


def test_ms_ssim_identical_is_one():
    frame = np.random.default_rng(1).uniform(size=(3, 64, 64))
    assert ms_ssim(frame, frame) == pytest.approx(1.0, abs=1e-12)


def test_ms_ssim_is_symmetric_and_below_one():
    rng = np.random.default_rng(2)
    a = rng.uniform(size=(1, 64, 64))
    b = np.clip(a + rng.normal(0, 0.05, a.shape), 0, 1)
    assert ms_ssim(a, b) == pytest.approx(ms_ssim(b, a), abs=1e-12)
    assert ms_ssim(a, b) < 1.0


def test_ms_ssim_matches_reference():
    rng = np.random.default_rng(3)
    for size in ((64, 64), (176, 176), (48, 80)):
        a = rng.uniform(size=size)
        b = np.clip(a + rng.normal(0, 0.1, size), 0, 1)
        assert ms_ssim(a, b) == pytest.approx(reference_ms_ssim(a, b), abs=1e-4)


def test_ms_ssim_matches_reference_at_five_scales():
    rng = np.random.default_rng(30)
    for _ in range(20):
        a = rng.uniform(size=(192, 192))
        b = np.clip(a + rng.normal(0, rng.uniform(0.01, 0.3), a.shape), 0, 1)
        assert ms_ssim(a, b) == pytest.approx(reference_ms_ssim(a, b), abs=1e-4)


def test_ms_ssim_color_is_channel_mean():
    rng = np.random.default_rng(4)
    a = rng.uniform(size=(3, 64, 64))
    b = np.clip(a + rng.normal(0, 0.1, a.shape), 0, 1)
    per_channel = [ms_ssim(a[c], b[c]) for c in range(3)]
    assert ms_ssim(a, b) == pytest.approx(np.mean(per_channel))


def test_ms_ssim_scale_count():
    assert ms_ssim_scales(176, 176) == 5
    assert ms_ssim_scales(64, 64) == 3
    assert ms_ssim_scales(8, 8) == 0
    with pytest.raises(EvaluationError):
        ms_ssim(np.zeros((1, 8, 8)), np.zeros((1, 8, 8)))


def test_optional_ms_ssim_below_window():
    rng = np.random.default_rng(6)
    a = rng.uniform(size=(3, 8, 8))
    assert optional_ms_ssim(a, a) is None
    big = rng.uniform(size=(3, 64, 64))
    assert optional_ms_ssim(big, big) == pytest.approx(1.0, abs=1e-12)
    assert mean_or_none([None, None]) is None
    assert mean_or_none([None, 0.5, 1.0]) == pytest.approx(0.75)


def test_small_frame_stats_use_coded_pair():
    rng = np.random.default_rng(7)
    a = rng.uniform(size=(3, 8, 8))
    b = np.clip(a + 0.05, 0, 1)
    mse_stats = frame_stats(0, "I", a, b, 0, 64, 256, "mse")
    assert mse_stats.ms_ssim is None
    assert mse_stats.to_dict()["ms_ssim"] is None
    assert mse_stats.loss == pytest.approx(256 * mse(a, b) + 64 / 64)

    padded_a = np.pad(a, ((0, 0), (0, 56), (0, 56)), mode="reflect")
    padded_b = np.pad(b, ((0, 0), (0, 56), (0, 56)), mode="reflect")
    ssim_stats = frame_stats(0, "I", a, b, 0, 64, 8, "ms-ssim", coded_pair=(padded_a, padded_b))
    assert ssim_stats.ms_ssim is None
    assert ssim_stats.loss == pytest.approx(8 * (1 - ms_ssim(padded_a, padded_b)) + 64 / 64)
    with pytest.raises(EvaluationError):
        frame_stats(0, "I", a, b, 0, 64, 8, "ms-ssim")


# ── Rate and loss ──


def test_bpp():
    assert bpp(4096, 64, 64) == 1.0
    assert bpp(4096, 64, 64, frames=4) == 0.25
    with pytest.raises(EvaluationError):
        bpp(10, 0, 64)


def test_rd_loss_and_cascade():
    assert rd_loss(0.001, 100, 300, 256, 400) == pytest.approx(0.256 + 1.0)
    assert cascaded_loss([1.0, 2.0, 3.0], 3) == pytest.approx(2.0)
    with pytest.raises(EvaluationError):
        cascaded_loss([1.0, 2.0], 3)


def test_frame_stats_fields():
    rng = np.random.default_rng(5)
    a = rng.uniform(size=(3, 64, 64))
    b = np.clip(a + 0.01, 0, 1)
    stats = frame_stats(2, "P", a, b, 100, 200, 256, "mse")
    assert stats.bits == 300
    assert stats.loss == pytest.approx(256 * mse(a, b) + 300 / 4096)
    ssim_stats = frame_stats(2, "P", a, b, 100, 200, 8, "ms-ssim")
    assert ssim_stats.loss == pytest.approx(8 * (1 - ms_ssim(a, b)) + 300 / 4096)


def test_report_summary():
    frames = [FrameStats(i, "P", 10, 90, 0.0, math.inf, 1.0, float(i)) for i in range(6)]
    report = RdReport(64, 64, 256.0, "mse", cascade_T=4, frames=frames)
    assert report.total_bits == 600
    assert report.bpp == pytest.approx(600 / (64 * 64 * 6))
    assert report.cascaded_loss == pytest.approx(1.5)
    summary = report.to_dict()["summary"]
    assert summary["mean_psnr"] == "inf"
    assert report.to_dict()["frames"][0]["psnr"] == "inf"
    short = RdReport(64, 64, 256.0, "mse", cascade_T=4, frames=frames[:2])
    assert short.cascaded_loss == pytest.approx(0.5)
    assert RdReport(64, 64, 256.0, "mse").cascaded_loss is None


# ── BD-rate ──


@pytest.mark.parametrize("mode", ["cubic", "pchip"])
def test_bd_rate_known_offsets(mode):
    assert bd_rate(ANCHOR, ANCHOR, mode) == pytest.approx(0.0, abs=1e-9)
    assert bd_rate(scaled(ANCHOR, 2.0), ANCHOR, mode) == pytest.approx(100.0, abs=1e-6)
    assert bd_rate(scaled(ANCHOR, 0.5), ANCHOR, mode) == pytest.approx(-50.0, abs=1e-6)


@pytest.mark.parametrize("mode", ["cubic", "pchip"])
def test_bd_rate_swap_is_inverse(mode):
    test = RdCurve([0.04, 0.09, 0.21, 0.38, 0.7], [29.5, 32.0, 35.2, 37.1, 39.0])
    forward = bd_rate(test, ANCHOR, mode)
    backward = bd_rate(ANCHOR, test, mode)
    assert (1 + forward / 100) * (1 + backward / 100) == pytest.approx(1.0, abs=1e-9)


def test_bd_rate_needs_overlap():
    far = RdCurve([0.05, 0.1, 0.2, 0.4], [40.0, 41.0, 42.0, 43.0])
    with pytest.raises(EvaluationError):
        bd_rate(far, ANCHOR)


def test_bd_rate_input_checks():
    with pytest.raises(EvaluationError):
        bd_rate(RdCurve([0.1, 0.2, 0.3], [30, 31, 32]), ANCHOR)
    with pytest.raises(EvaluationError):
        bd_rate(RdCurve([0.1, 0.1, 0.3, 0.4], [30, 31, 32, 33]), ANCHOR)
    with pytest.raises(EvaluationError):
        bd_rate(ANCHOR, ANCHOR, "linear")


def test_infinite_quality_is_capped():
    lossless = RdCurve([0.05, 0.1, 0.2, 0.4], [30.0, 32.5, 35.0, math.inf])
    assert math.isfinite(bd_rate(lossless, ANCHOR))


def test_curve_csv_round_trip(tmp_path):
    path = tmp_path / "curve.csv"
    ANCHOR.save_csv(str(path))
    assert path.read_text().splitlines()[0] == "rate,quality"
    loaded = RdCurve.load_csv(str(path))
    assert loaded == ANCHOR


def test_curve_sorted_by_rate():
    curve = RdCurve([0.4, 0.1], [37.0, 32.0])
    assert curve.rates == [0.1, 0.4]
    assert curve.qualities == [32.0, 37.0]


def test_curve_csv_errors(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("bitrate,psnr\n1,2\n")
    with pytest.raises(EvaluationError):
        RdCurve.load_csv(str(bad))
    bad.write_text("rate,quality\n1,abc\n")
    with pytest.raises(EvaluationError):
        RdCurve.load_csv(str(bad))
    with pytest.raises(EvaluationError):
        RdCurve.load_csv(str(tmp_path / "missing.csv"))
