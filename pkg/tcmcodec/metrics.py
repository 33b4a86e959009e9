"""
Distortion, rate and loss measurements, RD curves and BD-rate.

Frames are (C, H, W) arrays in [0, 1]. PSNR of color frames is taken on the
MSE pooled over all channels; MS-SSIM is computed per channel and averaged.
"""

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence

import numpy as np
from scipy import integrate, interpolate, ndimage

from .config import DISTORTION_MS_SSIM, DISTORTION_MSE
from .errors import EvaluationError

logger = logging.getLogger("tcmcodec.metrics")

MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03

# Quality used in place of an infinite PSNR when fitting curves
PSNR_CEILING = 100.0
MIN_CURVE_POINTS = 4


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise EvaluationError(f"Frame shapes differ: {a.shape} vs {b.shape}")
    return a, b


def mse(a, b) -> float:
    a, b = _check_pair(a, b)
    return float(np.mean((a - b) ** 2))


def psnr(a, b, peak: float = 1.0) -> float:
    """PSNR in dB; identical frames give math.inf."""
    error = mse(a, b)
    if error == 0:
        return math.inf
    return 10.0 * math.log10(peak * peak / error)


# ── MS-SSIM ──


def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    coords = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(coords ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, window: np.ndarray) -> np.ndarray:
    """Separable Gaussian filter keeping only fully covered positions."""
    out = ndimage.correlate1d(img, window, axis=0, mode="constant")
    out = ndimage.correlate1d(out, window, axis=1, mode="constant")
    r = len(window) // 2
    return out[r:-r, r:-r]


def _ssim_terms(x: np.ndarray, y: np.ndarray, window: np.ndarray, max_val: float):
    c1 = (SSIM_K1 * max_val) ** 2
    c2 = (SSIM_K2 * max_val) ** 2
    mu_x = _filter_valid(x, window)
    mu_y = _filter_valid(y, window)
    sigma_xx = _filter_valid(x * x, window) - mu_x * mu_x
    sigma_yy = _filter_valid(y * y, window) - mu_y * mu_y
    sigma_xy = _filter_valid(x * y, window) - mu_x * mu_y
    cs_map = (2 * sigma_xy + c2) / (sigma_xx + sigma_yy + c2)
    luminance = (2 * mu_x * mu_y + c1) / (mu_x * mu_x + mu_y * mu_y + c1)
    return float(np.mean(luminance * cs_map)), float(np.mean(cs_map))


def _avg_pool2(img: np.ndarray) -> np.ndarray:
    h, w = img.shape[0] // 2 * 2, img.shape[1] // 2 * 2
    img = img[:h, :w]
    return img.reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))


def ms_ssim_scales(height: int, width: int) -> int:
    """Number of scales whose smallest side still fits the 11-tap window."""
    scales = len(MS_SSIM_WEIGHTS)
    while scales > 0 and min(height, width) / 2 ** (scales - 1) < SSIM_WINDOW:
        scales -= 1
    return scales


def ms_ssim(a, b, max_val: float = 1.0) -> float:
    a, b = _check_pair(a, b)
    if a.ndim == 2:
        a, b = a[None], b[None]
    scales = ms_ssim_scales(a.shape[1], a.shape[2])
    if scales == 0:
        raise EvaluationError(
            f"Frame {a.shape[1]}x{a.shape[2]} is too small for MS-SSIM (need {SSIM_WINDOW} pixels)"
        )
    weights = np.asarray(MS_SSIM_WEIGHTS[:scales])
    weights = weights / weights.sum()
    window = _gaussian_window()

    per_channel = []
    for x, y in zip(a, b):
        value = 1.0
        for s in range(scales):
            ssim_val, cs_val = _ssim_terms(x, y, window, max_val)
            if s < scales - 1:
                value *= max(cs_val, 0.0) ** weights[s]
                x, y = _avg_pool2(x), _avg_pool2(y)
            else:
                value *= max(ssim_val, 0.0) ** weights[s]
        per_channel.append(value)
    return float(np.mean(per_channel))


def optional_ms_ssim(a, b, max_val: float = 1.0) -> Optional[float]:
    """MS-SSIM, or None when the frame is smaller than one Gaussian window."""
    a, b = _check_pair(a, b)
    if ms_ssim_scales(a.shape[-2], a.shape[-1]) == 0:
        return None
    return ms_ssim(a, b, max_val)


def mean_or_none(values) -> Optional[float]:
    present = [v for v in values if v is not None]
    return float(np.mean(present)) if present else None


def format_ms_ssim(value: Optional[float], digits: int = 4) -> str:
    return "n/a" if value is None else f"{value:.{digits}f}"


def distortion(a, b, family: str) -> float:
    """D of the RD loss: MSE for PSNR models, 1 - MS-SSIM for MS-SSIM models."""
    if family == DISTORTION_MSE:
        return mse(a, b)
    if family == DISTORTION_MS_SSIM:
        return 1.0 - ms_ssim(a, b)
    raise EvaluationError(f"Unknown distortion family '{family}'")


# ── Rate and loss ──


def bpp(total_bits: int, width: int, height: int, frames: int = 1) -> float:
    if width <= 0 or height <= 0 or frames <= 0:
        raise EvaluationError(f"bpp needs positive dimensions, got {width}x{height}x{frames}")
    return total_bits / (width * height * frames)


def rd_loss(d: float, rate_mv_bits: float, rate_ctx_bits: float, lmbda: float, pixels: int) -> float:
    """lambda * D + (R_mv + R_ctx) / pixels."""
    return lmbda * d + (rate_mv_bits + rate_ctx_bits) / pixels


def cascaded_loss(per_frame: Sequence[float], T: int) -> float:
    if T < 1 or len(per_frame) != T:
        raise EvaluationError(f"Cascaded loss needs exactly T={T} frame losses, got {len(per_frame)}")
    return float(sum(per_frame) / T)


# ── Reports ──


def json_number(value: float):
    """JSON has no infinity; write it as the string "inf"."""
    if isinstance(value, float) and math.isinf(value):
        return "inf" if value > 0 else "-inf"
    return value


@dataclass
class FrameStats:
    index: int
    frame_type: str
    mv_bits: int
    ctx_bits: int
    mse: float
    psnr: float
    ms_ssim: Optional[float]
    loss: float

    @property
    def bits(self) -> int:
        return self.mv_bits + self.ctx_bits

    def to_dict(self) -> dict:
        data = {k: json_number(v) for k, v in asdict(self).items()}
        data["bits"] = self.bits
        return data


def frame_stats(index: int, frame_type: str, original, recon, mv_bits: int, ctx_bits: int,
                lmbda: float, family: str, coded_pair: Optional[tuple] = None) -> FrameStats:
    """Per-frame report row. ms_ssim is None for frames smaller than the 11-tap
    window; an MS-SSIM model then measures its distortion on coded_pair, the
    padded frames the codec actually coded."""
    original, recon = _check_pair(original, recon)
    pixels = original.shape[-1] * original.shape[-2]
    frame_mse = mse(original, recon)
    frame_ms_ssim = optional_ms_ssim(original, recon)
    if family == DISTORTION_MSE:
        d = frame_mse
    elif frame_ms_ssim is not None:
        d = 1.0 - frame_ms_ssim
    elif coded_pair is not None:
        d = 1.0 - ms_ssim(*coded_pair)
    else:
        d = 1.0 - ms_ssim(original, recon)
    return FrameStats(
        index=index,
        frame_type=frame_type,
        mv_bits=mv_bits,
        ctx_bits=ctx_bits,
        mse=frame_mse,
        psnr=psnr(original, recon),
        ms_ssim=frame_ms_ssim,
        loss=rd_loss(d, mv_bits, ctx_bits, lmbda, pixels),
    )


@dataclass
class RdReport:
    width: int
    height: int
    lmbda: float
    distortion: str
    cascade_T: int = 4
    frames: List[FrameStats] = field(default_factory=list)

    @property
    def total_bits(self) -> int:
        return sum(f.bits for f in self.frames)

    @property
    def bpp(self) -> float:
        return bpp(self.total_bits, self.width, self.height, max(len(self.frames), 1))

    @property
    def mean_psnr(self) -> float:
        return float(np.mean([f.psnr for f in self.frames])) if self.frames else 0.0

    @property
    def mean_ms_ssim(self) -> Optional[float]:
        return mean_or_none(f.ms_ssim for f in self.frames)

    @property
    def cascaded_loss(self) -> Optional[float]:
        """Mean loss of the first T frames (fewer when the sequence is shorter)."""
        T = min(self.cascade_T, len(self.frames))
        if T == 0:
            return None
        return cascaded_loss([f.loss for f in self.frames[:T]], T)

    def summary(self) -> dict:
        return {
            "frames": len(self.frames),
            "total_bits": self.total_bits,
            "bpp": self.bpp,
            "mean_psnr": json_number(self.mean_psnr),
            "mean_ms_ssim": self.mean_ms_ssim,
            "cascaded_loss": self.cascaded_loss,
            "cascade_T": min(self.cascade_T, len(self.frames)),
        }

    def to_dict(self) -> dict:
        return {
            "width": self.width,
            "height": self.height,
            "lambda": self.lmbda,
            "distortion": self.distortion,
            "summary": self.summary(),
            "frames": [f.to_dict() for f in self.frames],
        }


# ── RD curves and BD-rate ──


@dataclass
class RdCurve:
    rates: List[float]
    qualities: List[float]

    def __post_init__(self):
        if len(self.rates) != len(self.qualities):
            raise EvaluationError("RD curve needs one quality per rate")
        order = np.argsort(self.rates, kind="stable")
        self.rates = [float(self.rates[i]) for i in order]
        self.qualities = [float(self.qualities[i]) for i in order]

    def validate(self) -> "RdCurve":
        if len(self.rates) < MIN_CURVE_POINTS:
            raise EvaluationError(
                f"RD curve needs at least {MIN_CURVE_POINTS} points, got {len(self.rates)}"
            )
        if any(r <= 0 for r in self.rates):
            raise EvaluationError("RD curve rates must be positive")
        if any(b <= a for a, b in zip(self.rates, self.rates[1:])):
            raise EvaluationError("RD curve rates must be distinct")
        return self

    @classmethod
    def load_csv(cls, path: str) -> "RdCurve":
        rates, qualities = [], []
        try:
            with open(path, newline="") as f:
                reader = csv.DictReader(f)
                if reader.fieldnames is None or not {"rate", "quality"} <= set(reader.fieldnames):
                    raise EvaluationError(f"{path}: expected a 'rate,quality' header")
                for row in reader:
                    rates.append(float(row["rate"]))
                    qualities.append(float(row["quality"]))
        except OSError as e:
            raise EvaluationError(f"Cannot read curve: {e}") from None
        except (TypeError, ValueError) as e:
            if isinstance(e, EvaluationError):
                raise
            raise EvaluationError(f"{path}: malformed point: {e}") from None
        return cls(rates, qualities)

    def save_csv(self, path: str):
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["rate", "quality"])
            for r, q in zip(self.rates, self.qualities):
                writer.writerow([repr(r), repr(q)])


def _fit_inputs(curve: RdCurve):
    quality = np.array([PSNR_CEILING if math.isinf(q) else q for q in curve.qualities])
    log_rate = np.log10(np.asarray(curve.rates))
    order = np.argsort(quality, kind="stable")
    quality, log_rate = quality[order], log_rate[order]
    if np.any(np.diff(quality) <= 0):
        raise EvaluationError("RD curve qualities must be distinct")
    return quality, log_rate


def bd_rate(test: RdCurve, anchor: RdCurve, mode: str = "cubic") -> float:
    """Average rate difference (percent) of test against anchor over the
    shared quality interval; negative means test saves bits."""
    q_test, r_test = _fit_inputs(test.validate())
    q_anchor, r_anchor = _fit_inputs(anchor.validate())
    lo = max(q_test.min(), q_anchor.min())
    hi = min(q_test.max(), q_anchor.max())
    if lo >= hi:
        raise EvaluationError("RD curves have no overlapping quality range")

    if mode == "cubic":
        p_test = np.polyint(np.polyfit(q_test, r_test, 3))
        p_anchor = np.polyint(np.polyfit(q_anchor, r_anchor, 3))
        int_test = np.polyval(p_test, hi) - np.polyval(p_test, lo)
        int_anchor = np.polyval(p_anchor, hi) - np.polyval(p_anchor, lo)
    elif mode == "pchip":
        samples, step = np.linspace(lo, hi, num=100, retstep=True)
        int_test = integrate.trapezoid(interpolate.pchip_interpolate(q_test, r_test, samples), dx=step)
        int_anchor = integrate.trapezoid(interpolate.pchip_interpolate(q_anchor, r_anchor, samples), dx=step)
    else:
        raise EvaluationError(f"Unknown BD-rate mode '{mode}'")

    avg_diff = (int_test - int_anchor) / (hi - lo)
    return float((10.0 ** avg_diff - 1.0) * 100.0)
