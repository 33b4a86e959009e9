"""
Motion estimation and motion-vector compression.

estimate_flow runs coarse-to-fine block matching on a bilinear pyramid.
Vectors follow the backward-warp convention of bilinear_warp: the current
frame at p is matched against the reference at p + v.

HyperPriorCodec is the hyper-prior autoencoder shared by the motion path
("mv" layers) and the intra path ("intra" layers). Its encoder produces the
reconstruction by calling the same synthesis functions the decoder runs, fed
with the integer symbols that go into the bitstream.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from .entropy import CodedStream, EntropyParameters, EntropySession, dequantize, quantize_symbols
from .errors import ConfigurationError, DecodeError
from .kernels import as_grid, bilinear_downsample, conv2d, pixel_shuffle_up
from .weights import CODER_STAGES, WeightFile

logger = logging.getLogger("tcmcodec.motion")

LATENT_STRIDE = 2 ** CODER_STAGES
HYPER_STRIDE = LATENT_STRIDE * 4


# ── Motion estimation ──


@dataclass(frozen=True)
class MotionSearch:
    """Encoder-only block-matching parameters; never written to the bitstream."""

    search_radius: int = 4
    block: int = 8
    pyramid_levels: int = 3

    @property
    def max_displacement(self) -> int:
        return self.search_radius * 2 ** (self.pyramid_levels - 1)


def _search_offsets(radius: int) -> List[Tuple[int, int]]:
    offsets = [(dy, dx) for dy in range(-radius, radius + 1) for dx in range(-radius, radius + 1)]
    offsets.sort(key=lambda v: (abs(v[0]) + abs(v[1]), v[0], v[1]))
    return offsets


def _match_level(current: np.ndarray, reference: np.ndarray, pred: np.ndarray,
                 block: int, radius: int, bound: int) -> np.ndarray:
    """Refine per-block integer vectors pred (2, BH, BW) within +-radius."""
    _, height, width = current.shape
    bh, bw = height // block, width // block
    ys = np.arange(height)[:, None]
    xs = np.arange(width)[None, :]
    pred_y = np.repeat(np.repeat(pred[0], block, axis=0), block, axis=1)
    pred_x = np.repeat(np.repeat(pred[1], block, axis=0), block, axis=1)
    cur = current.astype(np.float64)
    ref = reference.astype(np.float64)

    best = pred.copy()
    best_sad = np.full((bh, bw), np.inf)
    for dy, dx in _search_offsets(radius):
        cand_y = pred[0] + dy
        cand_x = pred[1] + dx
        allowed = (np.abs(cand_y) <= bound) & (np.abs(cand_x) <= bound)
        if not allowed.any():
            continue
        rows = np.clip(ys + pred_y + dy, 0, height - 1)
        cols = np.clip(xs + pred_x + dx, 0, width - 1)
        diff = np.abs(cur - ref[:, rows, cols]).sum(axis=0)
        sad = diff.reshape(bh, block, bw, block).sum(axis=(1, 3))
        sad = np.where(allowed, sad, np.inf)
        better = sad < best_sad
        best_sad = np.where(better, sad, best_sad)
        best[0] = np.where(better, cand_y, best[0])
        best[1] = np.where(better, cand_x, best[1])
    return best


def estimate_flow(current: np.ndarray, reference: np.ndarray, search_radius: int = 4,
                  block: int = 8, pyramid_levels: int = 3) -> np.ndarray:
    """Per-pixel (dy, dx) field with |dy|, |dx| <= search_radius * 2^(pyramid_levels - 1)."""
    current = as_grid(current)
    reference = as_grid(reference)
    if current.shape != reference.shape:
        raise ConfigurationError(
            f"Frames differ in shape: {current.shape} vs {reference.shape}"
        )
    if search_radius < 0 or block < 1 or pyramid_levels < 1:
        raise ConfigurationError("Invalid motion search parameters")
    _, height, width = current.shape
    unit = block * 2 ** (pyramid_levels - 1)
    if height % unit or width % unit:
        raise ConfigurationError(
            f"Frame {height}x{width} is not divisible by block*2^(levels-1) = {unit}"
        )

    cur_pyramid = [current]
    ref_pyramid = [reference]
    for _ in range(pyramid_levels - 1):
        cur_pyramid.append(bilinear_downsample(cur_pyramid[-1]))
        ref_pyramid.append(bilinear_downsample(ref_pyramid[-1]))

    top = pyramid_levels - 1
    vectors = np.zeros((2, height // unit, width // unit), dtype=np.int64)
    for k in range(top, -1, -1):
        if k < top:
            vectors = 2 * np.repeat(np.repeat(vectors, 2, axis=1), 2, axis=2)
        bound = search_radius * 2 ** (top - k)
        vectors = _match_level(cur_pyramid[k], ref_pyramid[k], vectors, block, search_radius, bound)

    flow = np.repeat(np.repeat(vectors, block, axis=1), block, axis=2)
    return flow.astype(np.float32)


# ── Hyper-prior autoencoder ──


@dataclass
class CodedLatents:
    main: CodedStream
    hyper: CodedStream

    @property
    def streams(self) -> List[CodedStream]:
        return [self.main, self.hyper]

    @property
    def bits(self) -> int:
        return self.main.bits + self.hyper.bits


class HyperPriorCodec:
    """Analysis / synthesis pair with a hyper prior, built from the layers
    under one prefix of a WeightFile.

    mean_offset codes round(y*gain - mu) around zero; otherwise round(y) is
    coded under Laplace(mu, b).
    """

    def __init__(self, weights: WeightFile, prefix: str, mean_offset: bool = False,
                 gain: float = 1.0, clip: Optional[Tuple[float, float]] = None):
        self.weights = weights
        self.prefix = prefix
        self.mean_offset = mean_offset
        self.gain = np.float32(gain)
        self.clip = clip

    def _run(self, grid: np.ndarray, stage: str, count: int, shuffle: bool) -> np.ndarray:
        for i in range(count):
            grid = conv2d(grid, self.weights.conv(f"{self.prefix}.{stage}.{i}"))
            if shuffle and not (stage == "hdec" and i == count - 1):
                grid = pixel_shuffle_up(grid)
        return grid

    def analysis(self, x: np.ndarray) -> np.ndarray:
        return self._run(x, "enc", CODER_STAGES, shuffle=False)

    def hyper_analysis(self, y: np.ndarray) -> np.ndarray:
        return self._run(y, "henc", 3, shuffle=False)

    def hyper_features(self, z_hat: np.ndarray) -> np.ndarray:
        return self._run(z_hat, "hdec", 3, shuffle=True)

    def hyper_synthesis(self, z_hat: np.ndarray) -> EntropyParameters:
        out = self.hyper_features(z_hat)
        half = out.shape[0] // 2
        return EntropyParameters(out[:half], np.abs(out[half:]))

    def synthesis(self, y_hat: np.ndarray) -> np.ndarray:
        out = self._run(y_hat, "dec", CODER_STAGES, shuffle=True)
        if self.clip is not None:
            out = np.clip(out, *self.clip).astype(np.float32)
        return out

    def latent_from_symbols(self, symbols: np.ndarray, params: EntropyParameters) -> np.ndarray:
        if not self.mean_offset:
            return dequantize(symbols)
        return (dequantize(symbols, params.mean) / self.gain).astype(np.float32)

    def encode(self, x: np.ndarray, session: EntropySession) -> Tuple[CodedLatents, np.ndarray]:
        x = as_grid(x)
        _, height, width = x.shape
        if height % HYPER_STRIDE or width % HYPER_STRIDE:
            raise ConfigurationError(
                f"{self.prefix}: input {height}x{width} must be a multiple of {HYPER_STRIDE}"
            )
        y = self.analysis(x)
        z = self.hyper_analysis(y)
        z_symbols = quantize_symbols(z)
        loc, scale = self.weights.prior(self.prefix)
        hyper = session.encode_factorized(f"{self.prefix}_hyper", z_symbols, loc, scale)

        params = self.hyper_synthesis(dequantize(z_symbols))
        if self.mean_offset:
            y_symbols = quantize_symbols(y * self.gain, params.mean)
        else:
            y_symbols = quantize_symbols(y)
        main = session.encode_laplace(f"{self.prefix}_main", y_symbols, params, self.mean_offset)

        x_hat = self.synthesis(self.latent_from_symbols(y_symbols, params))
        return CodedLatents(main, hyper), x_hat

    def decode(self, coded: CodedLatents, height: int, width: int,
               session: EntropySession) -> np.ndarray:
        if height % HYPER_STRIDE or width % HYPER_STRIDE:
            raise DecodeError(f"{self.prefix}: frame size {height}x{width} is not coded size")
        z_shape = (self._channels("henc.2"), height // HYPER_STRIDE, width // HYPER_STRIDE)
        loc, scale = self.weights.prior(self.prefix)
        z_symbols = session.decode_factorized(coded.hyper, z_shape, loc, scale)
        params = self.hyper_synthesis(dequantize(z_symbols))
        y_symbols = session.decode_laplace(coded.main, params, self.mean_offset)
        return self.synthesis(self.latent_from_symbols(y_symbols, params))

    def _channels(self, layer: str) -> int:
        return self.weights.conv(f"{self.prefix}.{layer}").out_channels


# ── Motion-vector coding ──


def mv_codec(weights: WeightFile) -> HyperPriorCodec:
    return HyperPriorCodec(weights, "mv")


def mv_compress(flow: np.ndarray, weights: WeightFile,
                session: EntropySession) -> Tuple[CodedLatents, np.ndarray, int]:
    """Lossy motion coding. Returns the coded streams, the reconstructed field
    v_hat (exactly what mv_decompress yields) and the written bits."""
    flow = as_grid(flow)
    if flow.shape[0] != 2:
        raise ConfigurationError(f"Motion field needs 2 channels, got {flow.shape[0]}")
    coded, flow_hat = mv_codec(weights).encode(flow, session)
    logger.debug(f"MV coded in {coded.bits} bits")
    return coded, flow_hat, coded.bits


def mv_decompress(coded: CodedLatents, height: int, width: int, weights: WeightFile,
                  session: EntropySession) -> np.ndarray:
    return mv_codec(weights).decode(coded, height, width, session)
