"""
Conditional coding of P frames and the intra codec for I frames.

P frame:
    motion -> v_hat -> temporal contexts -> contextual encoder (contexts joined
    at matching scales) -> latent coded with hyper + temporal prior ->
    contextual decoder -> frame generator -> x_hat and the propagated feature.

The encoder never reconstructs on its own: after writing the symbols it runs
the same synthesis functions the decoder runs, so decode reproduces x_hat and
the feature bit for bit. Each record carries a CRC-32 of x_hat to catch a
decoder whose buffer or weights differ from the encoder's.
"""

import enum
import logging
import zlib
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from .config import CodecConfig
from .context import (
    DecodedPictureBuffer,
    DpbEntry,
    DpbSource,
    TcmConfig,
    TemporalContextSet,
    extract_frame_feature,
    mine_contexts,
)
from .entropy import CodedStream, EntropyParameters, EntropySession, dequantize, quantize_symbols
from .errors import ChecksumError, ConfigurationError, DecodeError
from .kernels import as_grid, concat, conv2d, pixel_shuffle_up, residual_forward
from .metrics import FrameStats, frame_stats
from .motion import (
    HYPER_STRIDE,
    CodedLatents,
    HyperPriorCodec,
    MotionSearch,
    estimate_flow,
    mv_compress,
    mv_decompress,
)
from .weights import CODER_STAGES, WeightFile

logger = logging.getLogger("tcmcodec.codec")

# Bound on the propagated feature kept in the buffer
FEATURE_LIMIT = 8.0


class FrameType(enum.IntEnum):
    I = 0
    P = 1


PAYLOAD_NAMES = {
    FrameType.I: ("img_main", "img_hyper"),
    FrameType.P: ("mv_main", "mv_hyper", "ctx_main", "ctx_hyper"),
}


@dataclass
class FrameRecord:
    frame_type: FrameType
    payloads: List[CodedStream]
    recon_crc: int

    def __post_init__(self):
        self.frame_type = FrameType(self.frame_type)
        expected = len(PAYLOAD_NAMES[self.frame_type])
        if len(self.payloads) != expected:
            raise DecodeError(
                f"{self.frame_type.name} frame needs {expected} payloads, got {len(self.payloads)}"
            )
        for payload, name in zip(self.payloads, PAYLOAD_NAMES[self.frame_type]):
            payload.name = payload.name or name

    @property
    def bits_total(self) -> int:
        return sum(p.bits for p in self.payloads)

    @property
    def mv_bits(self) -> int:
        if self.frame_type == FrameType.I:
            return 0
        return self.payloads[0].bits + self.payloads[1].bits

    @property
    def estimated_bits(self) -> float:
        return float(sum(p.estimated_bits or 0.0 for p in self.payloads))


@dataclass(frozen=True)
class RdConfig:
    lmbda: float
    distortion: str = "mse"
    cascade_T: int = 4

    def __post_init__(self):
        if self.lmbda <= 0:
            raise ConfigurationError(f"lambda must be positive, got {self.lmbda}")
        if self.cascade_T < 1:
            raise ConfigurationError(f"cascade_T must be positive, got {self.cascade_T}")

    @classmethod
    def from_codec_config(cls, config: CodecConfig, cascade_T: int = 4) -> "RdConfig":
        return cls(float(config.lmbda), config.distortion, cascade_T)


@dataclass
class EncodedFrame:
    record: FrameRecord
    recon: np.ndarray
    feature: Optional[np.ndarray]
    stats: FrameStats


def reconstruction_crc(frame: np.ndarray) -> int:
    return zlib.crc32(np.ascontiguousarray(frame, dtype="<f4").tobytes()) & 0xFFFFFFFF


def _verify_crc(frame: np.ndarray, record: FrameRecord, index: Optional[int]):
    actual = reconstruction_crc(frame)
    if actual != record.recon_crc:
        raise ChecksumError(
            f"reconstruction CRC {actual:08x} does not match stream {record.recon_crc:08x}",
            frame_index=index,
        )


# ── Network stages ──


def _contexts_for(contexts: TemporalContextSet, enabled: bool) -> TemporalContextSet:
    return contexts if enabled else contexts.zeroed()


def _with_context(grid: np.ndarray, contexts: TemporalContextSet, level: int) -> np.ndarray:
    context = contexts.at(level)
    return grid if context is None else concat(grid, context)


def contextual_encode(x: np.ndarray, contexts: TemporalContextSet, weights: WeightFile) -> np.ndarray:
    grid = x
    for k in range(CODER_STAGES):
        grid = conv2d(_with_context(grid, contexts, k), weights.conv(f"ctx.enc.{k}"))
        if k < CODER_STAGES - 1:
            grid = residual_forward(grid, weights.residual(f"ctx.enc.{k}.res"))
    return grid


def contextual_decode(y_hat: np.ndarray, contexts: TemporalContextSet, weights: WeightFile) -> np.ndarray:
    """Latent -> F_hat at full resolution; contexts 1..m-1 join at their scales."""
    grid = y_hat
    for i in range(CODER_STAGES):
        grid = pixel_shuffle_up(conv2d(grid, weights.conv(f"ctx.dec.{i}")))
        grid = residual_forward(grid, weights.residual(f"ctx.dec.{i}.res"))
        scale = CODER_STAGES - 1 - i
        if scale >= 1:
            grid = _with_context(grid, contexts, scale)
    return grid


def generate_frame(f_hat: np.ndarray, context0: np.ndarray, weights: WeightFile,
                   config: CodecConfig) -> Tuple[np.ndarray, np.ndarray]:
    """Returns (x_hat, F_t); F_t is the activation feeding the last conv."""
    grid = concat(f_hat, context0)
    for j in range(config.generator_blocks):
        grid = residual_forward(grid, weights.bottleneck(f"ctx.gen.block.{j}"))
    feature = conv2d(grid, weights.conv("ctx.gen.proj"))
    feature = np.clip(feature, -FEATURE_LIMIT, FEATURE_LIMIT).astype(np.float32)
    recon = np.clip(conv2d(feature, weights.conv("ctx.gen.out")), 0.0, 1.0).astype(np.float32)
    return recon, feature


def temporal_context_encode(contexts: TemporalContextSet, weights: WeightFile) -> np.ndarray:
    """Temporal prior f_c at latent resolution."""
    if contexts.at(0) is None:
        raise ConfigurationError("Temporal context encoder needs at least the level-0 context")
    grid = contexts.at(0)
    for k in range(CODER_STAGES):
        if k > 0:
            grid = _with_context(grid, contexts, k)
        grid = conv2d(grid, weights.conv(f"ctx.tenc.{k}"))
    return grid


def fuse_priors(f_c: np.ndarray, hyper_out: np.ndarray, weights: WeightFile) -> EntropyParameters:
    if f_c.shape[1:] != hyper_out.shape[1:]:
        raise ConfigurationError(
            f"Temporal prior {f_c.shape} and hyper prior {hyper_out.shape} sizes differ"
        )
    grid = conv2d(concat(f_c, hyper_out), weights.conv("ctx.fuse.0"))
    grid = conv2d(grid, weights.conv("ctx.fuse.1"))
    half = grid.shape[0] // 2
    return EntropyParameters(grid[:half], np.abs(grid[half:]))


class InterFrameCoder:
    """P-frame networks bound to one WeightFile. Stateless between frames."""

    def __init__(self, weights: WeightFile):
        self.weights = weights
        self.config = weights.config
        self.tcm = TcmConfig.from_codec_config(self.config)
        self.hyper = HyperPriorCodec(weights, "ctx")
        self.gain = np.float32(self.config.quant_gain)

    def contexts(self, dpb: DpbEntry, flow_hat: np.ndarray) -> TemporalContextSet:
        return mine_contexts(dpb.feature, flow_hat, self.tcm, self.weights)

    def prior(self, contexts: TemporalContextSet, z_symbols: np.ndarray) -> EntropyParameters:
        f_c = temporal_context_encode(_contexts_for(contexts, self.config.refill_entropy), self.weights)
        return fuse_priors(f_c, self.hyper.hyper_features(dequantize(z_symbols)), self.weights)

    def synthesize(self, y_symbols: np.ndarray, params: EntropyParameters,
                   contexts: TemporalContextSet) -> Tuple[np.ndarray, np.ndarray]:
        y_hat = (dequantize(y_symbols, params.mean) / self.gain).astype(np.float32)
        f_hat = contextual_decode(y_hat, _contexts_for(contexts, self.config.refill_decoder), self.weights)
        context0 = _contexts_for(contexts, self.config.refill_generator).at(0)
        return generate_frame(f_hat, context0, self.weights, self.config)


# ── Frame coding ──


def encode_inter_frame(x: np.ndarray, dpb: DpbEntry, weights: WeightFile, rd: RdConfig,
                       session: EntropySession, search: Optional[MotionSearch] = None,
                       index: int = 0) -> EncodedFrame:
    x = as_grid(x)
    if x.shape != dpb.frame.shape:
        raise ConfigurationError(f"Frame {x.shape} does not match reference {dpb.frame.shape}")
    search = search or MotionSearch()
    coder = InterFrameCoder(weights)

    flow = estimate_flow(x, dpb.frame, search.search_radius, search.block, search.pyramid_levels)
    mv_coded, flow_hat, mv_bits = mv_compress(flow, weights, session)
    contexts = coder.contexts(dpb, flow_hat)

    y = contextual_encode(x, _contexts_for(contexts, coder.config.refill_encoder), weights)
    z_symbols = quantize_symbols(coder.hyper.hyper_analysis(y))
    loc, scale = weights.prior("ctx")
    hyper = session.encode_factorized("ctx_hyper", z_symbols, loc, scale)
    params = coder.prior(contexts, z_symbols)
    y_symbols = quantize_symbols(y * coder.gain, params.mean)
    main = session.encode_laplace("ctx_main", y_symbols, params, mean_offset=True)

    recon, feature = coder.synthesize(y_symbols, params, contexts)
    record = FrameRecord(FrameType.P, [mv_coded.main, mv_coded.hyper, main, hyper],
                         reconstruction_crc(recon))
    stats = frame_stats(index, "P", x, recon, mv_bits, main.bits + hyper.bits,
                        rd.lmbda, rd.distortion)
    logger.debug(f"P frame {index}: {record.bits_total} bits, PSNR {stats.psnr:.2f} dB")
    return EncodedFrame(record, recon, feature, stats)


def decode_inter_frame(record: FrameRecord, dpb: DpbEntry, weights: WeightFile,
                       session: EntropySession, index: Optional[int] = None,
                       verify: bool = True) -> Tuple[np.ndarray, np.ndarray]:
    """Decoder side: consumes only the record, the buffer entry and the weights."""
    if record.frame_type != FrameType.P:
        raise DecodeError("decode_inter_frame got an I-frame record", frame_index=index)
    _, height, width = dpb.frame.shape
    coder = InterFrameCoder(weights)
    mv_main, mv_hyper, ctx_main, ctx_hyper = record.payloads

    flow_hat = mv_decompress(CodedLatents(mv_main, mv_hyper), height, width, weights, session)
    contexts = coder.contexts(dpb, flow_hat)

    z_shape = (weights.config.hyper_channels, height // HYPER_STRIDE, width // HYPER_STRIDE)
    loc, scale = weights.prior("ctx")
    z_symbols = session.decode_factorized(ctx_hyper, z_shape, loc, scale)
    params = coder.prior(contexts, z_symbols)
    y_symbols = session.decode_laplace(ctx_main, params, mean_offset=True)

    recon, feature = coder.synthesize(y_symbols, params, contexts)
    if verify:
        _verify_crc(recon, record, index)
    return recon, feature


def intra_codec(weights: WeightFile) -> HyperPriorCodec:
    return HyperPriorCodec(weights, "intra", mean_offset=True,
                           gain=weights.config.quant_gain, clip=(0.0, 1.0))


def encode_intra_frame(x: np.ndarray, weights: WeightFile, rd: RdConfig,
                       session: EntropySession, index: int = 0) -> EncodedFrame:
    x = as_grid(x)
    if x.shape[0] != weights.config.frame_channels:
        raise ConfigurationError(
            f"Frame has {x.shape[0]} channels, weights expect {weights.config.frame_channels}"
        )
    coded, recon = intra_codec(weights).encode(x, session)
    record = FrameRecord(FrameType.I, coded.streams, reconstruction_crc(recon))
    stats = frame_stats(index, "I", x, recon, 0, coded.bits, rd.lmbda, rd.distortion)
    logger.debug(f"I frame {index}: {record.bits_total} bits, PSNR {stats.psnr:.2f} dB")
    return EncodedFrame(record, recon, None, stats)


def decode_intra_frame(record: FrameRecord, weights: WeightFile, session: EntropySession,
                       height: int, width: int, index: Optional[int] = None,
                       verify: bool = True) -> np.ndarray:
    if record.frame_type != FrameType.I:
        raise DecodeError("decode_intra_frame got a P-frame record", frame_index=index)
    main, hyper = record.payloads
    recon = intra_codec(weights).decode(CodedLatents(main, hyper), height, width, session)
    if verify:
        _verify_crc(recon, record, index)
    return recon


def dpb_update(dpb: DecodedPictureBuffer, recon: np.ndarray, feature: Optional[np.ndarray],
               weights: WeightFile) -> DpbEntry:
    """Replace the single buffer entry. Without a generator feature (I frames,
    or propagation switched off) the feature is extracted from recon."""
    if feature is not None and weights.config.propagate_feature:
        entry = DpbEntry(recon, feature, DpbSource.GENERATOR)
    else:
        entry = DpbEntry(recon, extract_frame_feature(recon, weights), DpbSource.I_EXTRACTOR)
    dpb.store(entry)
    return entry
