"""
Entropy coding: quantization, Laplace and factorized probability models,
16-bit CDF tables and a byte-oriented range coder.

Range coder:
    32-bit range, carry propagated through a one-byte cache (the low register
    may exceed 32 bits by one carry bit), renormalization one byte at a time
    whenever the range drops below 2^24. Frequencies are 16-bit, so each coding
    step divides a range of at least 2^24 by 2^16 and loses at most 1/256 of it.

    Output layout: the encoder always emits one leading zero byte (the initial
    cache) and flushes four bytes of the low register, so an empty stream is
    5 bytes long.

CDF tables:
    One row per distribution over the symbols [s_min, s_max]. The two end bins
    absorb the tails of the Laplace so the row sums to exactly 65536; every bin
    keeps a frequency of at least 1.
"""

import bisect
import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .errors import ConfigurationError, DecodeError, EncodingError, NumericError

logger = logging.getLogger("tcmcodec.entropy")

SCALE_FLOOR = 0.11
P_MIN = 2.0 ** -16
PRECISION_BITS = 16
TOTAL_FREQ = 1 << PRECISION_BITS

# Symbol ranges are written to the container as signed 16-bit values
SYMBOL_LIMIT = (-(1 << 15), (1 << 15) - 1)

_RANGE_TOP = 1 << 24
_MASK32 = 0xFFFFFFFF


# ── Quantization ──


def round_half_away(values: np.ndarray) -> np.ndarray:
    return np.sign(values) * np.floor(np.abs(values) + 0.5)


def quantize_symbols(latent: np.ndarray, mean: Optional[np.ndarray] = None) -> np.ndarray:
    """Integer symbols actually written to the bitstream: round(y) or round(y - mu)."""
    latent = np.asarray(latent, dtype=np.float32)
    if not np.all(np.isfinite(latent)):
        raise NumericError("Cannot quantize non-finite latent values")
    if mean is None:
        return round_half_away(latent.astype(np.float64)).astype(np.int64)
    mean = np.asarray(mean, dtype=np.float32)
    if mean.shape != latent.shape:
        raise ConfigurationError(
            f"Mean shape {mean.shape} does not match latent {latent.shape}"
        )
    offsets = latent.astype(np.float64) - mean.astype(np.float64)
    return round_half_away(offsets).astype(np.int64)


def dequantize(symbols: np.ndarray, mean: Optional[np.ndarray] = None) -> np.ndarray:
    """The one place decoded symbols turn back into latent values; encoder and
    decoder both call it so their reconstructions match bit for bit."""
    values = np.asarray(symbols).astype(np.float32)
    if mean is None:
        return values
    return (values + np.asarray(mean, dtype=np.float32)).astype(np.float32)


def quantize(latent: np.ndarray, mean: Optional[np.ndarray] = None) -> np.ndarray:
    return dequantize(quantize_symbols(latent, mean), mean)


# ── Laplace model ──


@dataclass
class EntropyParameters:
    mean: np.ndarray
    scale: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float32)
        self.scale = np.maximum(np.asarray(self.scale, dtype=np.float32), np.float32(SCALE_FLOOR))
        if self.mean.shape != self.scale.shape:
            raise ConfigurationError(
                f"Mean {self.mean.shape} and scale {self.scale.shape} shapes differ"
            )


def _laplace_mass(lower, upper, scale):
    """P(lower < X <= upper) for Laplace(0, scale), computed on the tail that
    avoids cancellation."""
    lower = np.asarray(lower, dtype=np.float64)
    upper = np.asarray(upper, dtype=np.float64)
    scale = np.asarray(scale, dtype=np.float64)
    right = 0.5 * (np.exp(-np.maximum(lower, 0) / scale) - np.exp(-np.maximum(upper, 0) / scale))
    left = 0.5 * (np.exp(np.minimum(upper, 0) / scale) - np.exp(np.minimum(lower, 0) / scale))
    straddle = 1.0 - 0.5 * np.exp(-np.maximum(upper, 0) / scale) - 0.5 * np.exp(np.minimum(lower, 0) / scale)
    return np.where(lower >= 0, right, np.where(upper <= 0, left, straddle))


def laplace_bin_probability(symbol, mean, scale, clamp: bool = True):
    scale = np.maximum(np.asarray(scale, dtype=np.float64), SCALE_FLOOR)
    centered = np.asarray(symbol, dtype=np.float64) - np.asarray(mean, dtype=np.float64)
    prob = _laplace_mass(centered - 0.5, centered + 0.5, scale)
    if clamp:
        prob = np.maximum(prob, P_MIN)
    if prob.ndim == 0:
        return float(prob)
    return prob


def estimate_rate_bits(symbols: np.ndarray, params: EntropyParameters, mean_offset: bool = False) -> float:
    """Model rate of integer symbols. With mean_offset the symbols are offsets
    round(y - mu) and are modeled around zero."""
    symbols = np.asarray(symbols)
    if symbols.shape != params.mean.shape:
        raise ConfigurationError(
            f"Symbols {symbols.shape} do not match parameters {params.mean.shape}"
        )
    mean = np.zeros_like(params.mean) if mean_offset else params.mean
    probs = laplace_bin_probability(symbols, mean, params.scale)
    return float(-np.sum(np.log2(probs)))


# ── CDF tables ──


@dataclass
class CdfTable:
    """Integer CDF rows over [s_min, s_max]; row r describes one distribution."""

    cdf: np.ndarray  # (rows, num_symbols + 1) int64
    s_min: int
    s_max: int

    @property
    def num_symbols(self) -> int:
        return self.s_max - self.s_min + 1

    @property
    def rows(self) -> int:
        return self.cdf.shape[0]

    @property
    def freqs(self) -> np.ndarray:
        return np.diff(self.cdf, axis=1)

    def check(self) -> "CdfTable":
        if self.cdf.shape[1] != self.num_symbols + 1:
            raise ConfigurationError("CDF row length does not match symbol range")
        if np.any(self.cdf[:, 0] != 0) or np.any(self.cdf[:, -1] != TOTAL_FREQ):
            raise ConfigurationError(f"CDF rows must run from 0 to {TOTAL_FREQ}")
        if np.any(self.freqs < 1):
            raise ConfigurationError("Every CDF bin needs a frequency of at least 1")
        return self

    def bits(self, symbols: np.ndarray, indexes: Optional[np.ndarray] = None) -> float:
        """Information content of symbols under the integerized table."""
        symbols = np.asarray(symbols, dtype=np.int64).ravel()
        rows = _resolve_indexes(self, symbols.size, indexes)
        offset = symbols - self.s_min
        freq = self.freqs[rows, offset]
        return float(np.sum(PRECISION_BITS - np.log2(freq)))


def symbol_range(symbols: np.ndarray) -> tuple:
    """Per-tensor coding range [min - 1, max + 1]."""
    symbols = np.asarray(symbols)
    if symbols.size == 0:
        return (-1, 1)
    s_min = int(symbols.min()) - 1
    s_max = int(symbols.max()) + 1
    if s_min < SYMBOL_LIMIT[0] or s_max > SYMBOL_LIMIT[1]:
        raise EncodingError(
            f"Symbol range [{s_min}, {s_max}] does not fit the 16-bit container field"
        )
    return s_min, s_max


def quantize_pmf(pmf: np.ndarray) -> np.ndarray:
    """Integerize probability rows to frequencies summing to TOTAL_FREQ with
    every bin >= 1 (largest remainder)."""
    pmf = np.asarray(pmf, dtype=np.float64)
    rows, bins = pmf.shape
    if bins > TOTAL_FREQ:
        raise ConfigurationError(
            f"Range of {bins} symbols is too wide for {PRECISION_BITS}-bit frequencies"
        )
    scaled = pmf * TOTAL_FREQ
    freq = np.floor(scaled).astype(np.int64)
    frac = scaled - freq
    freq = np.maximum(freq, 1)
    remaining = TOTAL_FREQ - freq.sum(axis=1)

    # Hand out missing units to the largest fractional parts
    order = np.argsort(-frac, axis=1, kind="stable")
    rank = np.empty_like(order)
    np.put_along_axis(rank, order, np.arange(bins)[None, :].repeat(rows, axis=0), axis=1)
    freq += (rank < np.maximum(remaining, 0)[:, None]).astype(np.int64)

    # Rows that overshot (many bins raised to 1) give units back from the largest bins
    for r in np.nonzero(remaining < 0)[0]:
        excess = -int(remaining[r])
        for b in np.argsort(-freq[r], kind="stable"):
            take = min(excess, int(freq[r, b]) - 1)
            freq[r, b] -= take
            excess -= take
            if excess == 0:
                break
    return freq


def _table_from_pmf(pmf: np.ndarray, s_min: int, s_max: int) -> CdfTable:
    freq = quantize_pmf(pmf)
    cdf = np.zeros((freq.shape[0], freq.shape[1] + 1), dtype=np.int64)
    np.cumsum(freq, axis=1, out=cdf[:, 1:])
    return CdfTable(cdf, int(s_min), int(s_max))


def laplace_pmf(mean, scale, s_min: int, s_max: int) -> np.ndarray:
    """Bin probabilities per row; the end bins hold the tails."""
    mean = np.atleast_1d(np.asarray(mean, dtype=np.float64)).ravel()
    scale = np.maximum(np.atleast_1d(np.asarray(scale, dtype=np.float64)).ravel(), SCALE_FLOOR)
    symbols = np.arange(s_min, s_max + 1, dtype=np.float64)
    centered = symbols[None, :] - mean[:, None]
    lower = centered - 0.5
    upper = centered + 0.5
    lower[:, 0] = -np.inf
    upper[:, -1] = np.inf
    return _laplace_mass(lower, upper, scale[:, None])


def build_cdf_table(mean, scale, s_min: int, s_max: int) -> CdfTable:
    """Laplace CDF rows, one per (mean, scale) pair; scalars give one row."""
    if s_min >= s_max:
        raise ConfigurationError(f"Empty symbol range [{s_min}, {s_max}]")
    return _table_from_pmf(laplace_pmf(mean, scale, s_min, s_max), s_min, s_max)


def uniform_table(num_symbols: int, s_min: int = 0) -> CdfTable:
    pmf = np.full((1, num_symbols), 1.0 / num_symbols)
    return _table_from_pmf(pmf, s_min, s_min + num_symbols - 1)


# ── Range coder ──


@dataclass
class Payload:
    data: bytes
    symbol_count: int


class RangeEncoder:
    """Single-stream encoder session; not thread safe."""

    def __init__(self):
        self.low = 0
        self.range = _MASK32
        self._cache = 0
        self._cache_size = 1
        self._out = bytearray()

    def _shift_low(self):
        if self.low < 0xFF000000 or self.low > _MASK32:
            carry = self.low >> 32
            temp = self._cache
            while True:
                self._out.append((temp + carry) & 0xFF)
                temp = 0xFF
                self._cache_size -= 1
                if self._cache_size == 0:
                    break
            self._cache = (self.low >> 24) & 0xFF
        self._cache_size += 1
        self.low = (self.low << 8) & _MASK32

    def encode(self, cum_freq: int, freq: int):
        r = self.range >> PRECISION_BITS
        self.low += r * cum_freq
        self.range = r * freq
        while self.range < _RANGE_TOP:
            self.range <<= 8
            self._shift_low()

    def finish(self) -> bytes:
        for _ in range(5):
            self._shift_low()
        return bytes(self._out)


class RangeDecoder:
    """Single-stream decoder session; not thread safe."""

    def __init__(self, data: bytes):
        self._data = data
        self._pos = 0
        self.range = _MASK32
        self.code = 0
        for _ in range(5):
            self.code = ((self.code << 8) | self._next_byte()) & _MASK32

    def _next_byte(self) -> int:
        if self._pos >= len(self._data):
            raise DecodeError("Range coder payload is truncated")
        b = self._data[self._pos]
        self._pos += 1
        return b

    def decode(self, cdf_row: List[int]) -> int:
        """Return the bin index for one symbol coded with cdf_row."""
        r = self.range >> PRECISION_BITS
        target = self.code // r
        if target >= TOTAL_FREQ:
            raise DecodeError("Range coder state out of bounds (corrupt payload)")
        index = bisect.bisect_right(cdf_row, target) - 1
        low = cdf_row[index]
        self.code -= r * low
        self.range = r * (cdf_row[index + 1] - low)
        while self.range < _RANGE_TOP:
            self.code = ((self.code << 8) | self._next_byte()) & _MASK32
            self.range <<= 8
        return index


def _resolve_indexes(table: CdfTable, count: int, indexes: Optional[np.ndarray]) -> np.ndarray:
    if indexes is None:
        if table.rows == 1:
            return np.zeros(count, dtype=np.intp)
        if table.rows != count:
            raise ConfigurationError(
                f"Table has {table.rows} rows for {count} symbols and no index map"
            )
        return np.arange(count, dtype=np.intp)
    indexes = np.asarray(indexes, dtype=np.intp).ravel()
    if indexes.size != count:
        raise ConfigurationError("Index map length does not match symbol count")
    if count and (indexes.min() < 0 or indexes.max() >= table.rows):
        raise ConfigurationError("Index map refers to a missing table row")
    return indexes


def range_encode(symbols, table: CdfTable, indexes: Optional[np.ndarray] = None) -> Payload:
    symbols = np.asarray(symbols, dtype=np.int64).ravel()
    rows = _resolve_indexes(table, symbols.size, indexes)
    if symbols.size and (symbols.min() < table.s_min or symbols.max() > table.s_max):
        raise EncodingError(
            f"Symbols outside table range [{table.s_min}, {table.s_max}]"
        )
    cdf = table.cdf
    offsets = (symbols - table.s_min).tolist()
    starts = cdf[rows, offsets].tolist() if symbols.size else []
    ends = cdf[rows, np.asarray(offsets, dtype=np.intp) + 1].tolist() if symbols.size else []

    encoder = RangeEncoder()
    for low, high in zip(starts, ends):
        encoder.encode(low, high - low)
    return Payload(encoder.finish(), int(symbols.size))


def range_decode(payload: Payload, table: CdfTable, indexes: Optional[np.ndarray] = None) -> np.ndarray:
    count = payload.symbol_count
    rows = _resolve_indexes(table, count, indexes).tolist()
    cdf_rows = table.cdf.tolist()
    decoder = RangeDecoder(payload.data)
    out = np.empty(count, dtype=np.int64)
    for i, row in enumerate(rows):
        out[i] = decoder.decode(cdf_rows[row])
    return out + table.s_min


# ── Coding sessions ──


@dataclass
class CodedStream:
    """One entropy-coded tensor as stored in the container."""

    s_min: int
    s_max: int
    data: bytes
    name: str = field(default="", compare=False)
    # integerized-table rate, encoder side only
    estimated_bits: Optional[float] = field(default=None, compare=False)

    @property
    def bits(self) -> int:
        return 8 * len(self.data)


@dataclass
class EntropySession:
    """Stateful coder for one video: codes tensors and keeps an audit trail of
    every stream it produced. One session is used from a single thread."""

    streams: List[CodedStream] = field(default_factory=list)

    def encode_laplace(self, name: str, symbols: np.ndarray, params: EntropyParameters,
                       mean_offset: bool = False) -> CodedStream:
        """Code symbols with per-element Laplace(mu, b). With mean_offset the
        symbols are round(y - mu) offsets and are modeled around zero."""
        symbols = np.asarray(symbols, dtype=np.int64)
        if symbols.shape != params.mean.shape:
            raise ConfigurationError(
                f"{name}: symbols {symbols.shape} do not match parameters {params.mean.shape}"
            )
        s_min, s_max = symbol_range(symbols)
        table = self._laplace_table(params, s_min, s_max, mean_offset)
        payload = range_encode(symbols, table)
        stream = CodedStream(s_min, s_max, payload.data, name, table.bits(symbols))
        self.streams.append(stream)
        logger.debug(
            f"{name}: {symbols.size} symbols in [{s_min}, {s_max}] -> "
            f"{len(payload.data)} bytes (model {stream.estimated_bits:.1f} bits)"
        )
        return stream

    def decode_laplace(self, stream: CodedStream, params: EntropyParameters,
                       mean_offset: bool = False) -> np.ndarray:
        self._check_stream(stream)
        table = self._laplace_table(params, stream.s_min, stream.s_max, mean_offset)
        payload = Payload(stream.data, params.mean.size)
        return range_decode(payload, table).reshape(params.mean.shape)

    def encode_factorized(self, name: str, symbols: np.ndarray, loc: np.ndarray,
                          scale: np.ndarray) -> CodedStream:
        """Code a (C, H, W) hyper latent with one static Laplace per channel."""
        symbols = np.asarray(symbols, dtype=np.int64)
        s_min, s_max = symbol_range(symbols)
        table, indexes = self._factorized_table(symbols.shape, loc, scale, s_min, s_max)
        payload = range_encode(symbols, table, indexes)
        stream = CodedStream(s_min, s_max, payload.data, name, table.bits(symbols, indexes))
        self.streams.append(stream)
        return stream

    def decode_factorized(self, stream: CodedStream, shape: tuple, loc: np.ndarray,
                          scale: np.ndarray) -> np.ndarray:
        self._check_stream(stream)
        table, indexes = self._factorized_table(shape, loc, scale, stream.s_min, stream.s_max)
        payload = Payload(stream.data, int(np.prod(shape)))
        return range_decode(payload, table, indexes).reshape(shape)

    @staticmethod
    def _check_stream(stream: CodedStream):
        width = stream.s_max - stream.s_min + 1
        if width < 2 or width > TOTAL_FREQ:
            raise DecodeError(f"{stream.name or 'stream'}: invalid symbol range [{stream.s_min}, {stream.s_max}]")

    @staticmethod
    def _laplace_table(params: EntropyParameters, s_min: int, s_max: int,
                       mean_offset: bool) -> CdfTable:
        mean = np.zeros(params.mean.size) if mean_offset else params.mean.ravel()
        return build_cdf_table(mean, params.scale.ravel(), s_min, s_max)

    @staticmethod
    def _factorized_table(shape, loc, scale, s_min, s_max):
        channels = shape[0]
        loc = np.asarray(loc, dtype=np.float32).ravel()
        scale = np.asarray(scale, dtype=np.float32).ravel()
        if loc.size != channels or scale.size != channels:
            raise ConfigurationError(
                f"Factorized prior has {loc.size} channels, latent has {channels}"
            )
        table = build_cdf_table(loc, scale, s_min, s_max)
        per_channel = int(np.prod(shape[1:]))
        indexes = np.repeat(np.arange(channels), per_channel)
        return table, indexes

    @property
    def total_bytes(self) -> int:
        return sum(len(s.data) for s in self.streams)

    @property
    def estimated_bits(self) -> float:
        return float(sum(s.estimated_bits or 0.0 for s in self.streams))


def rate_slack_bits(estimated_bits: float) -> float:
    """Allowed gap between written and modeled bits for one stream."""
    return max(0.01 * estimated_bits, 256.0)


def entropy_of(freqs) -> float:
    """Shannon entropy in bits of an integer frequency vector."""
    total = float(sum(freqs))
    return -sum(f / total * math.log2(f / total) for f in freqs if f)
