"""
Temporal context mining.

From the propagated feature F_{t-1} in the decoded picture buffer and the
decoded motion v_hat, build a feature pyramid, warp every level with the motion
at its scale, fuse each level with the upsampled warped level one scale coarser
and refine the result into a context:

    F^l      extract: conv (stride 2 for l >= 1) + residual blocks
    Fbar^l   bilinear_warp(F^l, v^l)
    Ftil^l   concat(Fbar^l, upsample(Fbar^{l+1}))       l < L - 1
    Cbar^l   Fbar^l + refine(Ftil^l)                    (Fbar^{L-1} at the top)
"""

import enum
import logging
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .config import CodecConfig
from .errors import ConfigurationError
from .kernels import (
    as_grid,
    bilinear_downsample,
    bilinear_warp,
    concat,
    conv2d,
    pixel_shuffle_up,
    residual_forward,
)
from .weights import WeightFile

logger = logging.getLogger("tcmcodec.context")


@dataclass(frozen=True)
class TcmConfig:
    levels: int = 3
    contexts: int = 3
    channels: int = 64
    extract_blocks: int = 1
    refine_blocks: int = 1

    def __post_init__(self):
        if not 1 <= self.contexts <= self.levels:
            raise ConfigurationError(
                f"Need 1 <= contexts <= levels, got {self.levels}L{self.contexts}C"
            )

    @classmethod
    def from_codec_config(cls, config: CodecConfig) -> "TcmConfig":
        return cls(
            config.tcm_levels,
            config.tcm_contexts,
            config.context_channels,
            config.extract_blocks,
            config.refine_blocks,
        )

    @property
    def label(self) -> str:
        return f"{self.levels}L{self.contexts}C"


@dataclass
class TcmStageBuffers:
    extracted: List[np.ndarray] = field(default_factory=list)
    warped: List[np.ndarray] = field(default_factory=list)
    fused: List[Optional[np.ndarray]] = field(default_factory=list)
    contexts: List[np.ndarray] = field(default_factory=list)
    motion: List[np.ndarray] = field(default_factory=list)


@dataclass
class TemporalContextSet:
    """The m emitted contexts, finest first, plus every intermediate grid."""

    contexts: List[np.ndarray]
    buffers: TcmStageBuffers

    def __len__(self):
        return len(self.contexts)

    def at(self, level: int) -> Optional[np.ndarray]:
        return self.contexts[level] if level < len(self.contexts) else None

    def zeroed(self) -> "TemporalContextSet":
        """Same shapes, all zeros; stands in for a component that is not re-filled."""
        return TemporalContextSet([np.zeros_like(c) for c in self.contexts], self.buffers)


# ── Decoded picture buffer ──


class DpbSource(str, enum.Enum):
    I_EXTRACTOR = "i-extractor"
    GENERATOR = "generator"


@dataclass(frozen=True)
class DpbEntry:
    frame: np.ndarray
    feature: np.ndarray
    source: DpbSource

    def __post_init__(self):
        if self.feature.shape[1:] != self.frame.shape[1:]:
            raise ConfigurationError(
                f"Feature {self.feature.shape} and frame {self.frame.shape} sizes differ"
            )


class DecodedPictureBuffer:
    """Holds exactly one reference: the last reconstruction and its feature."""

    def __init__(self, dpb_channels: int):
        self.dpb_channels = dpb_channels
        self._entry: Optional[DpbEntry] = None

    def __len__(self):
        return 0 if self._entry is None else 1

    @property
    def entry(self) -> DpbEntry:
        if self._entry is None:
            raise ConfigurationError("Decoded picture buffer is empty (stream must start with an I frame)")
        return self._entry

    def store(self, entry: DpbEntry):
        if entry.feature.shape[0] != self.dpb_channels:
            raise ConfigurationError(
                f"Feature has {entry.feature.shape[0]} channels, buffer holds {self.dpb_channels}"
            )
        self._entry = entry


def extract_frame_feature(frame: np.ndarray, weights: WeightFile) -> np.ndarray:
    """Feature of a reconstructed frame, used after I frames."""
    grid = conv2d(as_grid(frame), weights.conv("dpb.extract.0"))
    return conv2d(grid, weights.conv("dpb.extract.1"))


# ── Context mining ──


def derive_multiscale_mv(flow: np.ndarray, levels: int) -> List[np.ndarray]:
    _, height, width = flow.shape
    unit = 2 ** (levels - 1)
    if height % unit or width % unit:
        raise ConfigurationError(
            f"Motion field {height}x{width} is not divisible by {unit} for {levels} levels"
        )
    pyramid = [flow]
    for _ in range(levels - 1):
        pyramid.append((bilinear_downsample(pyramid[-1]) / np.float32(2)).astype(np.float32))
    return pyramid


def _residual_chain(grid: np.ndarray, weights: WeightFile, prefix: str, blocks: int) -> np.ndarray:
    for j in range(blocks):
        grid = residual_forward(grid, weights.residual(f"{prefix}.{j}"))
    return grid


def extract_level(grid: np.ndarray, level: int, config: TcmConfig, weights: WeightFile) -> np.ndarray:
    grid = conv2d(grid, weights.conv(f"tcm.extract.{level}.conv"))
    return _residual_chain(grid, weights, f"tcm.extract.{level}.res", config.extract_blocks)


def upsample_level(grid: np.ndarray, level: int, weights: WeightFile) -> np.ndarray:
    grid = pixel_shuffle_up(conv2d(grid, weights.conv(f"tcm.up.{level}.conv")))
    return residual_forward(grid, weights.residual(f"tcm.up.{level}.res"))


def refine_level(grid: np.ndarray, level: int, config: TcmConfig, weights: WeightFile) -> np.ndarray:
    grid = conv2d(grid, weights.conv(f"tcm.refine.{level}.conv"))
    return _residual_chain(grid, weights, f"tcm.refine.{level}.res", config.refine_blocks)


def mine_contexts(feature: np.ndarray, flow: np.ndarray, config: TcmConfig,
                  weights: WeightFile) -> TemporalContextSet:
    feature = as_grid(feature)
    flow = as_grid(flow)
    if feature.shape[1:] != flow.shape[1:]:
        raise ConfigurationError(
            f"Feature {feature.shape[1:]} and motion {flow.shape[1:]} sizes differ"
        )
    expected = weights.conv("tcm.extract.0.conv").in_channels
    if feature.shape[0] != expected:
        raise ConfigurationError(
            f"Propagated feature has {feature.shape[0]} channels, TCM expects {expected}"
        )
    L = config.levels
    buffers = TcmStageBuffers(motion=derive_multiscale_mv(flow, L))

    grid = feature
    for l in range(L):
        grid = extract_level(grid, l, config, weights)
        buffers.extracted.append(grid)
        buffers.warped.append(bilinear_warp(grid, buffers.motion[l]))

    fused: List[Optional[np.ndarray]] = [None] * L
    for l in range(L - 1):
        fused[l] = concat(buffers.warped[l], upsample_level(buffers.warped[l + 1], l, weights))

    # the coarsest level refines its warped feature alone
    contexts = []
    for l in range(L):
        refine_in = buffers.warped[l] if fused[l] is None else fused[l]
        contexts.append(buffers.warped[l] + refine_level(refine_in, l, config, weights))

    buffers.fused = fused
    buffers.contexts = contexts
    return TemporalContextSet(contexts[: config.contexts], buffers)
