"""
Forward-only numeric kernels every network of the codec is composed from.

A Grid is a float32 numpy array shaped (channels, height, width). Kernels are
pure functions: identical inputs give bit-identical outputs. Convolution sums
accumulate in float64 and are rounded to float32 once, so the result does not
depend on the summation order BLAS happens to choose for the float64 product.
"""

import logging
from dataclasses import dataclass
from typing import Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, NumericError

logger = logging.getLogger("tcmcodec.kernels")

LEAKY_SLOPE = 0.01
ACTIVATIONS = ("none", "leaky")


def as_grid(values) -> np.ndarray:
    """Coerce to a finite float32 (C, H, W) grid."""
    grid = np.asarray(values, dtype=np.float32)
    if grid.ndim != 3 or min(grid.shape) < 1:
        raise ConfigurationError(f"Grid must be (C, H, W), got shape {grid.shape}")
    return check_finite(grid)


def check_finite(grid: np.ndarray, where: str = "grid") -> np.ndarray:
    if not np.all(np.isfinite(grid)):
        raise NumericError(f"Non-finite values in {where}")
    return grid


def leaky_relu(x: np.ndarray) -> np.ndarray:
    return np.where(x >= 0, x, x * LEAKY_SLOPE)


def concat(*grids: np.ndarray) -> np.ndarray:
    shapes = {g.shape[1:] for g in grids}
    if len(shapes) != 1:
        raise ConfigurationError(f"Cannot concatenate grids of sizes {sorted(shapes)}")
    return np.concatenate(grids, axis=0)


@dataclass(frozen=True)
class ConvSpec:
    weight: np.ndarray  # (out, in, k, k) float32
    bias: np.ndarray  # (out,) float32
    stride: int = 1
    activation: str = "none"

    def __post_init__(self):
        if self.weight.ndim != 4 or self.weight.shape[2] != self.weight.shape[3]:
            raise ConfigurationError(
                f"Conv weight must be (out, in, k, k), got {self.weight.shape}"
            )
        if self.kernel_size % 2 != 1:
            raise ConfigurationError(f"Kernel size must be odd, got {self.kernel_size}")
        if self.stride not in (1, 2):
            raise ConfigurationError(f"Stride must be 1 or 2, got {self.stride}")
        if self.bias.shape != (self.out_channels,):
            raise ConfigurationError(
                f"Bias shape {self.bias.shape} does not match {self.out_channels} outputs"
            )
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"Unknown activation '{self.activation}'")

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def kernel_size(self) -> int:
        return self.weight.shape[2]

    @classmethod
    def zeros(cls, in_channels, out_channels, kernel_size=3, stride=1, activation="none"):
        return cls(
            np.zeros((out_channels, in_channels, kernel_size, kernel_size), np.float32),
            np.zeros(out_channels, np.float32),
            stride,
            activation,
        )


@dataclass(frozen=True)
class ResidualBlockSpec:
    conv1: ConvSpec
    conv2: ConvSpec

    def __post_init__(self):
        n = self.conv1.in_channels
        for conv in (self.conv1, self.conv2):
            if conv.stride != 1 or conv.kernel_size != 3:
                raise ConfigurationError("Residual block convs are 3x3, stride 1")
        if (self.conv1.out_channels, self.conv2.in_channels, self.conv2.out_channels) != (n, n, n):
            raise ConfigurationError(f"Residual block must keep {n} channels throughout")

    @property
    def channels(self) -> int:
        return self.conv1.in_channels


@dataclass(frozen=True)
class BottleneckBlockSpec:
    conv1: ConvSpec
    conv2: ConvSpec

    def __post_init__(self):
        n_in, n_mid = self.conv1.in_channels, self.conv1.out_channels
        for conv in (self.conv1, self.conv2):
            if conv.stride != 1 or conv.kernel_size != 3:
                raise ConfigurationError("Bottleneck block convs are 3x3, stride 1")
        if n_mid >= n_in:
            raise ConfigurationError(
                f"Bottleneck middle width {n_mid} must be below {n_in}"
            )
        if (self.conv2.in_channels, self.conv2.out_channels) != (n_mid, n_in):
            raise ConfigurationError("Bottleneck conv2 must map N_mid back to N_in")

    @property
    def channels(self) -> int:
        return self.conv1.in_channels


def conv2d(grid: np.ndarray, spec: ConvSpec) -> np.ndarray:
    channels, height, width = grid.shape
    if channels != spec.in_channels:
        raise ConfigurationError(
            f"conv2d expects {spec.in_channels} input channels, got {channels}"
        )
    k = spec.kernel_size
    pad = (k - 1) // 2
    padded = np.pad(grid.astype(np.float64), ((0, 0), (pad, pad), (pad, pad)))
    # (C, H, W, k, k) views, subsampled by the stride -> ceil(H/s) x ceil(W/s)
    windows = sliding_window_view(padded, (k, k), axis=(1, 2))
    windows = windows[:, :: spec.stride, :: spec.stride]
    out = np.tensordot(
        spec.weight.astype(np.float64), windows, axes=([1, 2, 3], [0, 3, 4])
    )
    out += spec.bias.astype(np.float64)[:, None, None]
    if spec.activation == "leaky":
        out = leaky_relu(out)
    return check_finite(out.astype(np.float32), "conv2d output")


def pixel_shuffle_up(grid: np.ndarray, factor: int = 2) -> np.ndarray:
    channels, height, width = grid.shape
    if factor != 2:
        raise ConfigurationError(f"Only factor 2 is supported, got {factor}")
    if channels % 4:
        raise ConfigurationError(
            f"pixel_shuffle_up needs channels divisible by 4, got {channels}"
        )
    # channel c*4 + dy*2 + dx at (y, x) -> channel c at (2y+dy, 2x+dx)
    out = grid.reshape(channels // 4, 2, 2, height, width)
    out = out.transpose(0, 3, 1, 4, 2)
    return np.ascontiguousarray(out.reshape(channels // 4, height * 2, width * 2))


def bilinear_warp(source: np.ndarray, flow: np.ndarray) -> np.ndarray:
    """Backward warp: output(c, y, x) samples source at (y + dy, x + dx).
    Sample positions are clamped to the image (edge replicate)."""
    channels, height, width = source.shape
    if flow.shape != (2, height, width):
        raise ConfigurationError(
            f"Flow shape {flow.shape} does not match source {(height, width)}"
        )
    ys, xs = np.meshgrid(
        np.arange(height, dtype=np.float64),
        np.arange(width, dtype=np.float64),
        indexing="ij",
    )
    sy = np.clip(ys + flow[0].astype(np.float64), 0, height - 1)
    sx = np.clip(xs + flow[1].astype(np.float64), 0, width - 1)
    y0 = np.floor(sy).astype(np.intp)
    x0 = np.floor(sx).astype(np.intp)
    y1 = np.minimum(y0 + 1, height - 1)
    x1 = np.minimum(x0 + 1, width - 1)
    wy = sy - y0
    wx = sx - x0

    src = source.astype(np.float64)
    top = src[:, y0, x0] * (1 - wx) + src[:, y0, x1] * wx
    bottom = src[:, y1, x0] * (1 - wx) + src[:, y1, x1] * wx
    out = top * (1 - wy) + bottom * wy
    return check_finite(out.astype(np.float32), "bilinear_warp output")


def bilinear_downsample(grid: np.ndarray) -> np.ndarray:
    channels, height, width = grid.shape
    if height % 2 or width % 2:
        raise ConfigurationError(
            f"bilinear_downsample needs even dimensions, got {height}x{width}"
        )
    blocks = grid.astype(np.float64).reshape(channels, height // 2, 2, width // 2, 2)
    return blocks.mean(axis=(2, 4)).astype(np.float32)


def residual_forward(
    grid: np.ndarray, spec: Union[ResidualBlockSpec, BottleneckBlockSpec]
) -> np.ndarray:
    if grid.shape[0] != spec.channels:
        raise ConfigurationError(
            f"Residual block expects {spec.channels} channels, got {grid.shape[0]}"
        )
    branch = conv2d(conv2d(grid, spec.conv1), spec.conv2)
    return check_finite(grid + branch, "residual output")
