"""
Raw planar 8-bit video files and the padding applied before coding.

A file is frame after frame, each frame channel-planar (all of R, then G,
then B; or a single luma plane). The size is not stored in the file: it
comes from the command line or from a "name_WxH" file name.
"""

import logging
import os
import re
from dataclasses import dataclass
from typing import Iterator, Optional, Tuple

import numpy as np

from .config import PAD_MULTIPLE, atomic_write_bytes
from .errors import ConfigurationError, FormatError

logger = logging.getLogger("tcmcodec.video")

_SIZE_PATTERN = re.compile(r"_(\d+)x(\d+)(?=[._]|$)")


def infer_size(path: str) -> Optional[Tuple[int, int]]:
    """(width, height) from a name like foreman_352x288.rgb, else None."""
    match = None
    for match in _SIZE_PATTERN.finditer(os.path.basename(path)):
        pass
    if match is None:
        return None
    return int(match.group(1)), int(match.group(2))


def parse_size(text: str) -> Tuple[int, int]:
    try:
        width, height = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise ConfigurationError(f"Size must look like WxH, got '{text}'") from None
    if width < 1 or height < 1:
        raise ConfigurationError(f"Size must be positive, got '{text}'")
    return width, height


@dataclass
class RawVideo:
    width: int
    height: int
    channels: int
    frames: np.ndarray  # (T, C, H, W) float32 in [0, 1]

    def __post_init__(self):
        if self.channels not in (1, 3):
            raise ConfigurationError(f"channels must be 1 or 3, got {self.channels}")
        expected = (self.channels, self.height, self.width)
        if self.frames.ndim != 4 or self.frames.shape[1:] != expected:
            raise ConfigurationError(
                f"Frames shaped {self.frames.shape}, expected (T, {', '.join(map(str, expected))})"
            )

    @property
    def frame_count(self) -> int:
        return self.frames.shape[0]

    @property
    def frame_bytes(self) -> int:
        return self.width * self.height * self.channels

    def __iter__(self) -> Iterator[np.ndarray]:
        return iter(self.frames)

    @classmethod
    def load(cls, path: str, width: int, height: int, channels: int = 3,
             max_frames: Optional[int] = None) -> "RawVideo":
        frame_bytes = width * height * channels
        try:
            size = os.path.getsize(path)
        except OSError as e:
            raise ConfigurationError(f"Cannot read video: {e}") from None
        if size == 0 or size % frame_bytes:
            raise FormatError(
                f"{path}: {size} bytes is not a whole number of {width}x{height}x{channels} frames"
            )
        count = size // frame_bytes
        if max_frames is not None:
            count = min(count, max_frames)
        with open(path, "rb") as f:
            data = f.read(count * frame_bytes)
        raw = np.frombuffer(data, dtype=np.uint8).reshape(count, channels, height, width)
        logger.debug(f"Loaded {count} frames of {width}x{height}x{channels} from {path}")
        return cls(width, height, channels, (raw.astype(np.float32) / np.float32(255)))

    def to_bytes(self) -> bytes:
        return to_uint8(self.frames).tobytes()

    def save(self, path: str):
        atomic_write_bytes(path, self.to_bytes())


def to_uint8(frames: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(np.asarray(frames, dtype=np.float64) * 255.0 + 0.5), 0, 255).astype(np.uint8)


def padded_size(width: int, height: int, multiple: int = PAD_MULTIPLE) -> Tuple[int, int]:
    return -(-width // multiple) * multiple, -(-height // multiple) * multiple


def pad_frame(frame: np.ndarray, multiple: int = PAD_MULTIPLE) -> np.ndarray:
    """Reflect-pad the right and bottom edges up to a multiple of `multiple`."""
    _, height, width = frame.shape
    padded_w, padded_h = padded_size(width, height, multiple)
    if (padded_w, padded_h) == (width, height):
        return np.ascontiguousarray(frame, dtype=np.float32)
    mode = "reflect" if min(height, width) > 1 else "edge"
    out = np.pad(frame, ((0, 0), (0, padded_h - height), (0, padded_w - width)), mode=mode)
    return out.astype(np.float32)


def crop_frame(frame: np.ndarray, width: int, height: int) -> np.ndarray:
    return frame[:, :height, :width]
