from __future__ import annotations

import os
import sys

import numpy as np
import pytest

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
if ROOT not in sys.path:
    sys.path.insert(0, ROOT)

from tcmcodec import config as config_module  # noqa: E402
from tcmcodec.config import CodecConfig  # noqa: E402
from tcmcodec.weights import init_weights  # noqa: E402

# Narrow networks keep a 64x64 frame well under a second
SMALL = dict(
    dpb_channels=8,
    context_channels=8,
    hidden_channels=8,
    latent_channels=8,
    hyper_channels=8,
    mv_latent_channels=8,
    mv_hyper_channels=8,
    generator_blocks=1,
)


def small_config(**overrides) -> CodecConfig:
    values = dict(SMALL)
    values.update(overrides)
    return CodecConfig(**values).validate()


def make_video(frames: int = 4, height: int = 64, width: int = 64, channels: int = 3,
               seed: int = 0, step: tuple = (1, 2)) -> np.ndarray:
    """Smooth textured content drifting by `step` pixels per frame, 8-bit levels."""
    rng = np.random.default_rng(seed)
    big_h, big_w = height + frames * abs(step[0]) + 8, width + frames * abs(step[1]) + 8
    yy, xx = np.meshgrid(np.arange(big_h), np.arange(big_w), indexing="ij")
    canvas = np.zeros((channels, big_h, big_w))
    for c in range(channels):
        for _ in range(4):
            fy, fx = rng.uniform(0.02, 0.2, 2)
            phase = rng.uniform(0, 2 * np.pi)
            canvas[c] += np.sin(fy * yy + fx * xx + phase)
    canvas = (canvas - canvas.min()) / (canvas.max() - canvas.min())
    canvas += rng.normal(0, 0.02, canvas.shape)
    out = []
    for t in range(frames):
        y0 = 4 + t * step[0] if step[0] >= 0 else big_h - height - 4 + t * step[0]
        x0 = 4 + t * step[1] if step[1] >= 0 else big_w - width - 4 + t * step[1]
        out.append(canvas[:, y0:y0 + height, x0:x0 + width])
    frames_u8 = np.clip(np.round(np.stack(out) * 255), 0, 255).astype(np.uint8)
    return frames_u8.astype(np.float32) / np.float32(255)


def write_video(path, frames: np.ndarray):
    np.clip(np.floor(frames * 255 + 0.5), 0, 255).astype(np.uint8).tofile(str(path))


@pytest.fixture(autouse=True)
def isolated_home(tmp_path, monkeypatch):
    """Keep settings, activity and crash logs out of the real home directory."""
    home = tmp_path / "home"
    monkeypatch.setenv("TCMCODEC_HOME", str(home))
    monkeypatch.setattr(config_module, "CONFIG_DIR", str(home))
    monkeypatch.setattr(config_module, "CONFIG_FILE", str(home / "config.json"))
    monkeypatch.setattr(config_module, "LOG_FILE", str(home / "activity.log"))
    monkeypatch.setattr(config_module, "CRASH_LOG_FILE", str(home / "crash.log"))
    return home


@pytest.fixture
def small_cfg() -> CodecConfig:
    return small_config()


@pytest.fixture(scope="session")
def small_weights():
    return init_weights(1, small_config())


@pytest.fixture
def video():
    return make_video()
