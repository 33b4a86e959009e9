"""
Configuration management for TcmCodec.

Two kinds of configuration live here:
    CodecConfig   - the network architecture. It is stored inside every weight
                    file, so encoder and decoder always agree on it.
    CodecSettings - user defaults for the encoder (intra period, motion search),
                    persisted to $TCMCODEC_HOME/config.json.

The same directory holds the session activity log and the crash log.
"""

import datetime
import json
import os
import sys
import tempfile
from dataclasses import asdict, dataclass, fields
from typing import Optional

from .errors import ConfigurationError


CONFIG_DIR = os.environ.get("TCMCODEC_HOME") or os.path.expanduser("~/.tcmcodec")
CONFIG_FILE = os.path.join(CONFIG_DIR, "config.json")
LOG_FILE = os.path.join(CONFIG_DIR, "activity.log")
CRASH_LOG_FILE = os.path.join(CONFIG_DIR, "crash.log")

APP_VERSION = "1.0.0"

# Frames are padded to a multiple of this: latent stride 16 times the
# deepest hyper stride 4.
PAD_MULTIPLE = 64

DISTORTION_MSE = "mse"
DISTORTION_MS_SSIM = "ms-ssim"

# Container model index -> (distortion family, lambda). The first eight are the
# regular rate points, the last four the wider-range models.
MODEL_TABLE = (
    (DISTORTION_MSE, 256),
    (DISTORTION_MSE, 512),
    (DISTORTION_MSE, 1024),
    (DISTORTION_MSE, 2048),
    (DISTORTION_MS_SSIM, 8),
    (DISTORTION_MS_SSIM, 16),
    (DISTORTION_MS_SSIM, 32),
    (DISTORTION_MS_SSIM, 64),
    (DISTORTION_MSE, 128),
    (DISTORTION_MSE, 4096),
    (DISTORTION_MS_SSIM, 4),
    (DISTORTION_MS_SSIM, 128),
)

# Lambda at which the quantization gain is 1 for each distortion family
BASE_LAMBDA = {DISTORTION_MSE: 256, DISTORTION_MS_SSIM: 8}

DPB_CHANNEL_CHOICES = (64, 48, 15, 9)
MAX_TCM_LEVELS = 4


def model_index(distortion: str, lmbda: int) -> int:
    try:
        return MODEL_TABLE.index((distortion, int(lmbda)))
    except ValueError:
        raise ConfigurationError(
            f"No {distortion} model for lambda={lmbda}; "
            f"choose one of {[l for d, l in MODEL_TABLE if d == distortion]}"
        ) from None


def model_from_index(index: int) -> tuple:
    if not 0 <= index < len(MODEL_TABLE):
        raise ConfigurationError(f"Unknown model index {index}")
    return MODEL_TABLE[index]


@dataclass(frozen=True)
class CodecConfig:
    # Input
    frame_channels: int = 3  # 3 = RGB, 1 = luma

    # Rate point
    lmbda: int = 256
    distortion: str = DISTORTION_MSE

    # Temporal context mining (nLmC)
    tcm_levels: int = 3
    tcm_contexts: int = 3
    dpb_channels: int = 64
    context_channels: int = 64

    # Network widths
    hidden_channels: int = 64
    latent_channels: int = 96
    hyper_channels: int = 64
    mv_latent_channels: int = 64
    mv_hyper_channels: int = 64

    # Depth knobs used by the added-complexity ablations
    extract_blocks: int = 1
    refine_blocks: int = 1
    generator_blocks: int = 2

    # Feature propagation and context re-filling switches
    propagate_feature: bool = True
    refill_encoder: bool = True
    refill_decoder: bool = True
    refill_generator: bool = True
    refill_entropy: bool = True

    @property
    def model_index(self) -> int:
        return model_index(self.distortion, self.lmbda)

    @property
    def quant_gain(self) -> float:
        return (self.lmbda / BASE_LAMBDA[self.distortion]) ** 0.5

    def validate(self) -> "CodecConfig":
        if self.frame_channels not in (1, 3):
            raise ConfigurationError(
                f"frame_channels must be 1 or 3, got {self.frame_channels}"
            )
        if self.distortion not in BASE_LAMBDA:
            raise ConfigurationError(f"Unknown distortion '{self.distortion}'")
        model_index(self.distortion, self.lmbda)
        if not 1 <= self.tcm_levels <= MAX_TCM_LEVELS:
            raise ConfigurationError(
                f"tcm_levels must be in 1..{MAX_TCM_LEVELS}, got {self.tcm_levels}"
            )
        if not 1 <= self.tcm_contexts <= self.tcm_levels:
            raise ConfigurationError(
                f"tcm_contexts must be in 1..{self.tcm_levels}, "
                f"got {self.tcm_contexts}"
            )
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name.endswith("_channels") and (
                not isinstance(value, int) or value < 1
            ):
                raise ConfigurationError(f"{f.name} must be a positive integer")
        if self.dpb_channels > 255:
            raise ConfigurationError("dpb_channels must fit in one byte")
        if self.extract_blocks < 1 or self.refine_blocks < 1:
            raise ConfigurationError("extract/refine need at least one residual block")
        if self.generator_blocks < 0:
            raise ConfigurationError("generator_blocks must be >= 0")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "CodecConfig":
        valid_fields = {f.name for f in fields(cls)}
        unknown = set(data) - valid_fields
        if unknown:
            raise ConfigurationError(f"Unknown config keys: {sorted(unknown)}")
        return cls(**data).validate()


@dataclass
class CodecSettings:
    # Group of pictures
    intra_period: int = 32
    frames: int = 96

    # Motion search (encoder only, never written to the bitstream)
    search_radius: int = 4
    block: int = 8
    pyramid_levels: int = 3

    # Sequential loss window
    cascade_T: int = 4


def ensure_config_dir():
    os.makedirs(CONFIG_DIR, exist_ok=True)


def load_settings() -> CodecSettings:
    if os.path.exists(CONFIG_FILE):
        try:
            with open(CONFIG_FILE, "r") as f:
                data = json.load(f)

            # Remove any keys not in CodecSettings fields to avoid __init__ errors
            valid_fields = {f.name for f in fields(CodecSettings)}
            data = {k: v for k, v in data.items() if k in valid_fields}

            settings = CodecSettings(**data)

            # Clamp values that would make the encoder refuse to run
            defaults = CodecSettings()
            for name in ("intra_period", "frames", "block", "pyramid_levels", "cascade_T"):
                if not isinstance(getattr(settings, name), int) or getattr(settings, name) < 1:
                    setattr(settings, name, getattr(defaults, name))
            if not isinstance(settings.search_radius, int) or settings.search_radius < 0:
                settings.search_radius = defaults.search_radius

            return settings
        except Exception as e:
            # append_log writes into the same directory; report on stderr instead
            print(
                f"[TcmCodec] Failed to load settings, using defaults: {e}",
                file=sys.stderr,
            )
    return CodecSettings()


def atomic_write_bytes(filepath: str, payload: bytes):
    """Write a file atomically: write to temp file then rename."""
    dir_name = os.path.dirname(os.path.abspath(filepath))
    os.makedirs(dir_name, exist_ok=True)
    tmp_path = None
    try:
        fd, tmp_path = tempfile.mkstemp(dir=dir_name, suffix=".tmp")
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp_path, filepath)
    except Exception:
        # Clean up temp file on failure
        if tmp_path is not None:
            try:
                os.unlink(tmp_path)
            except Exception:
                pass
        raise


def atomic_write_json(filepath: str, data):
    atomic_write_bytes(filepath, (json.dumps(data, indent=2) + "\n").encode())


def save_settings(settings: CodecSettings):
    ensure_config_dir()
    atomic_write_json(CONFIG_FILE, asdict(settings))


def append_log(message: str):
    try:
        ensure_config_dir()
        timestamp = datetime.datetime.now().strftime("%Y-%m-%d %H:%M:%S")
        with open(LOG_FILE, "a") as f:
            f.write(f"[{timestamp}] {message}\n")
    except Exception:
        pass  # Never crash a coding session on log I/O failure


def read_log() -> str:
    try:
        if os.path.exists(LOG_FILE):
            with open(LOG_FILE, "r") as f:
                return f.read()
    except Exception:
        pass
    return ""


def write_crash_log(exc_type, exc_value, exc_tb) -> Optional[str]:
    """Write a crash report to $TCMCODEC_HOME/crash.log and return the path.
    Designed to be as safe as possible - no dependencies on the rest of the
    package."""
    import platform
    import traceback

    try:
        ensure_config_dir()
    except Exception:
        pass

    try:
        timestamp = datetime.datetime.now().strftime("%Y-%m-%d %H:%M:%S")
        tb_text = "".join(traceback.format_exception(exc_type, exc_value, exc_tb))

        report = (
            f"{'=' * 72}\n"
            f"TCMCODEC CRASH REPORT\n"
            f"{'=' * 72}\n"
            f"Time:     {timestamp}\n"
            f"Version:  {APP_VERSION}\n"
            f"Python:   {platform.python_version()}\n"
            f"Platform: {platform.platform()}\n"
            f"Arch:     {platform.machine()}\n"
            f"{'=' * 72}\n"
            f"\n{tb_text}\n"
        )

        with open(CRASH_LOG_FILE, "a") as f:
            f.write(report)

        return CRASH_LOG_FILE
    except Exception:
        # Last resort: try the temp directory
        try:
            fallback = os.path.join(tempfile.gettempdir(), "tcmcodec_crash.log")
            with open(fallback, "a") as f:
                f.write(f"[{datetime.datetime.now()}] {exc_type}: {exc_value}\n")
            return fallback
        except Exception:
            return None
