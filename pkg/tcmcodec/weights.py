"""
Layer blueprint and weight-file persistence.

The blueprint maps every layer name to its shape and behavior for a given
CodecConfig. It is the single source of truth: init_weights fills it, the
loader checks files against it, and the network modules look layers up by name.

File layout (little-endian):
    magic "TCMW" | version u8 | header length u32 | JSON header | float32 data
The JSON header holds the CodecConfig, the generation seed and the ordered
(name, shape) list; tensor data follows in that order.
"""

import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from .config import CodecConfig, atomic_write_bytes
from .errors import ConfigurationError, FormatError
from .kernels import BottleneckBlockSpec, ConvSpec, ResidualBlockSpec

logger = logging.getLogger("tcmcodec.weights")

WEIGHT_MAGIC = b"TCMW"
WEIGHT_VERSION = 1
_PREAMBLE = struct.Struct("<4sBI")

# Stride-2 stages of the latent paths; latents live at 1/16, hyper latents at 1/64
CODER_STAGES = 4
PRIOR_SCALE_RANGE = (0.5, 4.0)


@dataclass(frozen=True)
class LayerDef:
    in_channels: int
    out_channels: int
    kernel_size: int = 3
    stride: int = 1
    activation: str = "leaky"


def _residual(layers: dict, prefix: str, channels: int):
    layers[f"{prefix}.conv1"] = LayerDef(channels, channels)
    layers[f"{prefix}.conv2"] = LayerDef(channels, channels, activation="none")


def _hyper_coder(layers: dict, prefix: str, in_ch: int, hidden: int, latent: int,
                 hyper: int, out_ch: int):
    """Hyper-prior autoencoder: analysis, hyper analysis, hyper synthesis and
    synthesis. Used by the motion and intra paths."""
    chain = [in_ch] + [hidden] * (CODER_STAGES - 1) + [latent]
    for i in range(CODER_STAGES):
        act = "none" if i == CODER_STAGES - 1 else "leaky"
        layers[f"{prefix}.enc.{i}"] = LayerDef(chain[i], chain[i + 1], stride=2, activation=act)

    layers[f"{prefix}.henc.0"] = LayerDef(latent, hyper)
    layers[f"{prefix}.henc.1"] = LayerDef(hyper, hyper, stride=2)
    layers[f"{prefix}.henc.2"] = LayerDef(hyper, hyper, stride=2, activation="none")

    layers[f"{prefix}.hdec.0"] = LayerDef(hyper, 4 * hyper)
    layers[f"{prefix}.hdec.1"] = LayerDef(hyper, 4 * hyper)
    layers[f"{prefix}.hdec.2"] = LayerDef(hyper, 2 * latent, activation="none")

    chain = [latent] + [hidden] * (CODER_STAGES - 1)
    for i in range(CODER_STAGES - 1):
        layers[f"{prefix}.dec.{i}"] = LayerDef(chain[i], 4 * hidden)
    layers[f"{prefix}.dec.{CODER_STAGES - 1}"] = LayerDef(hidden, 4 * out_ch, activation="none")


def blueprint(config: CodecConfig) -> Dict[str, LayerDef]:
    """Every convolution of the codec, in a stable order."""
    config.validate()
    C = config.frame_channels
    D = config.dpb_channels
    N = config.context_channels
    E = config.hidden_channels
    M = config.latent_channels
    Z = config.hyper_channels
    L = config.tcm_levels
    m = config.tcm_contexts
    layers: Dict[str, LayerDef] = {}

    # ── Motion ──
    _hyper_coder(layers, "mv", 2, E, config.mv_latent_channels, config.mv_hyper_channels, 2)

    # ── Temporal context mining ──
    for l in range(L):
        if l == 0:
            layers["tcm.extract.0.conv"] = LayerDef(D, N)
        else:
            layers[f"tcm.extract.{l}.conv"] = LayerDef(N, N, stride=2)
        for j in range(config.extract_blocks):
            _residual(layers, f"tcm.extract.{l}.res.{j}", N)
    for l in range(L - 1):
        layers[f"tcm.up.{l}.conv"] = LayerDef(N, 4 * N)
        _residual(layers, f"tcm.up.{l}.res", N)
    for l in range(L):
        in_ch = 2 * N if l < L - 1 else N
        layers[f"tcm.refine.{l}.conv"] = LayerDef(in_ch, N)
        for j in range(config.refine_blocks):
            _residual(layers, f"tcm.refine.{l}.res.{j}", N)

    # ── Conditional coding ──
    for k in range(CODER_STAGES):
        prev = C if k == 0 else E
        in_ch = prev + (N if k < m else 0)
        last = k == CODER_STAGES - 1
        layers[f"ctx.enc.{k}"] = LayerDef(in_ch, M if last else E, stride=2,
                                          activation="none" if last else "leaky")
        if not last:
            _residual(layers, f"ctx.enc.{k}.res", E)

    for i in range(CODER_STAGES):
        # up-stage i lifts the grid from scale 4 - i to scale 3 - i
        in_ch = M if i == 0 else E + (N if 4 - i < m else 0)
        layers[f"ctx.dec.{i}"] = LayerDef(in_ch, 4 * E)
        _residual(layers, f"ctx.dec.{i}.res", E)

    G = E + N
    for j in range(config.generator_blocks):
        layers[f"ctx.gen.block.{j}.conv1"] = LayerDef(G, G // 2)
        layers[f"ctx.gen.block.{j}.conv2"] = LayerDef(G // 2, G, activation="none")
    layers["ctx.gen.proj"] = LayerDef(G, D)
    layers["ctx.gen.out"] = LayerDef(D, C, activation="none")

    for k in range(CODER_STAGES):
        in_ch = N if k == 0 else E + (N if k < m else 0)
        last = k == CODER_STAGES - 1
        layers[f"ctx.tenc.{k}"] = LayerDef(in_ch, M if last else E, stride=2,
                                           activation="none" if last else "leaky")

    layers["ctx.henc.0"] = LayerDef(M, Z)
    layers["ctx.henc.1"] = LayerDef(Z, Z, stride=2)
    layers["ctx.henc.2"] = LayerDef(Z, Z, stride=2, activation="none")
    layers["ctx.hdec.0"] = LayerDef(Z, 4 * Z)
    layers["ctx.hdec.1"] = LayerDef(Z, 4 * Z)
    layers["ctx.hdec.2"] = LayerDef(Z, M, activation="none")
    layers["ctx.fuse.0"] = LayerDef(2 * M, 2 * M)
    layers["ctx.fuse.1"] = LayerDef(2 * M, 2 * M, activation="none")

    # ── Intra frames and the I-frame feature extractor ──
    _hyper_coder(layers, "intra", C, E, M, Z, C)
    layers["dpb.extract.0"] = LayerDef(C, D)
    layers["dpb.extract.1"] = LayerDef(D, D, activation="none")
    return layers


def prior_shapes(config: CodecConfig) -> Dict[str, tuple]:
    """Per-channel factorized priors of the three hyper latents."""
    shapes = {}
    for prefix, channels in (("mv", config.mv_hyper_channels),
                             ("ctx", config.hyper_channels),
                             ("intra", config.hyper_channels)):
        shapes[f"{prefix}.hprior.loc"] = (channels,)
        shapes[f"{prefix}.hprior.scale"] = (channels,)
    return shapes


def tensor_shapes(config: CodecConfig) -> Dict[str, tuple]:
    shapes = {}
    for name, layer in blueprint(config).items():
        k = layer.kernel_size
        shapes[f"{name}.weight"] = (layer.out_channels, layer.in_channels, k, k)
        shapes[f"{name}.bias"] = (layer.out_channels,)
    shapes.update(prior_shapes(config))
    return shapes


@dataclass
class WeightFile:
    config: CodecConfig
    tensors: Dict[str, np.ndarray]
    seed: Optional[int] = None
    _layers: Dict[str, LayerDef] = field(default=None, init=False, repr=False)
    _digest: Optional[bytes] = field(default=None, init=False, repr=False)

    def __post_init__(self):
        self._layers = blueprint(self.config)
        expected = tensor_shapes(self.config)
        if set(expected) != set(self.tensors):
            missing = sorted(set(expected) - set(self.tensors))
            extra = sorted(set(self.tensors) - set(expected))
            raise FormatError(
                f"Weight tensors do not match the architecture "
                f"(missing {missing[:3]}, unexpected {extra[:3]})"
            )
        for name, shape in expected.items():
            tensor = np.ascontiguousarray(self.tensors[name], dtype=np.float32)
            if tensor.shape != shape:
                raise FormatError(f"{name}: shape {tensor.shape}, expected {shape}")
            if not np.all(np.isfinite(tensor)):
                raise FormatError(f"{name}: non-finite weights")
            # Weights are shared read-only between coding sessions
            tensor.setflags(write=False)
            self.tensors[name] = tensor

    # ── Lookup ──

    def conv(self, name: str) -> ConvSpec:
        try:
            layer = self._layers[name]
        except KeyError:
            raise ConfigurationError(f"No layer named '{name}'") from None
        return ConvSpec(
            self.tensors[f"{name}.weight"],
            self.tensors[f"{name}.bias"],
            layer.stride,
            layer.activation,
        )

    def has_layer(self, name: str) -> bool:
        return name in self._layers

    def residual(self, prefix: str) -> ResidualBlockSpec:
        return ResidualBlockSpec(self.conv(f"{prefix}.conv1"), self.conv(f"{prefix}.conv2"))

    def bottleneck(self, prefix: str) -> BottleneckBlockSpec:
        return BottleneckBlockSpec(self.conv(f"{prefix}.conv1"), self.conv(f"{prefix}.conv2"))

    def prior(self, prefix: str) -> tuple:
        return self.tensors[f"{prefix}.hprior.loc"], self.tensors[f"{prefix}.hprior.scale"]

    # ── Serialization ──

    def to_bytes(self) -> bytes:
        order = list(tensor_shapes(self.config))
        header = json.dumps(
            {
                "config": self.config.to_dict(),
                "seed": self.seed,
                "tensors": [[name, list(self.tensors[name].shape)] for name in order],
            },
            sort_keys=True,
        ).encode()
        parts = [_PREAMBLE.pack(WEIGHT_MAGIC, WEIGHT_VERSION, len(header)), header]
        for name in order:
            parts.append(self.tensors[name].astype("<f4").tobytes())
        return b"".join(parts)

    @property
    def digest(self) -> bytes:
        """8-byte fingerprint written into every bitstream."""
        if self._digest is None:
            self._digest = hashlib.sha256(self.to_bytes()).digest()[:8]
        return self._digest

    def save(self, path: str):
        atomic_write_bytes(path, self.to_bytes())
        logger.info(f"Saved weights to {path} (digest {self.digest.hex()})")

    @classmethod
    def from_bytes(cls, data: bytes) -> "WeightFile":
        if len(data) < _PREAMBLE.size:
            raise FormatError("Weight file is truncated")
        magic, version, header_len = _PREAMBLE.unpack_from(data, 0)
        if magic != WEIGHT_MAGIC:
            raise FormatError(f"Not a weight file (magic {magic!r})")
        if version != WEIGHT_VERSION:
            raise FormatError(f"Unsupported weight file version {version}")
        offset = _PREAMBLE.size
        try:
            header = json.loads(data[offset:offset + header_len].decode())
            config = CodecConfig.from_dict(header["config"])
            layout = [(name, tuple(shape)) for name, shape in header["tensors"]]
        except (ValueError, KeyError, TypeError) as e:
            raise FormatError(f"Corrupt weight file header: {e}") from None
        offset += header_len

        tensors = {}
        for name, shape in layout:
            count = int(np.prod(shape))
            end = offset + 4 * count
            if end > len(data):
                raise FormatError(f"Weight file truncated inside '{name}'")
            tensors[name] = np.frombuffer(data, dtype="<f4", count=count, offset=offset).reshape(shape)
            offset = end
        if offset != len(data):
            raise FormatError(f"{len(data) - offset} trailing bytes in weight file")
        return cls(config, tensors, header.get("seed"))

    @classmethod
    def load(cls, path: str) -> "WeightFile":
        try:
            with open(path, "rb") as f:
                data = f.read()
        except OSError as e:
            raise ConfigurationError(f"Cannot read weights: {e}") from None
        weights = cls.from_bytes(data)
        logger.debug(f"Loaded weights {path} (digest {weights.digest.hex()})")
        return weights


def init_weights(seed: int, config: CodecConfig) -> WeightFile:
    """Seeded Glorot-uniform initialization; identical seed and config give a
    byte-identical file."""
    config.validate()
    if not isinstance(seed, int) or seed < 0:
        raise ConfigurationError(f"Seed must be a non-negative integer, got {seed!r}")
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, layer in blueprint(config).items():
        k2 = layer.kernel_size ** 2
        limit = np.sqrt(6.0 / (layer.in_channels * k2 + layer.out_channels * k2))
        shape = (layer.out_channels, layer.in_channels, layer.kernel_size, layer.kernel_size)
        tensors[f"{name}.weight"] = rng.uniform(-limit, limit, shape).astype(np.float32)
        tensors[f"{name}.bias"] = np.zeros(layer.out_channels, np.float32)
    for name, shape in prior_shapes(config).items():
        if name.endswith(".loc"):
            tensors[name] = np.zeros(shape, np.float32)
        else:
            tensors[name] = rng.uniform(*PRIOR_SCALE_RANGE, shape).astype(np.float32)
    return WeightFile(config, tensors, seed)
