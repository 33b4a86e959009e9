"""
Bitstream container.

    header  "<4sBBHHHHBBBB8s"
            magic "TCMC", version, flags, width, height, frame_count,
            intra_period, model index, tcm levels, tcm contexts, dpb channels,
            weight digest
    record  "<BB" frame type, payload count
            per payload "<hhI" s_min, s_max, byte length, then the bytes
            "<I" CRC-32 of the reconstruction

width/height are the source dimensions; bit 0 of flags marks that frames were
padded for coding and must be cropped after decoding.
"""

import logging
import struct
from dataclasses import dataclass, field
from typing import List

from .codec import FrameRecord, FrameType, PAYLOAD_NAMES
from .entropy import CodedStream
from .errors import EncodingError, FormatError

logger = logging.getLogger("tcmcodec.bitstream")

MAGIC = b"TCMC"
VERSION = 1

FLAG_PADDED = 0x01
FLAG_LUMA = 0x02

_HEADER = struct.Struct("<4sBBHHHHBBBB8s")
_RECORD = struct.Struct("<BB")
_PAYLOAD = struct.Struct("<hhI")
_CRC = struct.Struct("<I")

_U8 = 0xFF
_U16 = 0xFFFF


@dataclass
class ContainerHeader:
    width: int
    height: int
    frame_count: int
    intra_period: int
    model_index: int
    tcm_levels: int
    tcm_contexts: int
    dpb_channels: int
    digest: bytes
    flags: int = 0
    version: int = VERSION

    @property
    def padded(self) -> bool:
        return bool(self.flags & FLAG_PADDED)

    @property
    def channels(self) -> int:
        return 1 if self.flags & FLAG_LUMA else 3

    def pack(self) -> bytes:
        for name, limit in (("width", _U16), ("height", _U16), ("frame_count", _U16),
                            ("intra_period", _U16), ("model_index", _U8), ("tcm_levels", _U8),
                            ("tcm_contexts", _U8), ("dpb_channels", _U8), ("flags", _U8)):
            value = getattr(self, name)
            if not 0 <= value <= limit:
                raise EncodingError(f"{name}={value} does not fit its header field")
        if len(self.digest) != 8:
            raise EncodingError("Weight digest must be 8 bytes")
        return _HEADER.pack(
            MAGIC, self.version, self.flags, self.width, self.height, self.frame_count,
            self.intra_period, self.model_index, self.tcm_levels, self.tcm_contexts,
            self.dpb_channels, self.digest,
        )


@dataclass
class Container:
    header: ContainerHeader
    records: List[FrameRecord] = field(default_factory=list)

    @property
    def payload_bits(self) -> int:
        return sum(r.bits_total for r in self.records)


def serialize_record(record: FrameRecord) -> bytes:
    parts = [_RECORD.pack(int(record.frame_type), len(record.payloads))]
    for payload in record.payloads:
        if len(payload.data) > 0xFFFFFFFF:
            raise EncodingError(f"{payload.name}: payload too large")
        try:
            parts.append(_PAYLOAD.pack(payload.s_min, payload.s_max, len(payload.data)))
        except struct.error:
            raise EncodingError(
                f"{payload.name}: symbol range [{payload.s_min}, {payload.s_max}] exceeds 16 bits"
            ) from None
        parts.append(payload.data)
    parts.append(_CRC.pack(record.recon_crc & 0xFFFFFFFF))
    return b"".join(parts)


def serialize(container: Container) -> bytes:
    if len(container.records) != container.header.frame_count:
        raise EncodingError(
            f"Header announces {container.header.frame_count} frames, "
            f"container holds {len(container.records)}"
        )
    return container.header.pack() + b"".join(serialize_record(r) for r in container.records)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def unpack(self, fmt: struct.Struct, what: str):
        if self.pos + fmt.size > len(self.data):
            raise FormatError(f"Bitstream truncated in {what}")
        values = fmt.unpack_from(self.data, self.pos)
        self.pos += fmt.size
        return values

    def take(self, length: int, what: str) -> bytes:
        if self.pos + length > len(self.data):
            raise FormatError(f"Bitstream truncated in {what}")
        chunk = self.data[self.pos:self.pos + length]
        self.pos += length
        return chunk


def parse_header(data: bytes) -> ContainerHeader:
    reader = _Reader(data)
    (magic, version, flags, width, height, frame_count, intra_period,
     model, levels, contexts, dpb, digest) = reader.unpack(_HEADER, "header")
    if magic != MAGIC:
        raise FormatError(f"Not a TCMC bitstream (magic {magic!r})")
    if version != VERSION:
        raise FormatError(f"Unsupported bitstream version {version}")
    if width == 0 or height == 0:
        raise FormatError("Bitstream header has zero frame size")
    return ContainerHeader(width, height, frame_count, intra_period, model, levels,
                           contexts, dpb, digest, flags, version)


def parse(data: bytes) -> Container:
    header = parse_header(data)
    reader = _Reader(data)
    reader.pos = _HEADER.size
    records = []
    for index in range(header.frame_count):
        where = f"frame {index}"
        frame_type, count = reader.unpack(_RECORD, where)
        if frame_type not in (FrameType.I, FrameType.P):
            raise FormatError(f"{where}: unknown frame type {frame_type}")
        names = PAYLOAD_NAMES[FrameType(frame_type)]
        if count != len(names):
            raise FormatError(f"{where}: {count} payloads, expected {len(names)}")
        payloads = []
        for name in names:
            s_min, s_max, length = reader.unpack(_PAYLOAD, f"{where} {name}")
            payloads.append(CodedStream(s_min, s_max, reader.take(length, f"{where} {name}"), name))
        (crc,) = reader.unpack(_CRC, f"{where} checksum")
        records.append(FrameRecord(FrameType(frame_type), payloads, crc))
    if reader.pos != len(data):
        raise FormatError(f"{len(data) - reader.pos} trailing bytes after the last frame")
    logger.debug(f"Parsed {len(records)} frames ({len(data)} bytes)")
    return Container(header, records)
