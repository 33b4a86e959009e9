"""
Coding sessions and the operations behind the command line.

A CodingSession codes one video. Frames are strictly sequential (every P frame
reads the decoded picture buffer the previous frame wrote), so a session is
used from one thread; separate videos get separate sessions and may share one
read-only WeightFile. Status updates go through _set_status(), which is lock
protected so a monitoring thread can read them while coding runs.
"""

import json
import logging
import os
import threading
import time
from typing import Callable, List, Optional

import numpy as np

from .bitstream import FLAG_LUMA, FLAG_PADDED, Container, ContainerHeader, parse, serialize
from .codec import (
    FrameType,
    RdConfig,
    decode_inter_frame,
    decode_intra_frame,
    dpb_update,
    encode_inter_frame,
    encode_intra_frame,
)
from .config import (
    APP_VERSION,
    CodecConfig,
    CodecSettings,
    append_log,
    atomic_write_bytes,
    atomic_write_json,
    load_settings,
)
from .context import DecodedPictureBuffer
from .entropy import EntropySession
from .errors import ConfigurationError, DecodeError, DigestMismatchError, EvaluationError, FormatError
from .metrics import (
    RdCurve,
    RdReport,
    bd_rate,
    bpp,
    format_ms_ssim,
    frame_stats,
    json_number,
    mean_or_none,
    optional_ms_ssim,
    psnr,
)
from .motion import MotionSearch
from .video import RawVideo, crop_frame, infer_size, pad_frame, padded_size, parse_size
from .weights import WeightFile, init_weights

logger = logging.getLogger("tcmcodec.engine")

REPORT_SCHEMA = "tcmcodec.report"
REPORT_VERSION = 1


def is_intra(index: int, intra_period: int) -> bool:
    return index % intra_period == 0


def frame_schedule(count: int, intra_period: int) -> List[str]:
    if intra_period < 1:
        raise ConfigurationError(f"intra_period must be positive, got {intra_period}")
    return ["I" if is_intra(i, intra_period) else "P" for i in range(count)]


class CodingSession:
    """Encoder or decoder state for one video: the single-entry decoded
    picture buffer and an entropy session."""

    def __init__(self, weights: WeightFile, on_frame: Optional[Callable[[int, dict], None]] = None):
        self.weights = weights
        self.dpb = DecodedPictureBuffer(weights.config.dpb_channels)
        self.entropy = EntropySession()
        self.on_frame = on_frame
        self.frames_done = 0

        self._status: str = "Idle"
        self._status_lock = threading.Lock()

    @property
    def status(self) -> str:
        with self._status_lock:
            return self._status

    def _set_status(self, status: str):
        with self._status_lock:
            self._status = status

    def _notify(self, index: int, info: dict):
        self.frames_done = index + 1
        if self.on_frame is not None:
            try:
                self.on_frame(index, info)
            except Exception as e:
                logger.debug(f"Frame callback failed: {e}")

    # ── Encoding ──

    def encode(self, video: RawVideo, intra_period: int, search: MotionSearch,
               rd: RdConfig) -> tuple:
        """Returns (Container, RdReport, reconstructions cropped to source size)."""
        config = self.weights.config
        if video.channels != config.frame_channels:
            raise ConfigurationError(
                f"Video has {video.channels} channels, weights were built for {config.frame_channels}"
            )
        schedule = frame_schedule(video.frame_count, intra_period)
        padded_w, padded_h = padded_size(video.width, video.height)
        flags = 0
        if (padded_w, padded_h) != (video.width, video.height):
            flags |= FLAG_PADDED
        if video.channels == 1:
            flags |= FLAG_LUMA
        header = ContainerHeader(
            width=video.width,
            height=video.height,
            frame_count=video.frame_count,
            intra_period=intra_period,
            model_index=config.model_index,
            tcm_levels=config.tcm_levels,
            tcm_contexts=config.tcm_contexts,
            dpb_channels=config.dpb_channels,
            digest=self.weights.digest,
            flags=flags,
        )
        report = RdReport(video.width, video.height, rd.lmbda, rd.distortion, rd.cascade_T)
        records, recons = [], []

        for index, (frame, kind) in enumerate(zip(video, schedule)):
            self._set_status(f"Encoding frame {index + 1}/{video.frame_count} ({kind})")
            padded = pad_frame(frame)
            if kind == "I":
                encoded = encode_intra_frame(padded, self.weights, rd, self.entropy, index)
            else:
                encoded = encode_inter_frame(padded, self.dpb.entry, self.weights, rd,
                                             self.entropy, search, index)
            dpb_update(self.dpb, encoded.recon, encoded.feature, self.weights)

            recon = crop_frame(encoded.recon, video.width, video.height)
            record = encoded.record
            stats = frame_stats(index, kind, frame, recon, record.mv_bits,
                                record.bits_total - record.mv_bits, rd.lmbda, rd.distortion,
                                coded_pair=(padded, encoded.recon))
            report.frames.append(stats)
            records.append(record)
            recons.append(recon)
            self._notify(index, stats.to_dict())

        self._set_status("Done")
        return Container(header, records), report, np.stack(recons)

    # ── Decoding ──

    def decode(self, container: Container) -> List[np.ndarray]:
        header = container.header
        check_stream_matches_weights(header, self.weights)
        padded_w, padded_h = padded_size(header.width, header.height)
        recons = []
        for index, record in enumerate(container.records):
            self._set_status(f"Decoding frame {index + 1}/{header.frame_count}")
            try:
                recon, feature = self._decode_frame(record, padded_h, padded_w, index)
            except DecodeError as e:
                if e.frame_index is not None:
                    raise
                raise type(e)(str(e), frame_index=index) from e
            dpb_update(self.dpb, recon, feature, self.weights)
            recons.append(crop_frame(recon, header.width, header.height))
            self._notify(index, {"index": index, "frame_type": record.frame_type.name,
                                 "bits": record.bits_total})
        self._set_status("Done")
        return recons

    def _decode_frame(self, record, height: int, width: int, index: int) -> tuple:
        if record.frame_type == FrameType.I:
            recon = decode_intra_frame(record, self.weights, self.entropy, height, width, index)
            return recon, None
        if len(self.dpb) == 0:
            raise DecodeError("P frame without a reference frame", frame_index=index)
        return decode_inter_frame(record, self.dpb.entry, self.weights, self.entropy, index)


def check_stream_matches_weights(header: ContainerHeader, weights: WeightFile):
    """Reject a bitstream before decoding anything if it was coded with other weights."""
    if header.digest != weights.digest:
        raise DigestMismatchError(
            f"Bitstream was coded with weights {header.digest.hex()}, "
            f"got {weights.digest.hex()}"
        )
    config = weights.config
    expected = (config.model_index, config.tcm_levels, config.tcm_contexts,
                config.dpb_channels, config.frame_channels)
    actual = (header.model_index, header.tcm_levels, header.tcm_contexts,
              header.dpb_channels, header.channels)
    if expected != actual:
        raise FormatError(f"Header architecture {actual} does not match weights {expected}")


# ── Reports ──


def _report(command: str, **body) -> dict:
    report = {"schema": REPORT_SCHEMA, "version": REPORT_VERSION, "tcmcodec": APP_VERSION,
              "command": command}
    report.update(body)
    return report


def write_report(path: Optional[str], report: dict):
    if path:
        atomic_write_json(path, report)


def resolve_size(path: str, size: Optional[str]) -> tuple:
    if size:
        return parse_size(size)
    inferred = infer_size(path)
    if inferred is None:
        raise ConfigurationError(f"Cannot tell the frame size of {path}; pass --size WxH")
    return inferred


# ── Operations ──


def run_init_weights(seed: int, out: str, lmbda: int = 256, distortion: str = "mse",
                     levels: int = 3, contexts: int = 3, dpb_channels: int = 64,
                     **overrides) -> WeightFile:
    config = CodecConfig(lmbda=lmbda, distortion=distortion, tcm_levels=levels,
                         tcm_contexts=contexts, dpb_channels=dpb_channels, **overrides).validate()
    weights = init_weights(seed, config)
    weights.save(out)
    append_log(f"[WEIGHTS] seed={seed} {levels}L{contexts}C dpb={dpb_channels} "
               f"lambda={lmbda} ({distortion}) -> {out} digest={weights.digest.hex()}")
    return weights


def run_encode(input_path: str, weights_path: str, out: str, report_path: Optional[str] = None,
               intra_period: Optional[int] = None, frames: Optional[int] = None,
               size: Optional[str] = None, channels: Optional[int] = None,
               search: Optional[MotionSearch] = None, settings: Optional[CodecSettings] = None,
               curve_path: Optional[str] = None,
               on_frame: Optional[Callable[[int, dict], None]] = None) -> dict:
    settings = settings or load_settings()
    intra_period = intra_period or settings.intra_period
    frames = frames or settings.frames
    search = search or MotionSearch(settings.search_radius, settings.block, settings.pyramid_levels)

    weights = WeightFile.load(weights_path)
    width, height = resolve_size(input_path, size)
    video = RawVideo.load(input_path, width, height, channels or weights.config.frame_channels, frames)
    rd = RdConfig.from_codec_config(weights.config, settings.cascade_T)

    append_log(f"[ENCODE] {input_path} {width}x{height} frames={video.frame_count} "
               f"intra_period={intra_period} weights={weights.digest.hex()}")
    started = time.time()
    session = CodingSession(weights, on_frame)
    container, rd_report, _ = session.encode(video, intra_period, search, rd)
    data = serialize(container)
    atomic_write_bytes(out, data)
    elapsed = time.time() - started

    body = rd_report.to_dict()
    body.update({
        "input": input_path,
        "bitstream": out,
        "bitstream_bytes": len(data),
        "intra_period": intra_period,
        "model_index": weights.config.model_index,
        "weights_digest": weights.digest.hex(),
        "seconds": round(elapsed, 3),
    })
    report = _report("encode", **body)
    write_report(report_path, report)

    if curve_path:
        quality = rd_report.mean_psnr if weights.config.distortion == "mse" else rd_report.mean_ms_ssim
        if quality is None:
            logger.warning(f"Frames are too small for MS-SSIM, no curve point written to {curve_path}")
        else:
            append_curve_point(curve_path, rd_report.bpp, quality)

    append_log(f"[ENCODE] done: {len(data)} bytes, {rd_report.bpp:.4f} bpp, "
               f"PSNR {rd_report.mean_psnr:.2f} dB in {elapsed:.1f}s")
    return report


def run_decode(input_path: str, weights_path: str, out: str, report_path: Optional[str] = None,
               on_frame: Optional[Callable[[int, dict], None]] = None) -> dict:
    try:
        with open(input_path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise ConfigurationError(f"Cannot read bitstream: {e}") from None
    container = parse(data)
    weights = WeightFile.load(weights_path)
    check_stream_matches_weights(container.header, weights)

    header = container.header
    append_log(f"[DECODE] {input_path} {header.width}x{header.height} frames={header.frame_count}")
    session = CodingSession(weights, on_frame)
    try:
        recons = session.decode(container)
    except DecodeError as e:
        append_log(f"[DECODE] failed: {e}")
        raise

    video = RawVideo(header.width, header.height, header.channels, np.stack(recons))
    video.save(out)
    frames_info = [
        {"index": i, "frame_type": r.frame_type.name, "bits": r.bits_total,
         "crc": f"{r.recon_crc:08x}"}
        for i, r in enumerate(container.records)
    ]
    report = _report(
        "decode",
        bitstream=input_path,
        output=out,
        width=header.width,
        height=header.height,
        frames=frames_info,
        crc_verified=True,
        bpp=bpp(container.payload_bits, header.width, header.height, max(header.frame_count, 1)),
        weights_digest=weights.digest.hex(),
    )
    write_report(report_path, report)
    append_log(f"[DECODE] done: {len(recons)} frames -> {out}")
    return report


def run_eval(orig_path: str, recon_path: str, report_path: Optional[str] = None,
             size: Optional[str] = None, channels: int = 3,
             bitstream_path: Optional[str] = None) -> dict:
    width, height = resolve_size(orig_path, size)
    original = RawVideo.load(orig_path, width, height, channels)
    recon = RawVideo.load(recon_path, width, height, channels)
    if original.frame_count != recon.frame_count:
        raise EvaluationError(
            f"Frame counts differ: {original.frame_count} vs {recon.frame_count}"
        )
    rows = []
    for index, (a, b) in enumerate(zip(original, recon)):
        rows.append({"index": index, "psnr": psnr(a, b), "ms_ssim": optional_ms_ssim(a, b)})

    summary = {
        "frames": len(rows),
        "mean_psnr": json_number(float(np.mean([r["psnr"] for r in rows]))),
        "mean_ms_ssim": mean_or_none(r["ms_ssim"] for r in rows),
    }
    if bitstream_path:
        with open(bitstream_path, "rb") as f:
            container = parse(f.read())
        summary["bpp"] = bpp(container.payload_bits, width, height, len(rows))

    for row in rows:
        row["psnr"] = json_number(row["psnr"])
    report = _report("eval", original=orig_path, reconstruction=recon_path,
                     width=width, height=height, summary=summary, frames=rows)
    write_report(report_path, report)
    append_log(f"[EVAL] {recon_path}: PSNR {summary['mean_psnr']} "
               f"MS-SSIM {format_ms_ssim(summary['mean_ms_ssim'])}")
    return report


def run_compare(test_path: str, anchor_path: str, mode: str = "cubic",
                report_path: Optional[str] = None) -> dict:
    test = RdCurve.load_csv(test_path)
    anchor = RdCurve.load_csv(anchor_path)
    value = bd_rate(test, anchor, mode)
    report = _report("compare", test=test_path, anchor=anchor_path, mode=mode, bd_rate=value)
    write_report(report_path, report)
    append_log(f"[COMPARE] {test_path} vs {anchor_path}: BD-rate {value:+.2f}% ({mode})")
    return report


def append_curve_point(path: str, rate: float, quality: float):
    """Add one (rate, quality) point to an RD curve CSV, creating it if needed."""
    if os.path.exists(path):
        curve = RdCurve.load_csv(path)
        rates, qualities = curve.rates + [rate], curve.qualities + [quality]
    else:
        rates, qualities = [rate], [quality]
    RdCurve(rates, qualities).save_csv(path)


def load_report(path: str) -> dict:
    with open(path) as f:
        return json.load(f)
