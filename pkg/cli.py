#!/usr/bin/env python3
"""
TcmCodec CLI - encode, decode and evaluate raw videos from the terminal.

Usage:
    python3 cli.py init-weights --seed 1 --lambda 256 --out model.tcmw
    python3 cli.py encode --input clip_64x64.rgb --weights model.tcmw --out clip.tcmc
    python3 cli.py decode --input clip.tcmc --weights model.tcmw --out clip_dec_64x64.rgb
    python3 cli.py eval --orig clip_64x64.rgb --recon clip_dec_64x64.rgb
    python3 cli.py compare --test ours.csv --anchor anchor.csv

Exit codes: 0 success, 2 usage/configuration, 3 format/digest, 4 decode/CRC,
1 unexpected crash (see the crash log).
"""

import argparse
import datetime
import logging
import sys
from dataclasses import asdict, fields

from tcmcodec.config import (
    CRASH_LOG_FILE,
    DISTORTION_MS_SSIM,
    DISTORTION_MSE,
    CodecSettings,
    append_log,
    load_settings,
    read_log,
    save_settings,
    write_crash_log,
)
from tcmcodec.errors import CodecError
from tcmcodec.metrics import format_ms_ssim
from tcmcodec.motion import MotionSearch


# ── ANSI colors ──
RESET = "\033[0m"
BOLD = "\033[1m"
DIM = "\033[2m"
RED = "\033[31m"
GREEN = "\033[32m"
YELLOW = "\033[33m"
BLUE = "\033[34m"
CYAN = "\033[36m"
WHITE = "\033[37m"

REFILL_TARGETS = ("encoder", "decoder", "generator", "entropy")


def ts():
    """Timestamp string."""
    return datetime.datetime.now().strftime("%H:%M:%S")


def log(msg, color=WHITE):
    """Print a timestamped log line."""
    print(f"{DIM}{ts()}{RESET} {color}{msg}{RESET}")


def format_db(value):
    return "inf" if value in ("inf", float("inf")) else f"{value:.2f} dB"


def print_frame(index, info):
    kind = info.get("frame_type", "?")
    color = CYAN if kind == "I" else BLUE
    line = f"  {color}{kind}{RESET} frame {index:>4}  {info.get('bits', 0):>9} bits"
    if "psnr" in info:
        line += f"  {DIM}|{RESET} PSNR {format_db(info['psnr'])}  MS-SSIM {format_ms_ssim(info['ms_ssim'])}"
    print(line)


# ── Commands ──


def cmd_init_weights(args):
    from tcmcodec.engine import run_init_weights

    overrides = {
        "frame_channels": args.frame_channels,
        "context_channels": args.context_channels,
        "hidden_channels": args.hidden_channels,
        "latent_channels": args.latent_channels,
        "hyper_channels": args.hyper_channels,
        "mv_latent_channels": args.mv_channels,
        "mv_hyper_channels": args.mv_channels,
        "extract_blocks": args.extract_blocks,
        "refine_blocks": args.refine_blocks,
        "generator_blocks": args.generator_blocks,
    }
    overrides = {k: v for k, v in overrides.items() if v is not None}
    if args.no_propagate:
        overrides["propagate_feature"] = False
    for target in args.no_refill or []:
        overrides[f"refill_{target}"] = False

    weights = run_init_weights(
        args.seed, args.out, args.lmbda, args.distortion, args.levels, args.contexts,
        args.dpb_channels, **overrides,
    )
    config = weights.config
    log(
        f"Wrote {args.out}: {config.tcm_levels}L{config.tcm_contexts}C, "
        f"dpb={config.dpb_channels}, lambda={config.lmbda} ({config.distortion})",
        GREEN,
    )
    log(f"Digest {weights.digest.hex()}", DIM)
    return 0


def cmd_encode(args):
    from tcmcodec.engine import run_encode

    settings = load_settings()
    search = MotionSearch(
        args.search_radius if args.search_radius is not None else settings.search_radius,
        args.block or settings.block,
        args.pyramid_levels or settings.pyramid_levels,
    )
    log(f"Encoding {args.input}", YELLOW)
    report = run_encode(
        args.input, args.weights, args.out, args.report,
        intra_period=args.intra_period, frames=args.frames, size=args.size,
        channels=args.channels, search=search, settings=settings,
        curve_path=args.curve, on_frame=None if args.quiet else print_frame,
    )
    summary = report["summary"]
    log(
        f"{summary['frames']} frames, {report['bitstream_bytes']} bytes, "
        f"{BOLD}{summary['bpp']:.4f} bpp{RESET}{GREEN}, PSNR {format_db(summary['mean_psnr'])}",
        GREEN,
    )
    return 0


def cmd_decode(args):
    from tcmcodec.engine import run_decode

    log(f"Decoding {args.input}", YELLOW)
    report = run_decode(args.input, args.weights, args.out, args.report,
                        on_frame=None if args.quiet else print_frame)
    log(f"{len(report['frames'])} frames decoded, all checksums verified -> {args.out}", GREEN)
    return 0


def cmd_eval(args):
    from tcmcodec.engine import run_eval

    report = run_eval(args.orig, args.recon, args.report, size=args.size,
                      channels=args.channels, bitstream_path=args.bitstream)
    summary = report["summary"]
    log(f"PSNR    {format_db(summary['mean_psnr'])}", WHITE)
    log(f"MS-SSIM {format_ms_ssim(summary['mean_ms_ssim'], 6)}", WHITE)
    if "bpp" in summary:
        log(f"bpp     {summary['bpp']:.4f}", WHITE)
    return 0


def cmd_compare(args):
    from tcmcodec.engine import run_compare

    report = run_compare(args.test, args.anchor, args.mode, args.report)
    value = report["bd_rate"]
    color = GREEN if value < 0 else RED
    log(f"BD-rate {color}{BOLD}{value:+.2f}%{RESET} ({args.mode})", WHITE)
    print(f"{value:.4f}")
    return 0


def cmd_settings(args):
    settings = load_settings()
    changed = False
    for f in fields(CodecSettings):
        value = getattr(args, f.name, None)
        if value is not None:
            setattr(settings, f.name, value)
            changed = True
    if changed:
        save_settings(settings)
        append_log(f"[SETTINGS] saved {asdict(settings)}")
        log("Settings saved", GREEN)
    for key, value in asdict(settings).items():
        print(f"  {DIM}{key:<16}{RESET} {value}")
    return 0


def cmd_log(args):
    text = read_log()
    lines = text.strip().split("\n") if text.strip() else []
    for line in lines[-args.tail:]:
        color = RED if "failed" in line or "ERROR" in line else DIM
        print(f"  {color}{line}{RESET}")
    return 0


# ── Parser ──


def build_parser():
    parser = argparse.ArgumentParser(
        description="TcmCodec - temporal-context-mining conditional video codec"
    )
    parser.add_argument("--verbose", "-v", action="store_true", help="Debug logging")
    parser.add_argument("--quiet", "-q", action="store_true", help="No per-frame lines")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init-weights", help="Write a seeded random weight file")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--lambda", dest="lmbda", type=int, default=256)
    p.add_argument("--distortion", choices=[DISTORTION_MSE, DISTORTION_MS_SSIM], default=DISTORTION_MSE)
    p.add_argument("--levels", type=int, default=3)
    p.add_argument("--contexts", type=int, default=3)
    p.add_argument("--dpb-channels", type=int, default=64)
    p.add_argument("--frame-channels", type=int, choices=[1, 3])
    p.add_argument("--context-channels", type=int)
    p.add_argument("--hidden-channels", type=int)
    p.add_argument("--latent-channels", type=int)
    p.add_argument("--hyper-channels", type=int)
    p.add_argument("--mv-channels", type=int, help="MV latent and hyper channels")
    p.add_argument("--extract-blocks", type=int)
    p.add_argument("--refine-blocks", type=int)
    p.add_argument("--generator-blocks", type=int)
    p.add_argument("--no-propagate", action="store_true",
                   help="Store a feature extracted from the reconstruction instead")
    p.add_argument("--no-refill", action="append", choices=REFILL_TARGETS,
                   help="Feed zeros instead of temporal contexts to this component")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_init_weights)

    p = sub.add_parser("encode", help="Encode a raw video")
    p.add_argument("--input", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--report")
    p.add_argument("--intra-period", type=int)
    p.add_argument("--frames", type=int)
    p.add_argument("--size", help="WxH (default: from the file name)")
    p.add_argument("--channels", type=int, choices=[1, 3])
    p.add_argument("--search-radius", type=int)
    p.add_argument("--block", type=int)
    p.add_argument("--pyramid-levels", type=int)
    p.add_argument("--curve", help="Append (bpp, quality) to this RD curve CSV")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("decode", help="Decode a bitstream")
    p.add_argument("--input", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--report")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("eval", help="PSNR / MS-SSIM of a reconstruction")
    p.add_argument("--orig", required=True)
    p.add_argument("--recon", required=True)
    p.add_argument("--report")
    p.add_argument("--size")
    p.add_argument("--channels", type=int, choices=[1, 3], default=3)
    p.add_argument("--bitstream", help="Also report bpp of this bitstream")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="BD-rate between two RD curves")
    p.add_argument("--test", required=True)
    p.add_argument("--anchor", required=True)
    p.add_argument("--mode", choices=["cubic", "pchip"], default="cubic")
    p.add_argument("--report")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("settings", help="Show or change saved encoder defaults")
    p.add_argument("--intra-period", dest="intra_period", type=int)
    p.add_argument("--frames", type=int)
    p.add_argument("--search-radius", dest="search_radius", type=int)
    p.add_argument("--block", type=int)
    p.add_argument("--pyramid-levels", dest="pyramid_levels", type=int)
    p.add_argument("--cascade-t", dest="cascade_T", type=int)
    p.set_defaults(func=cmd_settings)

    p = sub.add_parser("log", help="Show the activity log")
    p.add_argument("--tail", type=int, default=40)
    p.set_defaults(func=cmd_log)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.verbose:
        logging.getLogger("tcmcodec").setLevel(logging.DEBUG)

    try:
        return args.func(args)
    except CodecError as e:
        log(f"Error: {e}", RED)
        append_log(f"[{args.command.upper()}] ERROR {type(e).__name__}: {e}")
        return e.exit_code
    except KeyboardInterrupt:
        print()
        log("Interrupted.", YELLOW)
        return 130
    except Exception:
        crash_path = write_crash_log(*sys.exc_info())
        log(f"Fatal error. Crash log written to: {crash_path or CRASH_LOG_FILE}", RED)
        return 1


if __name__ == "__main__":
    logging.basicConfig(
        level=logging.WARNING,
        format="%(asctime)s [%(name)s] %(levelname)s: %(message)s",
        handlers=[logging.StreamHandler(sys.stderr)],
    )
    sys.exit(main())
