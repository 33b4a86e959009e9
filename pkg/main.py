#!/usr/bin/env python3
"""
TcmCodec - desk-scale temporal-context-mining conditional video codec.

Usage:
    python3 main.py encode --input clip_64x64.rgb --weights model.tcmw --out clip.tcmc
    python3 main.py --help

Same commands as cli.py, with logging set up and crash hooks installed first.
"""

import sys
import os
import logging
import traceback

# Setup logging (quiet runs only report warnings)
_is_quiet = "--quiet" in sys.argv or "-q" in sys.argv
logging.basicConfig(
    level=logging.WARNING if _is_quiet else logging.INFO,
    format="%(asctime)s [%(name)s] %(levelname)s: %(message)s",
    handlers=[logging.StreamHandler(sys.stderr)],
)


def _crash_handler(exc_type, exc_value, exc_tb):
    """Global exception handler - writes crash log and exits."""
    # Don't intercept KeyboardInterrupt
    if issubclass(exc_type, KeyboardInterrupt):
        sys.__excepthook__(exc_type, exc_value, exc_tb)
        return

    try:
        from tcmcodec.config import write_crash_log

        crash_path = write_crash_log(exc_type, exc_value, exc_tb)
        print(
            f"\n[TCMCODEC] Fatal crash. Log written to: {crash_path}",
            file=sys.stderr,
        )
        traceback.print_exception(exc_type, exc_value, exc_tb, file=sys.stderr)
    except Exception:
        # Absolute last resort
        traceback.print_exception(exc_type, exc_value, exc_tb, file=sys.stderr)
    os._exit(1)


def _thread_crash_handler(args):
    """Uncaught exceptions in worker threads (one coding session per thread)
    are logged; the other sessions keep running."""
    if issubclass(args.exc_type, SystemExit):
        return

    try:
        from tcmcodec.config import append_log, write_crash_log

        crash_path = write_crash_log(args.exc_type, args.exc_value, args.exc_traceback)
        thread_name = args.thread.name if args.thread else "unknown"
        append_log(
            f"[CRASH] Thread '{thread_name}' crashed: {args.exc_type.__name__}: "
            f"{args.exc_value} (logged to {crash_path})"
        )
        print(
            f"\n[TCMCODEC] Thread '{thread_name}' crashed. Log: {crash_path}",
            file=sys.stderr,
        )
    except Exception:
        traceback.print_exception(args.exc_type, args.exc_value, args.exc_traceback, file=sys.stderr)


# Install global exception hooks BEFORE anything else
sys.excepthook = _crash_handler
import threading

threading.excepthook = _thread_crash_handler


if __name__ == "__main__":
    try:
        from cli import main

        sys.exit(main())
    except KeyboardInterrupt:
        print("\n[TCMCODEC] Interrupted by user.", file=sys.stderr)
        sys.exit(130)
    except SystemExit:
        raise
    except Exception:
        _crash_handler(*sys.exc_info())
        sys.exit(1)
