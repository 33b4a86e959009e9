"""
Exception hierarchy for TcmCodec.

Every error raised on purpose by the codec derives from CodecError and carries
the process exit code the CLI reports for it:
    2  usage / configuration / evaluation input
    3  container format or weight digest
    4  entropy decode or reconstruction checksum
"""

from typing import Optional


class CodecError(Exception):
    exit_code = 1


class ConfigurationError(CodecError, ValueError):
    """Shapes, channel counts or settings that cannot work together."""

    exit_code = 2


class NumericError(CodecError, ArithmeticError):
    """A kernel produced or received NaN/Inf."""


class EncodingError(CodecError):
    """Symbols or ranges the encoder cannot represent."""


class EvaluationError(CodecError, ValueError):
    exit_code = 2


class FormatError(CodecError):
    exit_code = 3


class DigestMismatchError(FormatError):
    pass


class DecodeError(CodecError):
    exit_code = 4

    def __init__(self, message: str, frame_index: Optional[int] = None):
        if frame_index is not None:
            message = f"frame {frame_index}: {message}"
        super().__init__(message)
        self.frame_index = frame_index


class ChecksumError(DecodeError):
    pass
