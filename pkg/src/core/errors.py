#!/usr/bin/env python3
"""
Error types for ScaRR

All failures raised by the toolchain derive from ScarrError so callers can
catch one base class. Verification outcomes are not errors; see
verifier_engine.Violation.
"""

from typing import Optional


class ScarrError(Exception):
    """Base class for every error raised by the toolchain."""


class ParseError(ScarrError):
    """A document or file could not be parsed."""

    def __init__(self, message: str, line: Optional[int] = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ValidationError(ScarrError):
    """A parsed model violates a structural invariant."""


class EnumerationLimitError(ValidationError):
    """Path enumeration exceeded its step limit."""


class FormatError(ScarrError):
    """A measurements DB stream is malformed."""


class ConsistencyError(ScarrError):
    """Measurements disagree with each other (collision or generator bug)."""


class ConfigError(ScarrError):
    """Invalid configuration value or missing secret."""


class ProtocolError(ScarrError):
    """A trace event violates the prover protocol."""

    def __init__(self, message: str, position: Optional[int] = None):
        if position is not None:
            message = f"event {position}: {message}"
        super().__init__(message)
        self.position = position


class EmptyBatchError(ScarrError):
    """Sealing was requested with no pending measurements."""


class FrameError(ScarrError):
    """A wire frame has a bad header or length."""


class CodecError(ScarrError):
    """A frame payload failed to decompress."""


class SpecError(ScarrError):
    """An attack specification does not fit its target."""


class WalkError(ScarrError):
    """A random walk got stuck or ran past its step limit."""
