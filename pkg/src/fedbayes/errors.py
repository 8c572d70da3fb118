"""Exception types shared across the library."""
from __future__ import annotations


class FormatError(ValueError):
    """A data file does not match its declared binary format."""


class ConfigurationError(ValueError):
    """An experiment configuration is invalid or infeasible."""


class ProtocolError(RuntimeError):
    """Client/server exchange violated the round protocol."""


class UsageError(Exception):
    """Bad command-line invocation (unknown key or subcommand)."""
