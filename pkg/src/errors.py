"""Exception hierarchy shared by every chunkstream module."""

from __future__ import annotations


class ChunkstreamError(Exception):
    """Base class for all chunkstream errors."""


class ConfigError(ChunkstreamError, ValueError):
    """An engine config, strategy spec, bench plan or pipe spec is invalid."""


class DecodeError(ChunkstreamError, ValueError):
    """A byte sequence could not be decoded."""


class TruncatedError(DecodeError):
    """The input ended before the encoded length."""


class VersionMismatchError(DecodeError):
    """The input carries a version tag this build does not understand."""


class PayloadSizeError(ChunkstreamError, ValueError):
    """A payload length does not match ``volume(region) * elem width``."""


class ChunkValidationError(ChunkstreamError, ValueError):
    """A chunk references an unknown dataset or lies outside its extent."""


class StepStateError(ChunkstreamError, RuntimeError):
    """A step API call was made outside its begin/end bracket."""


class UnavailableRegionError(ChunkstreamError, LookupError):
    """A requested region is not fully covered by written chunks."""


class CorruptContainerError(ChunkstreamError, ValueError):
    """A container file has a bad header, footer or checksum."""


class RendezvousTimeoutError(ChunkstreamError, TimeoutError):
    """The contact document or container did not appear in time."""


class ConnectionLostError(ChunkstreamError, ConnectionError):
    """A peer disappeared without sending CLOSE."""


class BindError(ChunkstreamError, OSError):
    """No port in the configured range could be bound."""
