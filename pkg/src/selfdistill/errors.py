"""Exception hierarchy shared across the toolkit.

The CLI maps these onto exit codes: usage errors exit 1, data/validation
errors exit 2, plugin/protocol errors exit 3.
"""

from __future__ import annotations


class SelfDistillError(Exception):
    """Base class for all errors raised by this package."""


class SchemaError(SelfDistillError):
    """A file or record violates the documented JSON schema or a type invariant."""


class ReferentialError(SelfDistillError):
    """A record references an image_id or dataset that does not exist."""


class ContractViolationError(SelfDistillError):
    """An operation was called with arguments outside its stated preconditions."""


class InfeasibleConfigError(SelfDistillError):
    """A configuration is internally inconsistent (e.g. face larger than image)."""


class StateError(SelfDistillError):
    """Pipeline state on disk is corrupt, incomplete, or mismatches its config digest."""


class ProtocolError(SelfDistillError):
    """The plugin wire protocol was violated (bad frame, wrong id, oversize, ...)."""

    def __init__(self, message: str, kind: str = "protocol"):
        super().__init__(message)
        self.kind = kind


class ProtocolTimeoutError(ProtocolError):
    """The plugin did not respond within the watchdog timeout."""

    def __init__(self, message: str):
        super().__init__(message, kind="timeout")


class VersionMismatchError(ProtocolError):
    """The plugin advertised an unsupported protocol version."""

    def __init__(self, message: str):
        super().__init__(message, kind="version")


class PluginError(SelfDistillError):
    """The plugin answered with an error status or produced unusable output."""
