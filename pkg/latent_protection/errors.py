"""Exception hierarchy shared by every latent_protection subpackage."""

from __future__ import annotations

from typing import Any


class LatentProtectionError(Exception):
    """Base class for errors raised by latent_protection."""


class ConfigError(LatentProtectionError, ValueError):
    """Raised when an experiment config or CLI flag is invalid."""


class ShapeMismatchError(LatentProtectionError, ValueError):
    """Raised when tensor shapes violate an image/latent/backend contract."""


class TimestepOutOfRange(LatentProtectionError, ValueError):
    """Raised when a timestep falls outside [0, T-1]."""


class ScheduleError(LatentProtectionError, ValueError):
    """Raised for invalid noise schedule parameters."""


class MissingTargetError(LatentProtectionError, ValueError):
    """Raised when a targeted objective has no target latent."""


class NonFiniteLossError(LatentProtectionError, FloatingPointError):
    """Raised when a loss or objective becomes NaN/inf; carries a diagnostic payload."""

    def __init__(self, message: str, *, step: int | None = None, diagnostics: dict[str, Any] | None = None):
        super().__init__(message)
        self.step = step
        self.diagnostics = dict(diagnostics or {})


class BudgetViolation(LatentProtectionError, AssertionError):
    """Raised when an adversarial example leaves its l-inf ball or the [0, 1] box."""


class MetricUnavailable(LatentProtectionError, RuntimeError):
    """Raised when an embedding provider cannot produce a metric."""


class DefenseUnavailable(LatentProtectionError, RuntimeError):
    """Raised when a defense needs a model that is not registered."""


class ContainerError(LatentProtectionError, ValueError):
    """Raised for malformed binary field containers."""


class ChecksumMismatchError(ContainerError):
    """Raised when a container's trailing checksum does not match its contents."""


class UnsupportedVersionError(ContainerError):
    """Raised when a container or checkpoint carries an unknown format version."""


class StageFailure(LatentProtectionError, RuntimeError):
    """Raised when a pipeline stage fails; the manifest records the partial state."""

    def __init__(self, message: str, *, stage: str | None = None, manifest_path: str | None = None):
        super().__init__(message)
        self.stage = stage
        self.manifest_path = manifest_path
