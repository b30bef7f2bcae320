"""Exception hierarchy shared across the package."""

from __future__ import annotations


class ContractError(ValueError):
    """Caller passed inputs that violate an operation's preconditions."""


class NumericalError(RuntimeError):
    """A computation produced non-finite values."""


class ChainDivergenceError(NumericalError):
    def __init__(self, step: int, message: str = "") -> None:
        self.step = step
        super().__init__(message or f"Langevin chain produced a non-finite gradient at step {step}")


class UnsupportedConfigError(ContractError):
    """Operation requested on a model configuration it cannot handle."""


class ContainerError(IOError):
    """Base class for MMEB container read failures. ``code`` is stable."""

    code = 10


class BadMagicError(ContainerError):
    code = 11


class VersionError(ContainerError):
    code = 12


class TruncatedError(ContainerError):
    code = 13


class ChecksumError(ContainerError):
    code = 14


class IncompatibleError(ContractError):
    """A checkpoint and a dataset (or config) do not fit together."""


class LockError(OSError):
    """Another training process holds the output directory."""
