"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: validation-type errors exit 2,
numeric/training failures exit 3, file corruption and I/O exit 4.
"""


class IclSysIdError(Exception):
    """Base class for all package errors."""


class ParameterError(IclSysIdError, ValueError):
    """An argument or configuration value is out of its documented domain."""


class DimensionError(IclSysIdError, ValueError):
    """Operands have incompatible lengths or shapes."""


class StateError(IclSysIdError, RuntimeError):
    """An operation was called on an object in the wrong state (e.g. untrained)."""


class SamplingFailureError(IclSysIdError, RuntimeError):
    """Rejection sampling exhausted its attempt budget without a valid draw."""


class NumericOverflowError(IclSysIdError, ArithmeticError):
    """A simulation produced a non-finite value."""

    def __init__(self, message: str, time_index: int):
        super().__init__(f"{message} (time index {time_index})")
        self.time_index = time_index


class TrainingError(IclSysIdError, RuntimeError):
    """Training diverged or otherwise failed."""

    def __init__(self, message: str, epoch: int):
        super().__init__(f"{message} (epoch {epoch})")
        self.epoch = epoch


class InstabilityError(IclSysIdError, RuntimeError):
    """A closed-loop simulation left its sane operating range."""

    def __init__(self, message: str, step: int):
        super().__init__(f"{message} (step {step})")
        self.step = step


class CorpusCorruptionError(IclSysIdError, IOError):
    """A corpus file failed its integrity check."""


class CheckpointError(IclSysIdError, IOError):
    """A model checkpoint is malformed or failed its integrity check."""


class ProbeError(IclSysIdError, RuntimeError):
    """Embedding probe could not be fit (e.g. degenerate class balance)."""
