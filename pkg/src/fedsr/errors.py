"""Exception types shared across the package."""


class FedSRError(Exception):
    """Base class for all errors raised by this package."""


class ContractViolation(FedSRError, ValueError):
    """A caller broke a precondition (dimension mismatch, bad argument...)."""


class NumericError(FedSRError, FloatingPointError):
    """A computation produced NaN or Inf."""


class EmptyPartitionError(FedSRError, ValueError):
    """A device ended up with no training samples."""


class IdxFormatError(FedSRError, ValueError):
    """Malformed IDX file."""


class ConfigError(FedSRError, ValueError):
    """Invalid experiment configuration."""


class RunError(FedSRError, RuntimeError):
    """An experiment aborted; the message carries round index and phase."""

    def __init__(self, round_index, phase, cause):
        self.round_index = round_index
        self.phase = phase
        self.cause = cause
        super().__init__(f"round {round_index}, phase '{phase}': {cause}")
