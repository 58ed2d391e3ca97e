"""Exception types shared across the package."""


class FedBackdoorError(Exception):
    """Base class for package-specific failures."""


class DatasetUnavailableError(FedBackdoorError):
    """A named dataset's source files are not present on this machine."""


class PartitioningError(FedBackdoorError):
    """A label-skew partition cannot be constructed as requested."""


class SchemaMismatchError(FedBackdoorError):
    """Parameter collections with different schemas were combined."""


class DivergenceError(FedBackdoorError):
    """Training produced a non-finite loss."""

    def __init__(self, message: str, round_idx: int | None = None, epoch: int | None = None):
        super().__init__(message)
        self.round_idx = round_idx
        self.epoch = epoch


class GeneratorDivergenceError(DivergenceError):
    """Generator training produced a non-finite loss even after a retry."""


class CompositionError(FedBackdoorError):
    """A batch lacked the members a loss term strictly requires."""


class ConfigError(FedBackdoorError):
    """An experiment configuration failed validation."""
