"""Exception types shared across the toolkit."""


class ShallowMTError(Exception):
    """Base class for all toolkit errors."""


class ShapeError(ShallowMTError):
    """Tensor dimensions do not line up."""


class VocabularyError(ShallowMTError):
    """Unknown token id, language, or tokenizer spec."""


class ConfigError(ShallowMTError):
    """Invalid or inconsistent configuration."""


class DataError(ShallowMTError):
    """Corpus is empty, malformed, or otherwise unusable."""


class ContractError(ShallowMTError):
    """API precondition violated by the caller."""


class DistributionError(ShallowMTError):
    """A probability vector is negative or does not sum to one."""


class TrainingError(ShallowMTError):
    """Training step failed (non-finite gradients, bad state)."""


class MeasurementError(ShallowMTError):
    """Latency measurement received impossible inputs."""
