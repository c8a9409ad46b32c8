"""Exception hierarchy shared by every module.

The CLI maps the three families below onto exit codes, so new errors should
subclass one of them rather than ``MadError`` directly.
"""


class MadError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(MadError, ValueError):
    """Invalid configuration, unknown enum value or bad hyperparameter."""


class DataError(MadError, ValueError):
    """Malformed or out-of-range input data."""


class NumericError(MadError, ArithmeticError):
    """Non-finite values produced during optimization."""


class TrainingDivergedError(NumericError):
    pass


class AttackNotImplementedError(MadError, NotImplementedError):
    """A registered attack id that has no implementation."""

    def __init__(self, attack_id, name=""):
        self.attack_id = attack_id
        label = f"{attack_id} ({name})" if name else str(attack_id)
        super().__init__(f"attack id {label} is registered but not implemented")


class GenerationError(DataError):
    """Dataset generation produced nothing usable."""


class SamplingError(DataError):
    """Not enough examples to draw an episode."""


class UndefinedMetricError(MadError, ValueError):
    pass


class MetricDomainError(MadError, ValueError):
    pass


class StorageError(MadError, OSError):
    """Checkpoint or dataset I/O failure."""


class CorruptFileError(StorageError):
    pass


class FormatVersionError(StorageError):
    pass


class IntegrityError(MadError, ValueError):
    """Stored content disagrees with a value recomputed from it."""


class ChecksumError(IntegrityError, StorageError):
    pass
