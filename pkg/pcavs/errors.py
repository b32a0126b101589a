"""Exception hierarchy shared by every pcavs module.

The CLI maps ConfigurationError to exit code 1 and every other PcavsError to 2.
"""


class PcavsError(Exception):
    """Base class for all errors raised by pcavs."""


class InvalidArgumentError(PcavsError, ValueError):
    """Shape, length, range or sample-rate violations at an operation boundary."""


class SingularConfigurationError(PcavsError, ArithmeticError):
    """The point configuration of a projection solve is rank deficient."""


class DegenerateInputError(PcavsError, ValueError):
    """A feature vector has zero norm where a direction is required."""


class ConfigurationError(PcavsError):
    """Missing prerequisites, unknown config keys, unfitted probes."""


class VersionMismatchError(ConfigurationError):
    def __init__(self, found: int, supported: int):
        super().__init__(
            f"checkpoint format_version {found} is newer than supported version {supported}"
        )
        self.found = found
        self.supported = supported


class IntegrityError(PcavsError):
    """A checkpoint container failed its checksum or structural checks."""


class TrainingDivergedError(PcavsError):
    def __init__(self, step: int, components: dict[str, float]):
        bad = ", ".join(f"{k}={v}" for k, v in components.items())
        super().__init__(f"non-finite loss at step {step}: {bad}")
        self.step = step
        self.components = components
