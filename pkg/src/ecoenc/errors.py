"""Exception types shared across the package."""


class EcoencError(Exception):
    """Base class for all package errors."""


class DimensionError(EcoencError):
    """Operand shapes are incompatible with the requested operation."""


class NonFiniteError(EcoencError):
    """A NaN or Inf crossed an operation boundary."""


class GraphError(EcoencError):
    """Misuse of the recorded computation graph (e.g. backward called twice)."""


class ConfigError(EcoencError):
    """A configuration object violates its invariants."""


class TrainingError(EcoencError):
    """Optimization failed (NaN loss or gradient)."""


class ModelError(EcoencError):
    """Model forward received inputs it cannot process."""


class PolicyError(EcoencError):
    """An exit outside the allowed exit set was requested."""


class ProvenanceError(EcoencError):
    """Artifacts from different pipeline runs were mixed."""


class MissingArtifactError(EcoencError):
    """A required upstream artifact file does not exist."""

    def __init__(self, path):
        super().__init__(f"missing required artifact: {path}")
        self.path = str(path)
