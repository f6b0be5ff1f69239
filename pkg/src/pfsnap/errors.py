"""Exception hierarchy shared across the package."""


class PfsnapError(Exception):
    """Base class for all errors raised by pfsnap."""


class SchemaError(PfsnapError):
    """A required column is missing or a value falls outside its domain."""


class DuplicateKeyError(PfsnapError):
    """Two rows share the same (individual, wave) key."""


class ConvergenceError(PfsnapError):
    """An iterative routine hit its iteration cap."""


class RankDeficiencyError(PfsnapError):
    """The design matrix is not of full column rank."""

    def __init__(self, message, columns=()):
        super().__init__(message)
        self.columns = tuple(columns)


class SeparationError(PfsnapError):
    """Logit likelihood is monotone in a diverging direction."""


class IdentificationError(PfsnapError):
    """Fewer excluded instruments than endogenous regressors."""


class StageError(PfsnapError):
    """A pipeline stage failed; ``stage`` names the step."""

    def __init__(self, stage, message):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
        self.detail = message
