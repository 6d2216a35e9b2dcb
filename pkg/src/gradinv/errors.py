"""Exception hierarchy shared by all gradinv modules."""


class GradinvError(Exception):
    """Base class for all library errors."""


class ContractViolationError(GradinvError):
    """An argument violates a documented precondition (shape, norm, range)."""


class DegenerateInputError(GradinvError):
    """Input is numerically rank-deficient or otherwise unusable."""


class NumericalError(GradinvError):
    """An iterative kernel failed to converge; carries the residual."""

    def __init__(self, message: str, residual: float | None = None):
        super().__init__(message)
        self.residual = residual


class UnsupportedError(GradinvError):
    """Requested operation is outside the supported parameter range."""


class BudgetExceededError(GradinvError):
    """The single-query gradient budget was spent already."""


class InvalidDesignError(GradinvError):
    """Model parameters do not carry the designed multi-layer structure."""


class AmbiguousRecoveryError(GradinvError):
    """Component weights cannot be matched to the discrete candidate grid.

    Raised instead of returning low-confidence reconstructions; carries
    per-component snapping residuals for diagnosis.
    """

    def __init__(self, message: str, residuals=None, stage: str = "sign_recovery"):
        super().__init__(message)
        self.residuals = residuals
        self.stage = stage


class DataFormatError(GradinvError):
    """A data file does not match its declared binary format."""


class DataError(GradinvError):
    """A data source cannot supply the requested samples."""


class GenerationError(GradinvError):
    """Synthetic data generation failed to meet its conditioning target."""


class OracleInapplicableError(GradinvError):
    """A brute-force oracle was asked about an input outside its scope."""


class AttackStageError(GradinvError):
    """Wraps a failure inside the reconstruction pipeline with its stage name."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"attack failed at stage '{stage}': {cause}")
        self.stage = stage
        self.cause = cause
