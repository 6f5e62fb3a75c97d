"""Exception and warning types shared across the package."""


class ExprBenchError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(ExprBenchError):
    """An object violates one of its structural invariants."""


class ParseError(ExprBenchError):
    """A cell in an input file could not be parsed.

    Carries 1-based file coordinates (header row counts as row 1).
    """

    def __init__(self, message: str, row: int, col: int):
        super().__init__(f"{message} at row {row}, col {col}")
        self.row = row
        self.col = col


class DuplicateIdError(ExprBenchError):
    """A gene or sample identifier occurs more than once."""


class EmptyMatrixError(ExprBenchError):
    """An expression matrix has no genes or no samples."""


class NoCommonGenesError(ExprBenchError):
    """The gene-set intersection across cohorts is empty."""


class DuplicateSampleError(ExprBenchError):
    """The same sample identifier appears in more than one record."""


class DuplicateBatchError(ExprBenchError):
    """Two cohorts being merged share a batch label."""


class UnknownConditionError(ExprBenchError):
    """A condition label is not one of the accepted aliases."""


class MissingColumnError(ExprBenchError):
    """A required metadata column is absent."""


class DegenerateInputError(ExprBenchError):
    """Input too small for the operation (e.g. a single sample)."""


class NonPositiveValueError(ExprBenchError):
    """A value + offset is not strictly positive before log transform."""


class SingularDesignError(ExprBenchError):
    """Batch and covariate columns are exactly confounded."""


class NonConvergenceError(ExprBenchError):
    """Iterative estimation failed to converge within the iteration cap."""


class UnknownBatchError(ExprBenchError):
    """Data contains a batch the fitted model has never seen."""


class InsufficientBatchesError(ExprBenchError):
    """Fewer batches present than the operation requires."""


class InsufficientSamplesError(ExprBenchError):
    """Fewer samples (or sample groups) present than required."""


class RankDeficiencyError(ExprBenchError):
    """Requested more components than the numerical rank supports."""


class TooFewMinoritySamplesError(ExprBenchError):
    """Minority class too small for the requested neighbor count."""


class InfeasibleSplitWarning(UserWarning):
    """A stratum cannot approximate the target fraction (e.g. one subject)."""


class SingleClassError(ExprBenchError):
    """Labels contain only one class where two are required."""


class FeatureCountMismatchError(ExprBenchError):
    """Input feature count differs from what the model was trained on."""


class InvalidSpaceError(ExprBenchError):
    """A search-space dimension has empty or inverted bounds."""


class TooFewGroupsError(ExprBenchError):
    """Fewer distinct groups than requested folds."""


class MissingCoverError(ExprBenchError):
    """Tree nodes lack the cover statistics required for attribution."""


class UnknownRepresentativeError(ExprBenchError):
    """A score refers to a gene that is not a cluster representative."""


class InvalidPValueError(ExprBenchError):
    """A p-value is outside [0, 1] or not finite."""


class ConfigValidationError(ExprBenchError):
    """Pipeline configuration failed validation."""


class PipelineError(ExprBenchError):
    """A pipeline stage failed; carries the stage name for context."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"stage '{stage}': {message}")
        self.stage = stage
