"""Exception hierarchy for dyncoex."""


class DyncoexError(Exception):
    """Base class for all dyncoex errors."""


class ShapeError(DyncoexError):
    """Inputs have inconsistent dimensions."""


class SingularDesign(DyncoexError):
    """A covariate matrix is rank deficient (possibly after centering)."""


class ZeroVariance(DyncoexError):
    """A residual column has zero variance; no test statistic exists."""


class DegenerateCorrelation(DyncoexError):
    """Residuals are (numerically) perfectly correlated; the score
    statistic's denominator vanishes."""


class NonMonotoneCorrection(DyncoexError):
    """The small-sample critical-value map is not monotone on the working
    range, so the adjusted statistic is not well defined."""


class NotPositiveDefinite(DyncoexError):
    """The asymptotic correlation matrix of the per-pair statistics is not
    numerically positive definite; the analytic null is unavailable."""


class EmptyTargets(DyncoexError):
    """A hub was given no target genes."""


class InvalidCorrelation(DyncoexError):
    """A requested per-sample correlation falls outside the valid range."""


class PermutationDegeneracy(DyncoexError):
    """More than 1% of permutation replicates were degenerate."""


class ValidationError(DyncoexError):
    """A value fails its documented precondition."""


class MalformedInput(DyncoexError):
    """An input file cell could not be parsed.

    Carries the 1-based physical line number and 1-based field index.
    """

    def __init__(self, message: str, line: int, col: int):
        super().__init__(f"{message} (line {line}, column {col})")
        self.line = line
        self.col = col


class DuplicateGene(DyncoexError):
    """An expression file lists the same gene id twice."""


class EmptyFile(DyncoexError):
    """An input file contains no data rows."""


class AlignmentError(DyncoexError):
    """Sample ids of the expression and covariate files do not intersect."""
