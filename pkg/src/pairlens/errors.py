"""Exception taxonomy shared across the toolkit.

Every error raised on a documented failure path derives from
:class:`PairlensError` so callers (and the CLI) can map failures to exit
codes without string matching.
"""

from __future__ import annotations


class PairlensError(Exception):
    """Base class for all toolkit errors."""


# --- configuration / input validation -------------------------------------

class InvalidConfigError(PairlensError):
    """A configuration object violates its invariants."""


class InvalidRatioError(InvalidConfigError):
    """Misalignment ratio cannot be realized (needs >= 2 selected pairs)."""


class TooFewPairsError(InvalidConfigError):
    """Dataset has fewer than 2 pairs; contrastive batches are undefined."""


class UnknownIdError(PairlensError):
    """A referenced pair id does not exist in the dataset/segmentation."""


class ParseError(PairlensError):
    """A data file could not be parsed. Carries the offending line number."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DimensionMismatchError(PairlensError):
    """An array has the wrong shape/length for the operation."""


class DimensionTooLargeError(PairlensError):
    """Dense-path operation requested beyond its supported dimension."""


# --- model -----------------------------------------------------------------

class ZeroNormEmbeddingError(PairlensError):
    """An embedding row has (near-)zero norm; cosine similarity undefined."""


class LayoutMismatchError(PairlensError):
    """Flat parameter vector or tensor dict does not match the layout."""


class InvalidSegError(PairlensError):
    """A segment index set is inconsistent with the batch segmentation."""


class NonPositiveDenominatorError(PairlensError):
    """Reweighted softmax denominator dropped to <= 0."""


# --- solvers / numerics ------------------------------------------------------

class NegativeCurvatureError(PairlensError):
    """CG met a direction with p'Ap <= 0; raise the damping and retry."""


class NoConvergenceError(PairlensError):
    """Iteration budget exhausted. ``payload`` holds the best iterate."""

    def __init__(self, message: str, payload=None):
        super().__init__(message)
        self.payload = payload


class NonFiniteEvaluationError(PairlensError):
    """A probed function value or gradient came back NaN/Inf."""


# --- scoring ------------------------------------------------------------------

class SingletonTestBatchError(PairlensError):
    """A 1-pair test batch has identically zero contrastive loss."""


class NonPositiveCosineError(PairlensError):
    """log-cosine undefined for a pair with cosine <= 0."""

    def __init__(self, message: str, pair_id: int | None = None):
        self.pair_id = pair_id
        super().__init__(message)


class ZeroTestGradientError(PairlensError):
    """Test gradient is zero; norm-constrained scores undefined."""


class MixedKindsError(PairlensError):
    """Ranking requires all score records to share one kind."""


class SingularDenominatorError(PairlensError):
    """Error-bound formula evaluated at a singular denominator."""
