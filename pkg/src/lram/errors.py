"""Exception types shared across the library."""


class LramError(Exception):
    """Base class for all library errors."""


class DimensionMismatchError(LramError):
    """Operands have incompatible shapes."""


class NonSymmetricError(LramError):
    """Matrix asymmetry exceeds the tolerated fraction of its Frobenius norm."""


class NoConvergenceError(LramError):
    """An iterative solver stalled before reaching its residual target."""


class NotPositiveDefiniteError(LramError):
    """A nonpositive pivot was encountered while factorizing."""


class SingularMatrixError(LramError):
    """Matrix is singular or too ill-conditioned to solve reliably."""

    def __init__(self, message, cond=float("inf")):
        super().__init__(message)
        self.cond = cond


class EmptyEnsembleError(LramError):
    """An operation requires at least one ensemble member."""


class ZeroEnsembleError(LramError):
    """Every ensemble member is zero, so spectral ratios are undefined."""


class SingularCapacitanceError(LramError):
    """The k-by-k update matrix for one sample is singular."""

    def __init__(self, sample, cond=float("inf")):
        super().__init__(
            f"update matrix singular for sample {sample} (cond estimate {cond:.3e})"
        )
        self.sample = sample
        self.cond = cond


class DivergenceRiskError(LramError):
    """Series solve refused: the contraction norm estimate is >= 1."""

    def __init__(self, sample, norm_estimate):
        super().__init__(
            f"series solve may diverge for sample {sample} "
            f"(norm estimate {norm_estimate:.3e} >= 1); pass force=True to override"
        )
        self.sample = sample
        self.norm_estimate = norm_estimate


class SingularSampleError(LramError):
    """A perturbed system matrix is singular for one sample."""

    def __init__(self, sample, message=""):
        super().__init__(message or f"perturbed matrix singular for sample {sample}")
        self.sample = sample


class EmptyInputError(LramError):
    """An aggregate was requested over an empty collection."""


class InvalidMeshSizeError(LramError):
    """Mesh spacing must lie strictly between 0 and 1."""


class DegenerateElementError(LramError):
    """A mesh element has nonpositive area."""


class HessianTooLargeError(LramError):
    """Refusing to materialize a dense Hessian at this problem size."""


class LineSearchError(LramError):
    """Line search exhausted its trial budget without an acceptable step."""


class ConfigError(LramError):
    """Base class for configuration problems."""


class ConfigParseError(ConfigError):
    """Config file line could not be parsed."""

    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class UnknownKeyError(ConfigError):
    """Config key is not recognized for this subcommand."""


class ConfigRangeError(ConfigError):
    """Config value is outside its admissible range."""
