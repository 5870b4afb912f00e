"""Exception types shared across the package."""


class PercHomError(Exception):
    """Base class for all package errors."""


class ParameterError(PercHomError, ValueError):
    """Invalid model or numerical parameter."""


class GeometryError(PercHomError, ValueError):
    """A cube, ball or box does not fit the requested region."""


class ShapeError(PercHomError, ValueError):
    """Field shape does not match the lattice box."""


class SubcriticalError(ParameterError):
    """Requested percolation parameter is too close to (or below) criticality."""


class StatisticsError(PercHomError, ValueError):
    """Too few samples or degenerate data for a statistical summary."""


class SolverError(PercHomError, RuntimeError):
    """Linear solver failed to reach the requested tolerance.

    Attributes
    ----------
    residuals : list of float
        Residual norm history up to the failure.
    """

    def __init__(self, message, residuals=None):
        super().__init__(message)
        self.residuals = list(residuals or [])


class PartitionError(PercHomError, RuntimeError):
    """The good-cube partition could not be constructed.

    Attributes
    ----------
    diagnostics : dict
        Goodness counts per level and other context.
    """

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})


class CoarseningError(PercHomError, RuntimeError):
    """A vertex has no crossing cluster to take its coarsened value from."""


class EvolutionError(PercHomError, RuntimeError):
    """Heat-kernel evolution could not be carried out within limits."""


class QuadratureError(PercHomError, RuntimeError):
    """Time quadrature tail exceeds tolerance."""


class FitError(PercHomError, ValueError):
    """Rate fit received invalid data."""


class ConfigError(PercHomError, ValueError):
    """Experiment configuration could not be parsed or validated.

    Attributes
    ----------
    line : int or None
        1-based line number of the offending entry, if known.
    """

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class FieldFormatError(PercHomError, ValueError):
    """Header mismatch or truncated payload in a field or environment file."""


class StageError(PercHomError, RuntimeError):
    """A module error raised inside an experiment stage.

    Attributes
    ----------
    stage : str
    cause : PercHomError
    """

    def __init__(self, stage, cause):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause
