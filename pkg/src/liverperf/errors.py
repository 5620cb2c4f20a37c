"""Exception hierarchy shared by all pipeline stages."""


class PerfusionError(Exception):
    """Base class for every error raised by liverperf."""


class FormatError(PerfusionError):
    """A text input (mesh, tree, config) failed to parse."""

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}"
        super().__init__(f"{where}: {message}" if where else message)


class GeometryError(PerfusionError):
    """Degenerate or inconsistent geometry."""


class ContractError(PerfusionError):
    """Arguments violate a documented size/shape contract."""


class TreeValidationError(PerfusionError):
    """A vascular tree violates a structural invariant."""


class GenerationError(PerfusionError):
    """The synthetic tree generator could not satisfy its constraints."""


class SplitError(PerfusionError):
    """Hierarchy split produced no upper tree."""


class ConfigurationError(PerfusionError):
    """Invalid user configuration or parameter choice."""

    def __init__(self, message, field=None):
        self.field = field
        super().__init__(f"{field}: {message}" if field else message)


class SolverError(PerfusionError):
    """A numerical solver failed to converge or hit a singular system."""

    def __init__(self, message, residuals=None):
        self.residuals = list(residuals) if residuals is not None else []
        super().__init__(message)


class CouplingError(SolverError):
    """The 1D/3D fixed-point iteration did not converge."""


class CFLError(PerfusionError):
    """Requested time step exceeds the explicit stability bound."""


class InvariantError(PerfusionError):
    """A runtime invariant (e.g. saturation bounds) was violated."""
