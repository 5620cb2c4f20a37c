"""Hierarchical organ perfusion: 1D vascular trees coupled to a multicompartment
Darcy continuum, with contrast-agent transport on top."""

from .errors import (
    CFLError,
    ConfigurationError,
    ContractError,
    CouplingError,
    FormatError,
    GenerationError,
    GeometryError,
    InvariantError,
    PerfusionError,
    SolverError,
    SplitError,
    TreeValidationError,
)

__version__ = "0.1.0"
