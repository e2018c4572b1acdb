"""Exception hierarchy shared across the package."""


class ColldynError(Exception):
    """Base class for all package errors."""


class ConfigError(ColldynError):
    """Invalid configuration (distributions, integrator setup, catalog names)."""


class DataError(ColldynError):
    """Dataset violates a precondition of the requested operation."""


class InsufficientDataError(DataError):
    """Not enough snapshots/samples to perform the operation."""


class EvaluationError(ColldynError):
    """Non-finite or otherwise unusable numerical input."""


class IntegrationError(ColldynError):
    """Forward integration failed; message names the offending time."""


class AssemblyError(ColldynError):
    """Normal-system assembly failed."""


class AssemblyCorruptionError(AssemblyError):
    """Assembled matrix lost symmetry beyond tolerance."""


class DegenerateBasisError(AssemblyError):
    """Basis elements carry no mass on the data support; names dead elements."""


class DegeneratePairError(DataError):
    """Two-agent transform hit a coincident pair; names the snapshot."""


class IllPosedSplitError(DataError):
    """MPLS split is rank-deficient; more samples required."""


class ResourceError(ColldynError):
    """A configured resource cap was exceeded."""


class ConditioningError(ColldynError):
    """Factorization failed even after maximum jitter."""


class SolveError(ColldynError):
    """Linear solve failed."""


class NotFittedError(ColldynError):
    """Posterior queried before the model was fitted."""
