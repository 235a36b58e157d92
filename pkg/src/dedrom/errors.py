"""Exception taxonomy shared across the package.

The CLI maps these onto process exit codes: configuration problems exit
with 2, numerical failures with 3, and missing or corrupt artifacts with 4.
"""


class DedromError(Exception):
    """Base class for all package-specific failures."""


class MaterialDataError(DedromError):
    """Material definition is malformed or physically inadmissible."""


class ConfigError(DedromError):
    """Run configuration is malformed or violates a precondition."""


class StepFailureError(DedromError):
    """A solver step failed to converge.

    Carries a ``diagnostics`` dict (iteration counts, residual norms,
    current time) so callers can report what went wrong.
    """

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})


class ArtifactError(DedromError):
    """An on-disk artifact is missing, locked, corrupt, or incompatible."""


class DependencyError(ArtifactError):
    """A pipeline stage needs artifacts that an earlier stage has not made."""


class StaleArtifactError(ArtifactError):
    """An artifact on disk was produced under a different configuration."""


class ConvergenceRegimeError(DedromError):
    """Mesh-triplet data is outside the monotone convergence regime."""


class DegenerateDataError(DedromError):
    """Data has zero variance where a normalization or metric needs spread."""
