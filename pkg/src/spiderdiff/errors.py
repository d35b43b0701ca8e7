"""Exception types shared across the package."""


class SpiderdiffError(Exception):
    """Base class for all package errors."""


class DomainError(SpiderdiffError, ValueError):
    """An argument is outside the mathematical domain of an operation."""


class SpecError(SpiderdiffError, ValueError):
    """A diffusion specification violates a structural invariant."""


class BandwidthError(SpiderdiffError, ValueError):
    """The spatial bandwidth is too coarse for the speed measure (e.g. two
    atoms fall in one cell).  The message states how small h must be."""


class InconclusiveBoundaryError(SpiderdiffError, RuntimeError):
    """Boundary classification could not decide between finite and divergent
    within the configured truncation budget.  Never silently guessed."""


class ConfigError(SpiderdiffError, ValueError):
    """A run configuration failed validation; carries a field path."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")
