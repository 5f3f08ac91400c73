"""Exception types shared across the simulator."""


class CFLError(Exception):
    """Base class for all simulator errors."""


class StructuralError(CFLError, ValueError):
    """Shapes, key sets or index lists do not line up."""


class CapabilityError(CFLError, TypeError):
    """An operation outside the supported autograd op set was used."""


class ConfigError(CFLError, ValueError):
    """A configuration value violates its invariant."""


class CoverageError(CFLError, KeyError):
    """A latency table lacks an entry that a lookup needs."""

    def __str__(self) -> str:
        return str(self.args[0]) if self.args else "missing latency table entry"


class InfeasibleError(CFLError):
    """No architecture satisfies a worker's latency bound."""

    def __init__(self, message: str, tightest_ms: float):
        super().__init__(message)
        self.tightest_ms = tightest_ms


class PartitionError(CFLError, ValueError):
    """A data partition cannot be built from the available samples."""


class ReportError(CFLError):
    """Run logs are inconsistent or incomplete for reporting."""
