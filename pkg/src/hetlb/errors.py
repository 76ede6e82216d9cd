"""Exception hierarchy.

Configuration problems derive from :class:`ConfigError` so the CLI can map
them to a single exit code.
"""


class HetlbError(Exception):
    """Base class for all package errors."""


class ConfigError(HetlbError, ValueError):
    """Invalid system configuration."""


class NonDecreasingSpeeds(ConfigError):
    pass


class PoolSumMismatch(ConfigError):
    pass


class CapacityNotNormalized(ConfigError):
    pass


class LambdaOutOfRange(ConfigError):
    pass


class InsufficientBatches(HetlbError):
    """A batch contained no events, or too few batches were requested."""


class StateSpaceTooLarge(HetlbError):
    pass


class CouplingViolation(HetlbError):
    """A pathwise ordering between the coupled systems failed.

    This can only happen through an implementation bug, so it is fatal.
    """


class StepTooLarge(HetlbError):
    """Explicit Euler drove a tail component negative."""


class EmptySeries(HetlbError, ValueError):
    pass
