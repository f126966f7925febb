"""Exception types shared across the package."""


class RaceError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(RaceError):
    """Scenario configuration is malformed or violates the schema."""


class CollisionError(RaceError):
    """A platoon step produced a non-positive inter-vehicle gap."""


class InfeasibleError(RaceError):
    """A resource-allocation instance admits no feasible point."""


class RegimeError(RaceError):
    """A closed-form approximation was evaluated outside its regime."""


class ConvergenceError(RaceError):
    """An iterative solver hit its iteration cap before converging."""


class AssignmentError(RaceError):
    """A sub-channel assignment matrix violates its structural constraints."""


class AggregationError(RaceError):
    """Model aggregation was requested over an empty selection."""


class CheckpointError(RaceError):
    """A parameter checkpoint file is missing, corrupt, or incompatible."""
