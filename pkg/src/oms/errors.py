"""Exception hierarchy shared across the package."""


class OmsError(Exception):
    """Base class for all package errors."""


class DomainError(OmsError):
    """Parameter vector outside the model's parameter box."""


class SchemaError(OmsError):
    """Observation variables do not match the queried source's schema."""


class PoleError(OmsError):
    """Target functional evaluated at a singular point (e.g. zero Wald denominator)."""


class StateError(OmsError):
    """Operation requires state that is absent (e.g. empty history)."""


class UnderIdentifiedError(OmsError):
    """Observed moments do not pin down the parameter vector."""


class ConfigError(OmsError):
    """Invalid experiment or policy configuration."""


class DegenerateObjectiveError(OmsError):
    """Objective is +inf on the entire search domain."""


class IngestionError(OmsError):
    """Malformed input file (CSV history or covariate table)."""


class EpisodeError(OmsError):
    """A simulated episode failed; message carries the episode seed."""
