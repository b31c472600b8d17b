"""Exception types shared across the package.

Everything derives from GraphSSLError so callers can catch broadly; the
subclasses exist because tests and the CLI distinguish usage mistakes
(bad shapes, bad parameters) from bad runtime state (empty banks).
"""


class GraphSSLError(Exception):
    pass


class DimensionError(GraphSSLError, ValueError):
    """Array shapes do not chain or do not match."""


class ParameterError(GraphSSLError, ValueError):
    """A scalar argument is outside its documented range."""


class DomainError(GraphSSLError, ValueError):
    """Input values violate a mathematical domain (negative probability, ...)."""


class DegenerateInputError(GraphSSLError, ValueError):
    """Input is structurally valid but degenerate (zero-norm row, 1-node graph)."""


class ValidationError(GraphSSLError, ValueError):
    """A domain object violates its invariants."""


class StateError(GraphSSLError, RuntimeError):
    """Operation requires state that is not there yet (e.g. empty bank)."""


class ContractError(GraphSSLError, TypeError):
    """Caller broke an API contract (non-scalar loss, mismatched banks)."""


class ConfigError(GraphSSLError, ValueError):
    """Run configuration file is missing, malformed, or has unknown keys."""
