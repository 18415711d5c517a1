"""Exception types shared across the library."""


class BridgeError(Exception):
    """Base class for all bridgesolve errors."""


class DomainError(BridgeError, ValueError):
    """An argument lies outside the mathematically valid range."""


class OrderingError(DomainError):
    """Time or log-SNR arguments violate the required ordering."""


class SingularityError(DomainError):
    """Evaluation requested exactly at the pinned endpoint t = T,
    where the bridge score denominators vanish."""


class UnsupportedOrderError(DomainError):
    """Requested expansion order has a non-elementary antiderivative
    and no closed form is available."""


class ConfigError(BridgeError, ValueError):
    """Invalid solver or experiment configuration."""


class OracleError(BridgeError, RuntimeError):
    """A verification oracle failed to converge."""
