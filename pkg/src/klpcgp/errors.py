"""Exception types shared across the package."""


class KlpcgpError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(KlpcgpError):
    """A config file or option set is missing, malformed, or inconsistent."""


class DegenerateDataError(KlpcgpError, ValueError):
    """Input data cannot support the requested operation (too few samples,
    zero spread in a dimension, non-finite values, ...)."""


class FarFromSupportError(KlpcgpError, ValueError):
    """A conditioning point is so far from the fitted samples that every
    kernel weight underflows; the conditional distribution is undefined."""


class BoundaryError(KlpcgpError, ValueError):
    """A probability argument sits on (or numerically at) 0 or 1 where the
    inverse transform is unbounded."""


class NumericalError(KlpcgpError, RuntimeError):
    """A linear-algebra or root-finding step failed beyond the configured
    recovery policy (e.g. jitter escalation exhausted)."""


class ModelFileError(KlpcgpError):
    """A saved model file is unreadable: truncated, corrupt, or not ours."""


class ModelVersionError(ModelFileError):
    """A saved model file declares a format version this build cannot read."""
