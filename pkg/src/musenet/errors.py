"""Exception taxonomy shared by all modules.

The CLI maps these onto exit codes: configuration/usage/input problems are
exit 1, numerical failures and I/O problems are exit 2.
"""


class MuseNetError(Exception):
    """Base class for all package errors."""


class ConfigurationError(MuseNetError):
    """A layer/model/run was configured with incompatible shapes or options."""


class UsageError(MuseNetError):
    """An operation was called outside its contract (bad mode, bad argument)."""


class InputError(MuseNetError):
    """Runtime input data violates a precondition (bad label, bad shape)."""


class NumericalError(MuseNetError):
    """A forward/backward pass produced NaN/Inf or a numeric check failed."""


class DataIOError(MuseNetError):
    """Dataset or checkpoint files could not be read or written."""
