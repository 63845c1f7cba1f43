"""Exception types shared across the package."""


class VoldisError(Exception):
    """Base class for all package errors."""


class InputError(VoldisError, ValueError):
    """Invalid argument, malformed file, or violated precondition."""


class AlignmentError(InputError):
    """Two volumes were sampled on different rays or sample positions."""


class CorruptedStateError(VoldisError, FloatingPointError):
    """Non-finite parameters or gradients; the run must abort."""


class ScorerError(VoldisError):
    """A semantic scorer failed on a view."""
