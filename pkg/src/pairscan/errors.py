"""Exception types shared across the package."""


class InputError(ValueError):
    """Raised when an argument, file, or configuration fails validation."""
