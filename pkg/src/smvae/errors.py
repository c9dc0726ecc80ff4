"""Exception hierarchy shared by every module.

The CLI maps these onto process exit codes, so each class carries the
code it should produce.
"""


class SmvaeError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(SmvaeError, ValueError):
    """Invalid configuration or usage."""

    exit_code = 1


class ShapeError(SmvaeError, ValueError):
    """Operands or inputs have incompatible shapes."""

    exit_code = 2


class EmptySubsetError(SmvaeError, ValueError):
    """An inference call received a set with no present modality."""

    exit_code = 2


class FormatError(SmvaeError, ValueError):
    """A binary file does not match its declared layout."""

    exit_code = 2

    def __init__(self, message, offset=None, path=None):
        self.offset = offset
        self.path = path
        parts = [message]
        if offset is not None:
            parts.append(f"at byte offset {offset}")
        if path is not None:
            parts.append(f"in {path}")
        super().__init__(" ".join(parts))


class PairingError(FormatError):
    """Paired files (e.g. images and labels) disagree on sample count."""


class NumericError(SmvaeError, FloatingPointError):
    """A NaN or infinity appeared where finite values are required."""

    exit_code = 3
