"""Exception hierarchy shared by every hsicnn module."""


class HsiCnnError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(HsiCnnError, ValueError):
    """Array shapes disagree with what an operation requires."""

    def __init__(self, message, expected=None, actual=None):
        super().__init__(message)
        self.expected = expected
        self.actual = actual


class ConfigError(HsiCnnError, ValueError):
    """A configuration produces an invalid or degenerate network/run."""

    def __init__(self, message, stage=None):
        super().__init__(message)
        self.stage = stage


class FormatError(HsiCnnError, ValueError):
    """A file on disk is malformed (bad magic, version, truncation...)."""

    def __init__(self, message, expected_bytes=None, actual_bytes=None):
        super().__init__(message)
        self.expected_bytes = expected_bytes
        self.actual_bytes = actual_bytes


class LabelError(HsiCnnError, ValueError):
    """Class labels are out of range or a class is too small to use."""

    def __init__(self, message, label=None):
        super().__init__(message)
        self.label = label


class EmptySetError(HsiCnnError, ValueError):
    """An operation was handed no samples to work on."""


class UsageError(HsiCnnError, RuntimeError):
    """An API was called in the wrong order or with incompatible arguments."""
