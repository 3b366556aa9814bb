"""Exception types shared across the package."""


class GradingError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(GradingError):
    """An operand has an incompatible shape; the message names the offending dimension."""


class ManifestError(GradingError):
    """A manifest file is malformed; the message carries the row number where known."""


class ContainerError(GradingError):
    """Base class for embedding-container format errors."""


class BadMagicError(ContainerError):
    """The file does not start with the expected magic bytes."""


class VersionMismatchError(ContainerError):
    """The container declares an unsupported format version."""


class ChecksumMismatchError(ContainerError):
    """The footer checksum does not match the file contents."""


class TruncatedContainerError(ContainerError):
    """The file ends before the declared payload/footer."""
