"""Exception types shared across the package."""


class PointPairError(Exception):
    """Base class for all package-specific errors."""


class InvalidTransformError(PointPairError):
    """A geometric transform produced or would produce non-finite coordinates."""


class EmptyViewError(PointPairError):
    """A depth frame contains no valid pixels, so no view can be constructed."""


class DegenerateBatchError(PointPairError):
    """An operation requires more active sites than were provided."""


class FormatError(PointPairError):
    """A binary or text artifact does not conform to its documented layout."""


class ConfigError(PointPairError):
    """A configuration file or value failed validation."""
