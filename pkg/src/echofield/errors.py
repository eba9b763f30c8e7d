"""Shared exception types."""


class FormatError(ValueError):
    """A serialized artifact (dataset, checkpoint, frame) is malformed."""
