"""Shared exception for the binary file formats."""


class FormatError(ValueError):
    """A malformed container or model file.

    ``code`` is a stable machine-readable tag: ``bad_magic``, ``truncated``,
    ``extent_overflow``, ``bad_value``, or ``missing_config``.
    """

    def __init__(self, code, message):
        super().__init__(message)
        self.code = code
