"""Exceptions raised across the simulator.

They all derive from the builtin exception a caller would expect (ValueError for
bad input, RuntimeError for a run that blew up, ...) so code that only knows about
builtins keeps working.
"""


class FederatedSplitError(Exception):
    """Base for every simulator-specific error."""


class DimensionError(FederatedSplitError, ValueError):
    """Shapes that cannot be combined."""


class NonFiniteError(FederatedSplitError, ArithmeticError):
    """A NaN or Inf showed up in a tensor."""


class ConfigError(FederatedSplitError, ValueError):
    """Invalid configuration value.

    Parameters
    ----------
    field : str
        Name of the offending configuration field.
    message : str
        What is wrong with it.
    """

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class UnknownParameterError(ConfigError, KeyError):
    """Configuration key that no schema knows about."""

    def __str__(self):
        return ValueError.__str__(self)


class SplitError(FederatedSplitError, ValueError):
    """Invalid split of a parameter set."""


class PartitionError(FederatedSplitError, ValueError):
    """A client partition cannot be satisfied by the dataset."""

    def __init__(self, message, label=None):
        self.label = label
        super().__init__(message)


class DivergenceError(FederatedSplitError, RuntimeError):
    """Local training produced a non-finite loss."""

    def __init__(self, round_index, client_id, message="non-finite loss"):
        self.round = round_index
        self.client_id = client_id
        super().__init__(f"round {round_index}, client {client_id}: {message}")


class PayloadFormatError(FederatedSplitError, ValueError):
    """Malformed wire or checkpoint buffer."""


class BadMagicError(PayloadFormatError):
    """Buffer does not start with the expected magic."""


class TruncatedPayloadError(PayloadFormatError):
    """Buffer ended before the declared content."""

    def __init__(self, offset, needed):
        self.offset = offset
        super().__init__(f"truncated payload at offset {offset}: needed {needed} more bytes")


class TrailingBytesError(PayloadFormatError):
    """Bytes left over after the declared entries."""


class UnsupportedVersionError(PayloadFormatError):
    """Format version this reader does not understand."""


class UnknownDTypeError(PayloadFormatError):
    """Entry dtype code outside the known set."""
