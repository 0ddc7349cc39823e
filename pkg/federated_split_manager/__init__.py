"""Federated Split Manager."""

from .exceptions import (
    BadMagicError,
    ConfigError,
    DimensionError,
    DivergenceError,
    FederatedSplitError,
    NonFiniteError,
    PartitionError,
    PayloadFormatError,
    SplitError,
    TrailingBytesError,
    TruncatedPayloadError,
    UnknownDTypeError,
    UnknownParameterError,
    UnsupportedVersionError,
)
from .experiment import load_config, load_manager, run_experiment, sweep
from .models.transformer.transformer import SplitTransformerModel
from .outputs import load_checkpoint, save_checkpoint
from .the_manager import FederatedSplitManager
