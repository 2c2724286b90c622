"""Glyph recognition: synthetic corpora, trained-model inference, gradient checks."""

from ._core import (
    ConfigError,
    ContractError,
    DataError,
    DimensionError,
    NumericError,
    Predictor,
    SizingError,
    default_config,
    evaluate,
    gradcheck_op,
    normalize_config,
    op_names,
    read_pgm,
    synth,
    write_pgm,
)

__all__ = [
    "ConfigError",
    "ContractError",
    "DataError",
    "DimensionError",
    "NumericError",
    "Predictor",
    "SizingError",
    "default_config",
    "evaluate",
    "gradcheck_op",
    "normalize_config",
    "op_names",
    "read_pgm",
    "synth",
    "write_pgm",
]
