"""Python access to the memlong retrieval-augmented language model."""

import json

from ._core import (
    VOCAB_SIZE,
    ConfigError,
    FormatError,
    LeakageError,
    Model,
    NumericalError,
    Session,
    ShapeError,
    TokenError,
    decode,
    encode,
    top_k,
)
from . import _core


def default_config():
    return json.loads(_core.default_config_json())


def new_model(**overrides):
    """Model with the default config updated by keyword overrides."""
    cfg = default_config()
    cfg.update(overrides)
    return Model(json.dumps(cfg))


def config_of(model):
    return json.loads(model.config_json)


def eval_perplexity(model, docs, lengths, memory, window):
    return json.loads(_core.eval_perplexity(model, docs, lengths, memory, window))


__all__ = [
    "VOCAB_SIZE",
    "ConfigError",
    "FormatError",
    "LeakageError",
    "Model",
    "NumericalError",
    "Session",
    "ShapeError",
    "TokenError",
    "config_of",
    "decode",
    "default_config",
    "encode",
    "eval_perplexity",
    "new_model",
    "top_k",
]
