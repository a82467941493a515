"""Word-level hierarchical language modeling with learned byte pooling."""

from .errors import (
    ConfigError,
    CorpusError,
    MaskError,
    NonFiniteError,
    SchemeMismatchError,
    WordLMError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "CorpusError",
    "MaskError",
    "NonFiniteError",
    "SchemeMismatchError",
    "WordLMError",
    "__version__",
]
