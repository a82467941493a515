"""Exception types shared across the package."""


class WordLMError(Exception):
    """Base class for all package errors."""


class ConfigError(WordLMError):
    """Invalid configuration, flags, or preconditions the caller controls."""


class CorpusError(WordLMError):
    """Corpus ingestion or statistics failures (empty corpus, bad encoding)."""


class MaskError(WordLMError):
    """Attention mask invariant violated (e.g. a fully masked query row)."""


class NonFiniteError(WordLMError):
    """A tensor op produced NaN or Inf."""


class SchemeMismatchError(ConfigError):
    """Checkpoint and requested tokenizer scheme disagree."""
