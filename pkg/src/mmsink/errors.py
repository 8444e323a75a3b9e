"""Shared exception types."""


class SequenceGrammarError(ValueError):
    """A token stream violates the interleaved text/image block grammar."""


class StoryFormatError(ValueError):
    """A story file line failed to parse or validate."""


class StateError(RuntimeError):
    """An operation was invoked in a state it does not support."""


class ConfigError(ValueError):
    """Invalid run, policy, or model configuration."""


class TrainingDiverged(RuntimeError):
    """A non-finite loss was encountered during training."""
