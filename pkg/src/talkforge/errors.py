"""Exception types shared across the library."""


class TalkForgeError(Exception):
    """Base class for all talkforge errors."""


class ShapeError(TalkForgeError):
    """Operand shapes are incompatible; the message names both shapes."""


class ContractError(TalkForgeError):
    """An operation precondition was violated."""


class VocabError(TalkForgeError):
    """A token or table index is out of range."""


class CacheError(TalkForgeError):
    """Tensors offered to a KV cache do not match its geometry."""


class AlignmentError(TalkForgeError):
    """Two sequences that must be index-aligned have different lengths."""


class ArityError(TalkForgeError):
    """A codebook frame does not carry the expected number of tracks."""


class DegenerateBatchError(TalkForgeError):
    """Every position in a batch was masked out."""


class DeterminismError(TalkForgeError):
    """A function expected to be deterministic returned differing values."""


class NaNError(TalkForgeError):
    """A numeric input contains NaN."""


class FeatureError(TalkForgeError):
    """Feature frames do not match the codec's width."""


class DataError(TalkForgeError):
    """Not enough data for the requested procedure."""


class StagingError(TalkForgeError):
    """A training stage is missing a prerequisite checkpoint."""


class PipelineError(TalkForgeError):
    """A pipeline stage failed; the message names the stage."""


class SessionClosedError(TalkForgeError):
    """Decoding was requested on a session that already emitted EOS."""


class CheckpointError(TalkForgeError):
    """A weight checkpoint file is malformed or does not match the model."""
