"""Exception types shared across the engine.

The CLI maps these onto the stable exit-code contract: input/corpus/config
problems exit 2, checkpoint problems exit 3, anything else exits 1.
"""


class AreilError(Exception):
    """Base class for engine errors."""


class InputError(AreilError):
    """Problems with user-supplied files, configs, or arguments (exit 2)."""


class CorpusError(InputError):
    pass


class ParseError(CorpusError):
    pass


class EmptyDatasetError(CorpusError):
    pass


class AlignmentError(CorpusError):
    pass


class GraphConstructionError(CorpusError):
    pass


class ConfigError(InputError):
    pass


class ShapeError(AreilError):
    pass


class NumericError(AreilError):
    pass


class SamplingError(AreilError):
    pass


class CheckpointError(AreilError):
    """Problems reading or validating checkpoint files (exit 3)."""


class MagicError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass
