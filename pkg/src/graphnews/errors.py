"""Exception types shared across the package.

Each error marks the violation of a documented contract; callers that can
recover catch the specific class, the CLI maps any of them to exit code 2.
"""


class GraphNewsError(Exception):
    """Base class for all errors raised by this package."""


class EmptyTextError(GraphNewsError, ValueError):
    """Tokenizing produced no tokens."""


class EmptyCorpusError(GraphNewsError, ValueError):
    """Vocabulary construction got an empty corpus."""


class EmptyBatchError(GraphNewsError, ValueError):
    """Graph batching got an empty list."""


class IdOutOfRangeError(GraphNewsError, ValueError):
    """A token id does not fit the embedding table."""


class DimensionMismatchError(GraphNewsError, ValueError):
    """Tensor widths disagree with the layer or operation contract."""


class EmptyGraphError(GraphNewsError, ValueError):
    """A graph index in a batch vector has no nodes to pool."""


class BackboneWeightsMissingError(GraphNewsError, FileNotFoundError):
    """A pretrained backbone was requested without a weights file."""


class CheckpointMismatchError(GraphNewsError, RuntimeError):
    """Checkpoint arrays do not match the model built from its config."""


class InvalidLabelError(GraphNewsError, ValueError):
    """A class label is outside the real/fake binary convention."""


class ParseError(GraphNewsError, ValueError):
    """A manifest file is malformed."""


class MissingImageRootError(GraphNewsError, FileNotFoundError):
    """The image root directory of a manifest does not exist."""


class DecodeError(GraphNewsError, ValueError):
    """An image file could not be decoded."""


class TooFewSamplesError(GraphNewsError, ValueError):
    """Not enough samples to split into train and validation sets."""


class LengthMismatchError(GraphNewsError, ValueError):
    """Predictions and labels have different lengths."""


class NonFiniteLossError(GraphNewsError, RuntimeError):
    """Training produced a NaN or infinite loss."""


class EmptyHistoryError(GraphNewsError, ValueError):
    """A training history with no epochs cannot be plotted."""
