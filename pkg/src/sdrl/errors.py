"""Exception hierarchy shared across the package."""


class SdrlError(Exception):
    """Base class for all package-specific errors."""


class ShapeMismatch(SdrlError):
    """Operands have incompatible shapes for the requested operation."""


class UnknownOpKind(SdrlError):
    """forward_op was asked for an operation kind that is not registered."""


class NonFiniteValue(SdrlError):
    """A NaN or Inf appeared while debug validation is enabled."""


class GraphConsumed(SdrlError):
    """backward() was called twice on the same graph without a re-forward."""


class NonBinaryMask(SdrlError):
    """A mask contained values other than 0 and 1."""


class NonIntegerRatio(SdrlError):
    """Mask resize requires an integer source/target size ratio."""


class InvalidRegion(SdrlError):
    """A pooled region vector marked invalid was used in a loss term."""


class AllRegionsInvalid(SdrlError):
    """No similarity term is computable for a sample."""


class SceneTooSmall(SdrlError):
    """Scene dimensions are smaller than the requested patch size."""


class ConfigInvalid(SdrlError):
    """A configuration document failed schema validation."""


class EmptyDataset(SdrlError):
    """An operation that needs records received none."""


class DataMissing(SdrlError):
    """A manifest or a file it references does not exist."""


class NonFiniteLoss(SdrlError):
    """Training produced a NaN/Inf loss; aborting instead of skipping."""


class CheckpointIncompatible(SdrlError):
    """A checkpoint does not match the model it is being loaded into."""


class CheckpointCorrupt(SdrlError):
    """A checkpoint file failed structural validation."""


class BatchTooSmall(SdrlError):
    """A statistic needs at least two batch elements."""
