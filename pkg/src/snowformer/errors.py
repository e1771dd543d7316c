"""Exception hierarchy shared across the package."""


class SnowformerError(Exception):
    """Base class for all package errors."""


class ShapeMismatch(SnowformerError):
    pass


class DTypeMismatch(SnowformerError):
    pass


class InvalidStride(SnowformerError):
    pass


class NotDivisible(SnowformerError):
    pass


class CountMismatch(SnowformerError):
    pass


class BroadcastMismatch(SnowformerError):
    pass


class NonFiniteError(SnowformerError):
    """An op produced NaN/Inf; surfaced immediately instead of propagating."""


class NotScalar(SnowformerError):
    pass


class DetachedLoss(SnowformerError):
    pass


class InvalidConfig(SnowformerError):
    pass


class InvalidTile(SnowformerError):
    pass


class ImageTooSmall(SnowformerError):
    pass


class IoError(SnowformerError):
    pass


class UnsupportedFormat(SnowformerError):
    pass


class MissingImageDir(SnowformerError):
    pass


class ManifestMismatch(SnowformerError):
    pass


class MissingWeights(SnowformerError):
    pass


class NonFiniteLoss(SnowformerError):
    pass


class BadMagic(SnowformerError):
    pass


class VersionMismatch(SnowformerError):
    pass


class TensorCountMismatch(SnowformerError):
    pass
