class StyleTransferError(Exception):
    pass


class ShapeError(StyleTransferError):
    pass


class NumericError(StyleTransferError):
    pass


class RangeError(StyleTransferError):
    pass


class ConfigurationError(StyleTransferError):
    pass


class MissingGradientError(StyleTransferError):
    pass


class OrderingError(StyleTransferError):
    pass


class CacheMissError(StyleTransferError):
    pass


class NormalizationError(StyleTransferError):
    pass


class CheckpointError(StyleTransferError):
    pass


class TrainingDivergedError(NumericError):
    pass


class DegenerateInputWarning(UserWarning):
    pass
