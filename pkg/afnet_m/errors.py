class AFNetError(Exception):
    """Base class for every error raised by afnet_m."""


class ShapeError(AFNetError, ValueError):
    pass


class ConfigError(AFNetError, ValueError):
    pass


class LabelError(AFNetError, ValueError):
    pass


class ContractError(AFNetError, RuntimeError):
    """A caller broke a documented precondition (non-scalar loss, missing gradient, ...)."""


class InputError(AFNetError, ValueError):
    pass


class DataError(AFNetError, ValueError):
    pass


class LayerLookupError(AFNetError, KeyError):
    pass


class TensorFileError(AFNetError, IOError):
    pass
