"""Exception hierarchy shared by every module of the package."""


class DuaError(Exception):
    """Base class for all structured errors raised by ``dua``."""


class LayoutError(DuaError):
    """Inconsistent layer stack or a batch that does not fit the layout."""


class ShapeError(DuaError):
    pass


class LabelError(DuaError):
    """Label out of range, or labels requested from an unlabeled dataset."""


class EmptyDatasetError(DuaError):
    pass


class DatasetReleasedError(DuaError):
    """A dataset handle was read after its owner discarded it."""


class ConfigError(DuaError):
    pass


class MergeError(DuaError):
    pass


class AdaptError(DuaError):
    pass


class TaskOverlapError(DuaError):
    """Two tasks claim the same class."""


class ProtocolError(DuaError):
    pass


class WireFormatError(ProtocolError):
    """Malformed, truncated, or corrupted wire message."""


class IdxFormatError(DuaError):
    pass
