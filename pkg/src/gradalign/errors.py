"""Exception types shared across the package."""


class GradAlignError(Exception):
    """Base class for all package errors."""


# --- tensor engine ---------------------------------------------------------

class ShapeMismatch(GradAlignError):
    pass


class NonFinite(GradAlignError):
    pass


class NotScalar(GradAlignError):
    pass


class DetachedGraph(GradAlignError):
    pass


class UnknownComponent(GradAlignError):
    pass


class MissingGrad(GradAlignError):
    pass


# --- detector --------------------------------------------------------------

class BadResolution(GradAlignError):
    pass


# --- teacher / feature files -----------------------------------------------

class BadMagic(GradAlignError):
    pass


class VersionMismatch(GradAlignError):
    pass


class TruncatedPayload(GradAlignError):
    pass


class GridMismatch(GradAlignError):
    pass


# --- alignment -------------------------------------------------------------

class ZeroTarget(GradAlignError):
    pass


class ChannelMismatch(GradAlignError):
    pass


class MissingFeature(GradAlignError):
    pass


# --- controller ------------------------------------------------------------

class MissingComponent(GradAlignError):
    pass


class EmptyEpoch(GradAlignError):
    pass


class NonPositiveLambda(GradAlignError):
    pass


class DegenerateRatio(GradAlignError):
    pass


# --- checkpoints / config / cli --------------------------------------------

class ShapeMismatchOnLoad(GradAlignError):
    pass


class UnknownName(GradAlignError):
    pass


class BadCheckpoint(GradAlignError):
    pass


class BadConfig(GradAlignError):
    pass


class IoError(GradAlignError):
    pass
