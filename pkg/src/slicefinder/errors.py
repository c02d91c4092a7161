"""Exception hierarchy shared by all slicefinder modules."""


class SliceFinderError(Exception):
    """Base class for every error raised by this package."""


# --- file I/O ---------------------------------------------------------------

class MissingFile(SliceFinderError):
    pass


class MalformedHeader(SliceFinderError):
    pass


class SizeMismatch(SliceFinderError):
    pass


class MalformedImage(SliceFinderError):
    pass


class IoError(SliceFinderError):
    pass


# --- rasters ----------------------------------------------------------------

class IndexOutOfRange(SliceFinderError):
    pass


class AnisotropicSlice(SliceFinderError):
    pass


class AnisotropicVolume(SliceFinderError):
    pass


class EmptyOutput(SliceFinderError):
    pass


class DimsTooSmall(SliceFinderError):
    pass


class DimMismatch(SliceFinderError):
    pass


# --- transforms and estimation ----------------------------------------------

class SingularTransform(SliceFinderError):
    pass


class DegenerateConfiguration(SliceFinderError):
    pass


class ExcessiveDeformation(SliceFinderError):
    pass


# --- metrics ----------------------------------------------------------------

class ZeroVariance(SliceFinderError):
    pass


class NoOverlap(SliceFinderError):
    pass


class InsufficientContrast(SliceFinderError):
    pass


class LabelAbsentEverywhere(SliceFinderError):
    pass


class DegenerateX(SliceFinderError):
    pass


# --- block matching ----------------------------------------------------------

class NoValidBlocks(SliceFinderError):
    pass


class TooManyLevels(SliceFinderError):
    pass


# --- matching / cartography ---------------------------------------------------

class AllPairsFailed(SliceFinderError):
    pass


class AllUndefined(SliceFinderError):
    pass


class PreprocessMismatch(SliceFinderError):
    pass


class EmptyCartography(SliceFinderError):
    pass
