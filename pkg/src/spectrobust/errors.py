"""Exception types raised across the package."""


class SpectrobustError(Exception):
    """Base class for all package errors."""


class ShapeMismatch(SpectrobustError, ValueError):
    pass


class InvalidAxis(SpectrobustError, ValueError):
    pass


class NotScalar(SpectrobustError, ValueError):
    pass


class NonSymmetricSpectrum(SpectrobustError, ValueError):
    """Inverse transform of a spectrum left a non-negligible imaginary part."""


class EmptyBand(SpectrobustError, ValueError):
    pass


class IndivisiblePatch(SpectrobustError, ValueError):
    pass


class DivergedTraining(SpectrobustError, RuntimeError):
    pass


class CorruptCheckpoint(SpectrobustError, ValueError):
    pass


class TooSmallImage(SpectrobustError, ValueError):
    pass


class NoResults(SpectrobustError, ValueError):
    pass


class ZeroDistortion(SpectrobustError, ValueError):
    pass


class DegenerateShift(SpectrobustError, ValueError):
    pass


class EmptyTrace(SpectrobustError, ValueError):
    pass


class ConstantMap(SpectrobustError, ValueError):
    pass


class MalformedIdx(SpectrobustError, ValueError):
    pass


class LabelOutOfRange(SpectrobustError, ValueError):
    pass
