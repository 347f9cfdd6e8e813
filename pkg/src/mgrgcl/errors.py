"""Exception hierarchy shared across the package."""


class MGRError(Exception):
    """Base class for every error raised by mgrgcl."""


class ValidationError(MGRError, ValueError):
    """Bad input or configuration detected before any work starts."""


class ZeroVector(ValidationError):
    pass


class DimensionMismatch(ValidationError):
    pass


class ShapeMismatch(ValidationError):
    pass


class InvalidConfig(ValidationError):
    def __init__(self, key, message):
        self.key = key
        super().__init__(f"{key}: {message}")


class TooManyParts(ValidationError):
    pass


class LabelOutOfRange(ValidationError):
    pass


class BadIndex(ValidationError):
    pass


class NonPositiveTemperature(ValidationError):
    pass


class LengthMismatch(ValidationError):
    pass


class EmptyInput(ValidationError):
    pass


class EmptyGroup(ValidationError):
    pass


class DegenerateBatch(MGRError):
    pass


class NotEnoughIdentities(MGRError):
    pass


class NoValidQueries(MGRError):
    pass


class AllNoise(MGRError):
    pass


class StaleCache(MGRError):
    pass


class FormatError(MGRError, IOError):
    """Malformed binary container."""


class BadMagic(FormatError):
    pass


class CorruptHeader(FormatError):
    pass
