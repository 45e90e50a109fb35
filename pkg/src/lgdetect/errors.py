"""Exception hierarchy shared across the package."""


class LgdetectError(Exception):
    """Base class for all package errors."""


class RankDeficient(LgdetectError):
    """A matrix that must be inverted has (numerically) deficient column rank."""


class SearchSpaceTooLarge(LgdetectError):
    pass


class LengthMismatch(LgdetectError):
    pass


class ShapeMismatch(LgdetectError):
    pass


class AnchorMismatch(LgdetectError):
    pass


class IncompatibleGeometry(LgdetectError):
    pass


class StrategyUnavailable(LgdetectError):
    pass


class EmptyLog(LgdetectError):
    pass


class ZeroVariance(LgdetectError):
    pass


class MissingSource(LgdetectError):
    pass


class MissingUnit(LgdetectError):
    pass


class ContainerError(LgdetectError):
    """Problem reading a manifest+blob container file."""


class FormatVersionMismatch(ContainerError):
    pass


class CorruptBlob(ContainerError):
    pass


class ConfigError(LgdetectError):
    pass


class DegenerateSER(LgdetectError):
    """Generalization error is undefined (reference SER zero or equal to the test SER)."""
