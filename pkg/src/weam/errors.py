"""Exception types shared across the package."""


class WeamError(Exception):
    pass


class DimensionError(WeamError, ValueError):
    pass


class DomainError(WeamError, ValueError):
    pass


class NumericInputError(WeamError, ValueError):
    pass


class ContractError(WeamError, ValueError):
    pass


class DeterminismError(WeamError):
    pass


class GradientCheckError(WeamError, AssertionError):
    pass


class VocabularyError(WeamError, IndexError):
    pass


class ConfigurationError(WeamError, ValueError):
    pass


class IntegrityError(WeamError):
    pass


class VersionError(IntegrityError):
    pass


class AlignmentError(WeamError, ValueError):
    pass


class EncodingError(WeamError, ValueError):
    pass


class DivergenceError(WeamError, RuntimeError):
    pass
