"""Exception hierarchy shared across the package."""


class MonoSfMError(Exception):
    pass


class CheiralityViolation(MonoSfMError):
    pass


class InvalidDepth(MonoSfMError):
    pass


class OutOfBounds(MonoSfMError):
    pass


class InvalidNeighbor(MonoSfMError):
    pass


class ShapeMismatch(MonoSfMError):
    pass


class IndexOutOfRange(MonoSfMError):
    pass


class InsufficientMatches(MonoSfMError):
    pass


class DegenerateConfiguration(MonoSfMError):
    pass


class NoConsensus(MonoSfMError):
    pass


class BehindCamera(MonoSfMError):
    pass


class NoValidObservations(MonoSfMError):
    pass


class SolverFailure(MonoSfMError):
    pass


class SingularSystem(MonoSfMError):
    pass


class InitializationFailed(MonoSfMError):
    pass


class NoRegistrableView(MonoSfMError):
    pass


class NoCommonImages(MonoSfMError):
    pass


class PresetInvalid(MonoSfMError):
    pass


class ParseError(MonoSfMError):
    def __init__(self, path, where, message):
        self.path = str(path)
        self.where = where
        super().__init__(f"{path}:{where}: {message}")


class ValidationError(MonoSfMError):
    pass
