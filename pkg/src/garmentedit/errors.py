"""Exception types shared across the package."""


class GarmentEditError(Exception):
    pass


class ShapeMismatch(GarmentEditError, ValueError):
    pass


class DomainError(GarmentEditError, ValueError):
    pass


class InvalidAxis(GarmentEditError, ValueError):
    pass


class EmptyReduction(GarmentEditError, ValueError):
    pass


class NotScalar(GarmentEditError, ValueError):
    pass


class DetachedTensor(GarmentEditError, ValueError):
    pass


class NonFiniteError(GarmentEditError, FloatingPointError):
    pass


class InvalidInjectionStage(GarmentEditError, KeyError):
    pass


class UnknownTarget(GarmentEditError, ValueError):
    pass


class UnparseablePrompt(GarmentEditError, ValueError):
    pass


class UnknownLabel(GarmentEditError, KeyError):
    pass


class BadImageRange(GarmentEditError, ValueError):
    pass


class DegenerateVector(GarmentEditError, ValueError):
    pass


class SourceEqualsTarget(GarmentEditError, ValueError):
    pass


class EmptyLexicon(GarmentEditError, ValueError):
    pass


class NonFiniteLoss(GarmentEditError, FloatingPointError):
    def __init__(self, step, components):
        self.step = step
        self.components = dict(components)
        super().__init__(f"non-finite loss at step {step}: {self.components}")


class CorruptCheckpoint(GarmentEditError, ValueError):
    pass


class VersionMismatch(GarmentEditError, ValueError):
    pass


class ConfigError(GarmentEditError, ValueError):
    pass
