"""Exception hierarchy shared across the package."""


class EquiflowError(Exception):
    """Base class for all package errors."""


class ValidationError(EquiflowError, ValueError):
    """Bad input or configuration; the CLI maps these to exit code 1."""


# algebra
class DegeneratePoint(ValidationError):
    pass


class NonOrthogonal(ValidationError):
    pass


# tensors and layers
class ShapeMismatch(ValidationError):
    pass


class IndexOutOfRange(ValidationError):
    pass


class NotScalarLoss(ValidationError):
    pass


class OddChannelCount(ValidationError):
    pass


class EmptyAnchors(ValidationError):
    pass


class DuplicateAnchor(ValidationError):
    pass


# model
class ConfigMismatch(ValidationError):
    pass


class EmptyDataset(ValidationError):
    pass


class TooManyAnchors(ValidationError):
    pass


class NonPositiveRadius(ValidationError):
    pass


class ZeroScale(ValidationError):
    pass


# data
class AngleOutOfRange(ValidationError):
    pass


class NSFError(ValidationError):
    pass


class BadMagic(NSFError):
    pass


class VersionUnsupported(NSFError):
    pass


class TruncatedPayload(NSFError):
    pass


# training
class StepOutOfRange(ValidationError):
    pass


class ZeroReference(ValidationError):
    pass


class DivergedLoss(EquiflowError, RuntimeError):
    pass


# diagnostics
class NoDefinedAlignments(ValidationError):
    pass


class DegenerateTriangle(ValidationError):
    pass


class NonManifoldEdge(ValidationError):
    pass


class EigensolverNoConvergence(EquiflowError, RuntimeError):
    pass


class MixedDescriptorLength(ValidationError):
    pass


class TooFewPairs(ValidationError):
    pass


# cli
class UnknownSubcommand(ValidationError):
    pass


class InvalidConfig(ValidationError):
    pass
