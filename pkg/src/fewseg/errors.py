"""Exception hierarchy shared by all modules.

Every error carries a stable class name so the CLI can print a single
machine-parsable line (``error: <ClassName>: <message>``).
"""


class FewSegError(Exception):
    """Base class for all package errors."""


# prompts
class NonSquareImage(FewSegError):
    pass


class DegenerateBox(FewSegError):
    pass


class InvalidRate(FewSegError):
    pass


class EmptyMask(FewSegError):
    pass


# shapes / checkpoints
class ShapeMismatch(FewSegError):
    pass


class GeometryMismatch(FewSegError):
    pass


class GridTooSmall(FewSegError):
    pass


class InvalidTau(FewSegError):
    pass


class NonFiniteInput(FewSegError):
    pass


class OutOfFrame(FewSegError):
    pass


# data
class DegenerateRange(FewSegError):
    pass


class NotEnoughData(FewSegError):
    pass


# training
class FrozenViolation(FewSegError):
    pass


class NonFiniteLoss(FewSegError):
    pass


# cli / config
class InvalidCombination(FewSegError):
    pass


class ConfigError(FewSegError):
    pass
