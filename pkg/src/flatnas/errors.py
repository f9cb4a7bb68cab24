"""Exception types raised across the toolkit."""

from __future__ import annotations


class FlatNASError(Exception):
    """Base class for all toolkit errors."""


class EnumerationCapExceeded(FlatNASError):
    pass


class SpaceMismatch(FlatNASError):
    pass


class ParseError(FlatNASError):
    pass


class ShapeMismatch(FlatNASError):
    pass


class NonFiniteLoss(FlatNASError):
    pass


class NonFiniteGradient(FlatNASError):
    def __init__(self, message: str, step: int | None = None) -> None:
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class ZeroVector(FlatNASError):
    pass


class InvalidParameter(FlatNASError, ValueError):
    pass


class UnknownSplit(FlatNASError, KeyError):
    pass


class LengthMismatch(FlatNASError, ValueError):
    pass


class Undefined(FlatNASError, ValueError):
    """Rank correlation is undefined (one input entirely tied)."""


class GenotypeSetMismatch(FlatNASError):
    pass


class InfeasibleConfig(FlatNASError, ValueError):
    pass


class EmptyHistory(FlatNASError):
    pass


class MissingOracle(FlatNASError):
    pass


class ScorerFailure(FlatNASError):
    def __init__(self, genotype, cause: BaseException) -> None:
        super().__init__(f"scorer failed on {genotype}: {cause!r}")
        self.genotype = genotype
        self.cause = cause


class CheckpointError(FlatNASError):
    pass
