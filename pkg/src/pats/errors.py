"""Exception hierarchy shared across the package."""

from __future__ import annotations


class PatsError(Exception):
    """Base class for all errors raised by this package."""


class SpecificationError(PatsError):
    """A model specification references data that does not exist or is malformed."""


class RankDeficiencyError(PatsError):
    """A design matrix (or estimating-equation system) is rank deficient."""

    def __init__(self, message: str, columns: list[str] | None = None):
        super().__init__(message)
        self.columns = columns or []


class SeparationError(PatsError):
    """Logistic fit diverged, indicating complete or quasi-complete separation."""


class PositivityError(PatsError):
    """A fitted propensity is numerically 0 or 1 where a positive probability is required."""


class EstimationError(PatsError):
    """An estimator failed; carries the stage where the failure happened."""

    def __init__(self, message: str, stage: int | None = None):
        super().__init__(message)
        self.stage = stage


class InferenceError(PatsError):
    """Bootstrap inference failed (persistent refit failures or tuning failure)."""


class UnsupportedFeatureError(PatsError):
    """The requested configuration is declared out of scope."""
