"""Construction of the weight vectors used by the estimators.

Four kinds are provided: overlap-style balancing weights |A - E[A|H]|, the
usual inverse-probability-of-treatment weights, the ratio weights
P(A|H*)/P(A|H) that correct confounding by non-tailoring covariates, and
truncated inverse-probability-of-censoring weights.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import glm
from .errors import PositivityError

__all__ = [
    "WeightKind",
    "WeightVector",
    "balancing_weights",
    "iptw_weights",
    "ratio_weights",
    "censoring_weights",
]

_POSITIVITY_EPS = 1e-12


class WeightKind(Enum):
    BALANCING = "balancing"
    IPTW = "iptw"
    RATIO = "ratio"
    CENSORING = "censoring"
    PRODUCT = "product"


@dataclass(frozen=True)
class WeightVector:
    """Nonnegative per-subject weights with provenance."""

    values: np.ndarray
    kind: WeightKind
    note: str = ""

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if np.any(~np.isfinite(v)) or np.any(v < 0):
            raise ValueError("weights must be finite and nonnegative")
        object.__setattr__(self, "values", v)

    def __mul__(self, other: "WeightVector") -> "WeightVector":
        return WeightVector(
            self.values * other.values,
            WeightKind.PRODUCT,
            note=f"({self.note or self.kind.value}) * ({other.note or other.kind.value})",
        )

    def __len__(self) -> int:
        return len(self.values)


def _check_propensities(e: np.ndarray, label: str) -> np.ndarray:
    e = np.asarray(e, dtype=float)
    if np.any(e <= 0.0) or np.any(e >= 1.0):
        raise ValueError(f"{label} must lie strictly in (0, 1)")
    return e


def balancing_weights(a, e) -> WeightVector:
    """Overlap balancing weights w_i = |a_i - e_i|."""
    a = np.asarray(a, dtype=float)
    e = _check_propensities(e, "propensities")
    return WeightVector(np.abs(a - e), WeightKind.BALANCING, note="|A - E[A|H]|")


def iptw_weights(a, e) -> WeightVector:
    """Inverse probability of treatment weights a/e + (1-a)/(1-e)."""
    a = np.asarray(a, dtype=float)
    e = _check_propensities(e, "propensities")
    return WeightVector(a / e + (1.0 - a) / (1.0 - e), WeightKind.IPTW, note="1/P(A|H)")


def ratio_weights(a, e_star, e_full) -> WeightVector:
    """Ratio weights P(A = a | H*) / P(A = a | H).

    ``e_star`` and ``e_full`` are fitted P(A = 1 | .) under the tailoring-only
    and full-history treatment models.
    """
    a = np.asarray(a, dtype=float)
    e_star = _check_propensities(e_star, "tailoring propensities")
    e_full = np.asarray(e_full, dtype=float)
    denom = a * e_full + (1.0 - a) * (1.0 - e_full)
    if np.any(denom <= _POSITIVITY_EPS):
        raise PositivityError(
            "full-history propensity is numerically 0/1 for some subject; "
            "the ratio weight is undefined (positivity violation)"
        )
    numer = a * e_star + (1.0 - a) * (1.0 - e_star)
    return WeightVector(numer / denom, WeightKind.RATIO, note="P(A|H*)/P(A|H)")


def censoring_weights(censored, design, truncation_quantile: float = 0.999) -> WeightVector:
    """Truncated inverse-probability-of-censoring weights.

    Fits a logistic model for P(uncensored | design), assigns 1/P(uncensored)
    to uncensored subjects and 0 to censored subjects, then caps the weights at
    the given empirical quantile of the *uncensored* weights (linearly
    interpolated order statistics).
    """
    if not 0.5 < truncation_quantile <= 1.0:
        raise ValueError("truncation quantile must lie in (0.5, 1]")
    c = np.asarray(censored).astype(bool)
    if not c.any():  # nobody censored: P(uncensored) = 1 everywhere
        return WeightVector(np.ones(len(c)), WeightKind.CENSORING, note="no censoring")
    uncensored = (~c).astype(float)
    fit = glm.logistic_fit(design, uncensored)
    w = np.zeros(len(c))
    w[~c] = 1.0 / fit.fitted[~c]
    cap = float(np.quantile(w[~c], truncation_quantile))
    np.minimum(w, cap, out=w)
    return WeightVector(w, WeightKind.CENSORING, note=f"IPCW truncated at q={truncation_quantile}")
