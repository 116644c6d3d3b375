"""Fitting primitives: weighted least squares and weighted logistic regression.

These are the only two model fits every estimator in the package needs. WLS is
solved through a rank-revealing orthogonal decomposition of the square-root
weighted design (balancing weights near zero make the normal equations badly
conditioned). Logistic regression is fit by iteratively reweighted least
squares with an explicit separation diagnostic; no regularization is applied
anywhere because the downstream estimating equations are unpenalized.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg
from scipy.special import expit

from .errors import RankDeficiencyError, SeparationError

__all__ = ["WlsFit", "LogisticFit", "wls_fit", "logistic_fit"]

#: |coefficient| beyond which a logistic fit is treated as separated;
#: expit(+-15) is numerically 0/1.
SEPARATION_THRESHOLD = 15.0
MAX_IRLS_ITERATIONS = 100
SCORE_TOL = 1e-9
DEVIANCE_RTOL = 1e-10
_PROB_CLAMP = 1e-12  # applied inside IRLS iterations only


@dataclass(frozen=True)
class WlsFit:
    coefficients: np.ndarray
    residuals: np.ndarray
    column_names: tuple[str, ...]
    full_rank: bool


@dataclass(frozen=True)
class LogisticFit:
    coefficients: np.ndarray
    converged: bool
    iterations: int
    fitted: np.ndarray


def _column_names(design: np.ndarray, names) -> tuple[str, ...]:
    if names is None:
        return tuple(f"col{k}" for k in range(design.shape[1]))
    return tuple(names)


def _dependent_columns(design: np.ndarray, rank: int, names: tuple[str, ...]) -> list[str]:
    # Pivoted QR: columns pivoted beyond the numerical rank form a dependent set.
    _, _, piv = scipy.linalg.qr(design, mode="economic", pivoting=True)
    return [names[k] for k in sorted(piv[rank:])]


def wls_fit(design, y, weights=None, column_names=None) -> WlsFit:
    """Solve argmin_b sum_i w_i (y_i - z_i b)^2.

    Parameters
    ----------
    design : (n, p) array.
    y : (n,) response.
    weights : (n,) nonnegative weights; rows with zero weight are ignored by
        the fit but still receive residuals.

    Raises
    ------
    ValueError : negative weights or too few (positively weighted) rows.
    RankDeficiencyError : design not of full column rank; names a dependent
        column set.
    """
    Z = np.asarray(design, dtype=float)
    y = np.asarray(y, dtype=float)
    n, p = Z.shape
    names = _column_names(Z, column_names)
    if weights is None:
        w = np.ones(n)
    else:
        w = np.asarray(weights, dtype=float)
        if np.any(w < 0):
            raise ValueError("weights must be nonnegative")
    if n < p:
        raise ValueError(f"need at least {p} rows, got {n}")
    active = w > 0
    if int(active.sum()) < p:
        raise ValueError(f"need at least {p} rows with positive weight")
    sw = np.sqrt(w[active])
    Zw = Z[active] * sw[:, None]
    yw = y[active] * sw
    beta, _, rank, _ = scipy.linalg.lstsq(Zw, yw, lapack_driver="gelsy")
    if rank < p:
        dep = _dependent_columns(Zw, rank, names)
        raise RankDeficiencyError(
            f"design is rank deficient (rank {rank} < {p}); dependent columns: {dep}",
            columns=dep,
        )
    residuals = y - Z @ beta
    return WlsFit(coefficients=beta, residuals=residuals, column_names=names, full_rank=True)


def logistic_fit(design, a, weights=None, column_names=None) -> LogisticFit:
    """Weighted Bernoulli-logit fit by iteratively reweighted least squares.

    Converges when max |score| / n <= 1e-9 or the relative deviance change is
    <= 1e-10, capped at 100 iterations. Raises SeparationError when any
    coefficient exceeds 15 in absolute value or the fit fails to converge,
    since both indicate complete or quasi-complete separation.
    """
    Z = np.asarray(design, dtype=float)
    avec = np.asarray(a, dtype=float)
    n, p = Z.shape
    names = _column_names(Z, column_names)
    if not np.all(np.isin(avec, (0.0, 1.0))):
        raise ValueError("response must be binary 0/1")
    if n < p:
        raise ValueError(f"need at least {p} rows, got {n}")
    if weights is None:
        w = np.ones(n)
    else:
        w = np.asarray(weights, dtype=float)
        if np.any(w < 0):
            raise ValueError("weights must be nonnegative")

    beta = np.zeros(p)
    deviance = np.inf
    converged = False
    iterations = 0
    for iterations in range(1, MAX_IRLS_ITERATIONS + 1):
        eta = Z @ beta
        prob = np.clip(expit(eta), _PROB_CLAMP, 1.0 - _PROB_CLAMP)
        score = Z.T @ (w * (avec - prob))
        if np.max(np.abs(score)) / n <= SCORE_TOL:
            converged = True
            break
        irls_w = w * prob * (1.0 - prob)
        z_work = eta + (avec - prob) / (prob * (1.0 - prob))
        sw = np.sqrt(irls_w)
        beta_new, _, rank, _ = scipy.linalg.lstsq(
            Z * sw[:, None], z_work * sw, lapack_driver="gelsy"
        )
        if rank < p:
            dep = _dependent_columns(Z * sw[:, None], rank, names)
            raise RankDeficiencyError(
                f"logistic design is rank deficient; dependent columns: {dep}",
                columns=dep,
            )
        beta = beta_new
        new_dev = -2.0 * float(
            np.sum(w * (avec * np.log(prob) + (1.0 - avec) * np.log1p(-prob)))
        )
        if np.isfinite(deviance) and abs(new_dev - deviance) <= DEVIANCE_RTOL * (
            abs(deviance) + 1.0
        ):
            converged = True
            deviance = new_dev
            break
        deviance = new_dev

    if np.max(np.abs(beta)) > SEPARATION_THRESHOLD or not converged:
        raise SeparationError(
            "logistic fit diverged (complete or quasi-complete separation is "
            "likely); revise the treatment model"
        )
    fitted = expit(Z @ beta)
    return LogisticFit(coefficients=beta, converged=converged, iterations=iterations, fitted=fitted)
