"""Bootstrap inference for blip parameters.

Two procedures are provided: the plain n-out-of-n nonparametric bootstrap with
percentile confidence intervals, and a data-adaptive m-out-of-n bootstrap for
the two-stage setting, where the estimated rule may sit close to a decision
boundary and the plain bootstrap undercovers. The adaptive procedure estimates
a nonregularity fraction p (the share of subjects whose second-stage decision
is not distinguishable from a tie), maps it to a subsample size
m = n^((1 + a(1 - p)) / (1 + a)), and tunes a through a double bootstrap:
nested replicates of size m are drawn within each first-stage replicate and a
is increased until the nested percentile intervals cover the original
estimates at the nominal rate for every monitored parameter.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from . import engine
from .errors import InferenceError, UnsupportedFeatureError
from .estimators import EstimatorKind, fit
from .model import StagedDataset, StageSpec

__all__ = [
    "BootstrapMode",
    "BootstrapConfig",
    "InferenceResult",
    "plain_bootstrap",
    "estimate_nonregularity",
    "choose_m",
    "adaptive_mn_bootstrap",
    "bootstrap_inference",
]

#: critical value of the normal-approximation intervals in the nonregularity
#: estimate (95% two-sided)
_Z_NONREGULARITY = 1.96

#: minimum fraction of replicates that must fit successfully
_MIN_SUCCESS = 0.95


class BootstrapMode(Enum):
    PLAIN = "plain"
    ADAPTIVE_MN = "adaptive_mn"


@dataclass(frozen=True)
class BootstrapConfig:
    """Tuning knobs shared by both bootstrap procedures.

    ``b1`` first-stage replicates, ``b2`` nested replicates per first-stage
    replicate (adaptive mode only), and the tuning grid for the subsample
    exponent ``alpha``.
    """

    b1: int = 500
    b2: int = 500
    alpha_start: float = 0.025
    alpha_step: float = 0.025
    alpha_cap: float = 0.5
    ci_level: float = 0.95
    seed: int = 0
    mode: BootstrapMode = BootstrapMode.PLAIN

    def __post_init__(self):
        if self.b1 < 1 or self.b2 < 1:
            raise ValueError("replicate counts must be at least 1")
        if self.alpha_start <= 0 or self.alpha_step <= 0:
            raise ValueError("alpha grid must be positive")
        if not 0.0 < self.ci_level < 1.0:
            raise ValueError("ci_level must lie in (0, 1)")


@dataclass(frozen=True)
class InferenceResult:
    """Point estimates with percentile confidence intervals.

    ``labels`` pairs each entry with its (stage, term name). ``replicates`` is
    the final-pass replicate estimate matrix (B1 x P). ``misordered`` flags
    parameters whose percentile interval fails lower <= point <= upper, which
    can happen legitimately under extreme skew and is recorded rather than
    rejected.
    """

    labels: tuple[tuple[int, str], ...]
    point: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    p_hat: float | None
    alpha_hat: float | None
    m_hat: int
    replicates: np.ndarray
    failures: int

    def __post_init__(self):
        if self.p_hat is not None and not 0.0 <= self.p_hat <= 1.0:
            raise ValueError("p_hat must lie in [0, 1]")
        if self.m_hat < 1:
            raise ValueError("m_hat must be at least 1")

    @property
    def misordered(self) -> tuple[int, ...]:
        bad = (self.lower > self.point) | (self.point > self.upper)
        return tuple(int(k) for k in np.flatnonzero(bad))


# ---------------------------------------------------------------------------
# Shared machinery


def _point_fit(dataset, specs, kind):
    stage_fits = fit(dataset, specs, kind)
    labels = tuple(
        (sf.stage, name) for sf in stage_fits for name in sf.psi_pats.terms.names
    )
    point = np.concatenate([sf.psi_pats.psi for sf in stage_fits])
    return stage_fits, labels, point


def _estimates_for_counts(dataset, specs, kind, counts) -> tuple[np.ndarray, np.ndarray]:
    """Replicate estimates for a batch of count-weight vectors.

    Uses the batched engine where it applies, falling back to one reference
    fit per replicate otherwise. Returns (estimates, failed mask).
    """
    if engine.supports(dataset, kind):
        eng = _cached_engine(dataset, tuple(specs))
        return eng.run(counts)
    out = None
    failed = np.zeros(counts.shape[0], dtype=bool)
    for b in range(counts.shape[0]):
        try:
            stage_fits = fit(dataset, specs, kind, base_weights=counts[b])
        except Exception:
            failed[b] = True
            continue
        est = np.concatenate([sf.psi_pats.psi for sf in stage_fits])
        if out is None:
            out = np.zeros((counts.shape[0], est.shape[0]))
        out[b] = est
    if out is None:
        raise InferenceError("every bootstrap replicate failed to fit")
    return out, failed


_ENGINE_CACHE: dict[int, tuple[tuple, "engine.CeDwolsEngine"]] = {}


def _cached_engine(dataset, specs_key):
    cached = _ENGINE_CACHE.get(id(dataset))
    if cached is not None and cached[0] == specs_key:
        return cached[1]
    eng = engine.CeDwolsEngine(dataset, list(specs_key))
    _ENGINE_CACHE.clear()  # keep at most one dataset's designs alive
    _ENGINE_CACHE[id(dataset)] = (specs_key, eng)
    return eng


def _bootstrap_estimates(dataset, specs, kind, b, size, rng):
    """Draw ``b`` with-replacement replicates of ``size`` subjects and refit.

    Failed replicates are redrawn; if the overall success rate cannot reach
    95% the procedure aborts with the observed failure rate.
    """
    n = dataset.n
    prob = np.full(n, 1.0 / n)
    counts = rng.multinomial(size, prob, size=b).astype(float)
    est, failed = _estimates_for_counts(dataset, specs, kind, counts)
    attempts = b
    total_failures = int(failed.sum())
    while failed.any():
        if attempts > b / _MIN_SUCCESS + 1:
            raise InferenceError(
                f"bootstrap fit failures persist: {total_failures}/{attempts} "
                "replicates failed (success rate below 95%)"
            )
        redo = np.flatnonzero(failed)
        counts[redo] = rng.multinomial(size, prob, size=len(redo))
        est_r, failed_r = _estimates_for_counts(dataset, specs, kind, counts[redo])
        est[redo] = est_r
        failed[redo] = failed_r
        attempts += len(redo)
        total_failures += int(failed_r.sum())
    return est, counts, total_failures


def _percentile_ci(replicates, ci_level):
    tail = (1.0 - ci_level) / 2.0
    lower = np.quantile(replicates, tail, axis=0)
    upper = np.quantile(replicates, 1.0 - tail, axis=0)
    return lower, upper


# ---------------------------------------------------------------------------
# Plain bootstrap


def plain_bootstrap(
    dataset: StagedDataset,
    specs: Sequence[StageSpec],
    kind: EstimatorKind,
    config: BootstrapConfig,
) -> InferenceResult:
    """n-out-of-n bootstrap with percentile confidence intervals."""
    _, labels, point = _point_fit(dataset, specs, kind)
    rng = np.random.default_rng([config.seed])
    replicates, _, failures = _bootstrap_estimates(
        dataset, specs, kind, config.b1, dataset.n, rng
    )
    lower, upper = _percentile_ci(replicates, config.ci_level)
    return InferenceResult(
        labels=labels,
        point=point,
        lower=lower,
        upper=upper,
        p_hat=None,
        alpha_hat=None,
        m_hat=dataset.n,
        replicates=replicates,
        failures=failures,
    )


# ---------------------------------------------------------------------------
# Nonregularity and the subsample size


def _stage2_slice(labels) -> slice:
    idx = [k for k, (stage, _) in enumerate(labels) if stage == 2]
    return slice(idx[0], idx[-1] + 1)


def _p_hat_from_replicates(rep2, tailoring_design, point2) -> float:
    """Fraction of subjects whose normal-approximation interval for the
    second-stage tailored blip contains zero."""
    cov = np.atleast_2d(np.cov(rep2, rowvar=False))
    center = tailoring_design @ point2
    var = np.einsum("np,pq,nq->n", tailoring_design, cov, tailoring_design)
    se = np.sqrt(np.maximum(var, 0.0))
    return float(np.mean(np.abs(center) <= _Z_NONREGULARITY * se))


def estimate_nonregularity(
    dataset: StagedDataset,
    specs: Sequence[StageSpec],
    kind: EstimatorKind,
    b1: int,
    seed: int,
) -> float:
    """Estimated nonregularity fraction p for a two-stage problem."""
    if dataset.n_stages != 2:
        raise UnsupportedFeatureError(
            "the nonregularity estimate is defined for two-stage problems only"
        )
    if b1 < 2:
        raise ValueError("need at least 2 replicates to estimate a covariance")
    _, labels, point = _point_fit(dataset, specs, kind)
    rng = np.random.default_rng([seed])
    replicates, _, _ = _bootstrap_estimates(dataset, specs, kind, b1, dataset.n, rng)
    s2 = _stage2_slice(labels)
    T2 = specs[1].tailoring_terms.design_matrix(dataset.history(2))
    return _p_hat_from_replicates(replicates[:, s2], T2, point[s2])


def choose_m(n: int, alpha: float, p_hat: float) -> int:
    """Subsample size m = round(n^((1 + alpha(1 - p)) / (1 + alpha))).

    p = 0 returns n exactly (the problem looks regular, no shrinking needed);
    the result is clamped to [1, n].
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    if not 0.0 <= p_hat <= 1.0:
        raise ValueError("p_hat must lie in [0, 1]")
    if p_hat == 0.0:
        return n
    exponent = (1.0 + alpha * (1.0 - p_hat)) / (1.0 + alpha)
    return int(min(n, max(1, round(float(n) ** exponent))))


# ---------------------------------------------------------------------------
# Adaptive m-out-of-n bootstrap


def adaptive_mn_bootstrap(
    dataset: StagedDataset,
    specs: Sequence[StageSpec],
    kind: EstimatorKind,
    config: BootstrapConfig,
) -> InferenceResult:
    """Data-adaptive m-out-of-n bootstrap for two-stage problems.

    Estimates the nonregularity fraction from a first-stage n-out-of-n
    bootstrap, then tunes the subsample exponent through a double bootstrap:
    for each candidate alpha, nested replicates of size m are drawn within
    every first-stage replicate, and alpha is accepted once the nested
    percentile intervals cover the original estimates at the nominal level
    for every blip parameter. When p = 0 the nested stage is skipped and the
    result coincides with the plain bootstrap.
    """
    if dataset.n_stages != 2:
        raise UnsupportedFeatureError(
            "the adaptive m-out-of-n bootstrap is defined for two-stage problems only"
        )
    n = dataset.n
    _, labels, point = _point_fit(dataset, specs, kind)
    rng1 = np.random.default_rng([config.seed])
    first_est, first_counts, failures = _bootstrap_estimates(
        dataset, specs, kind, config.b1, n, rng1
    )
    s2 = _stage2_slice(labels)
    T2 = specs[1].tailoring_terms.design_matrix(dataset.history(2))
    p_hat = _p_hat_from_replicates(first_est[:, s2], T2, point[s2])

    if p_hat == 0.0:
        lower, upper = _percentile_ci(first_est, config.ci_level)
        return InferenceResult(
            labels=labels,
            point=point,
            lower=lower,
            upper=upper,
            p_hat=0.0,
            alpha_hat=None,
            m_hat=n,
            replicates=first_est,
            failures=failures,
        )

    alpha = config.alpha_start
    alpha_index = 0
    history: list[tuple[float, int, np.ndarray]] = []
    while alpha <= config.alpha_cap + 1e-12:
        m = choose_m(n, alpha, p_hat)
        pass_fraction = _nested_pass_fractions(
            dataset, specs, kind, first_counts, point, m, config, alpha_index
        )
        history.append((alpha, m, pass_fraction))
        if np.all(pass_fraction >= config.ci_level):
            break
        alpha = round(alpha + config.alpha_step, 10)
        alpha_index += 1
    else:
        diag = "; ".join(
            f"alpha={a:g}, m={m}: min coverage {f.min():.3f}" for a, m, f in history
        )
        raise InferenceError(
            f"double-bootstrap tuning failed below the alpha cap {config.alpha_cap}: {diag}"
        )

    alpha_hat, m_hat, _ = history[-1]
    rng2 = np.random.default_rng([config.seed, 2])
    replicates, _, final_failures = _bootstrap_estimates(
        dataset, specs, kind, config.b1, m_hat, rng2
    )
    lower, upper = _percentile_ci(replicates, config.ci_level)
    return InferenceResult(
        labels=labels,
        point=point,
        lower=lower,
        upper=upper,
        p_hat=p_hat,
        alpha_hat=alpha_hat,
        m_hat=m_hat,
        replicates=replicates,
        failures=failures + final_failures,
    )


def _nested_pass_fractions(
    dataset, specs, kind, first_counts, point, m, config, alpha_index
) -> np.ndarray:
    """Per-parameter fraction of first-stage replicates whose nested
    percentile interval covers the original estimate."""
    n = dataset.n
    b1 = first_counts.shape[0]
    nested = np.empty((b1 * config.b2, n))
    for b in range(b1):
        rng = np.random.default_rng([config.seed, 1, alpha_index, b])
        nested[b * config.b2 : (b + 1) * config.b2] = rng.multinomial(
            m, first_counts[b] / n, size=config.b2
        )
    est, failed = _estimates_for_counts(dataset, specs, kind, nested)
    est = est.reshape(b1, config.b2, -1)
    failed = failed.reshape(b1, config.b2)
    covered = np.zeros((b1, est.shape[2]), dtype=bool)
    tail = (1.0 - config.ci_level) / 2.0
    for b in range(b1):
        good = est[b][~failed[b]]
        if len(good) < max(2, int(np.ceil(_MIN_SUCCESS * config.b2))):
            raise InferenceError(
                f"nested bootstrap failures exceed 5% within first-stage replicate {b}"
            )
        lo = np.quantile(good, tail, axis=0)
        hi = np.quantile(good, 1.0 - tail, axis=0)
        covered[b] = (lo <= point) & (point <= hi)
    return covered.mean(axis=0)


def bootstrap_inference(
    dataset: StagedDataset,
    specs: Sequence[StageSpec],
    kind: EstimatorKind,
    config: BootstrapConfig,
) -> InferenceResult:
    """Dispatch on the configured bootstrap mode."""
    if config.mode is BootstrapMode.ADAPTIVE_MN:
        return adaptive_mn_bootstrap(dataset, specs, kind, config)
    return plain_bootstrap(dataset, specs, kind, config)
