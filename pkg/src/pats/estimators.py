"""The eight treatment-strategy estimators.

Every estimator is a backward recursion over stages j = K..1. At each stage a
full-history blip is estimated (by weighted least squares with balancing
weights, or by the closed-form G-estimation system), pseudo-outcomes are
propagated from later stages, and the partially adaptive variants additionally
produce a tailored blip, either through reweighting (the IPTW variants) or by
marginalizing an intermediate full-history blip over the non-tailoring
covariates (the integrate / CE variants).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Sequence

import numpy as np

from . import glm
from .errors import (
    EstimationError,
    RankDeficiencyError,
    SpecificationError,
    UnsupportedFeatureError,
)
from .model import BlipCoefficients, BlipKind, StagedDataset, StageSpec, TermList
from .weights import WeightVector, balancing_weights, iptw_weights, ratio_weights

__all__ = [
    "EstimatorKind",
    "StageFit",
    "PseudoOutcome",
    "fit",
    "dwols_stage",
    "gest_stage",
    "iptw_pats_stage",
    "dagger_stage",
    "integrate_marginalize",
    "ce_marginalize",
    "make_pseudo_outcomes",
]

#: maximum number of observed levels before a non-tailoring blip covariate is
#: treated as continuous (which the integrate marginalization does not support)
INTEGRATE_MAX_LEVELS = 25


class EstimatorKind(Enum):
    DWOLS = "dwols"
    GEST = "gest"
    IPTW_DWOLS = "iptw_dwols"
    IPTW_GEST = "iptw_gest"
    INTEGRATE_DWOLS = "integrate_dwols"
    INTEGRATE_GEST = "integrate_gest"
    CE_DWOLS = "ce_dwols"
    CE_GEST = "ce_gest"

    @property
    def is_pats(self) -> bool:
        return self not in (EstimatorKind.DWOLS, EstimatorKind.GEST)

    @property
    def uses_gest(self) -> bool:
        return self in (
            EstimatorKind.GEST,
            EstimatorKind.IPTW_GEST,
            EstimatorKind.INTEGRATE_GEST,
            EstimatorKind.CE_GEST,
        )

    @property
    def is_iptw(self) -> bool:
        return self in (EstimatorKind.IPTW_DWOLS, EstimatorKind.IPTW_GEST)

    @property
    def marginalizes(self) -> bool:
        return self in (
            EstimatorKind.INTEGRATE_DWOLS,
            EstimatorKind.INTEGRATE_GEST,
            EstimatorKind.CE_DWOLS,
            EstimatorKind.CE_GEST,
        )


@dataclass(frozen=True)
class StageFit:
    """Per-stage estimation result.

    ``psi_ats`` is the full-history blip over ``blip_terms``. ``psi_pats`` is
    the tailored blip over ``tailoring_terms``. ``psi_dagger`` is the
    intermediate full-history blip fitted against the tailored pseudo-outcome;
    for the non-marginalizing kinds it coincides with ``psi_ats`` by
    construction (at the last stage the two fits are the same computation).
    """

    stage: int
    psi_ats: BlipCoefficients
    psi_dagger: BlipCoefficients
    psi_pats: BlipCoefficients
    beta: np.ndarray
    beta_names: tuple[str, ...]
    diagnostics: dict = field(default_factory=dict)


@dataclass(frozen=True)
class PseudoOutcome:
    stage: int
    values: np.ndarray


# ---------------------------------------------------------------------------
# Matrix-level solvers (shared by the public stage operations and by fit())


def _split_wls(Xtf, B, a, y, w, tf_names, blip_names):
    """WLS of y on [treatment-free design, a x blip design]; returns (psi, beta)."""
    Z = np.hstack([Xtf, a[:, None] * B])
    names = list(tf_names) + [f"a*{nm}" for nm in blip_names]
    f = glm.wls_fit(Z, y, w, column_names=names)
    q = Xtf.shape[1]
    return f.coefficients[q:], f.coefficients[:q]


def _gest_solve(Xtf, B, a, e, y, w, varpi=None):
    """Closed-form G-estimation system, jointly in (psi, beta).

    Instruments stack the S-residuals (a - e) b_i (optionally ratio-weighted)
    over the treatment-free design; regressors stack a b_i over the
    treatment-free design. Linear outcome models keep the system linear.
    """
    s_resid = (a - e)[:, None] * B
    if varpi is not None:
        s_resid = varpi[:, None] * s_resid
    inst = np.hstack([s_resid, Xtf])
    reg = np.hstack([a[:, None] * B, Xtf])
    lhs = inst.T @ (w[:, None] * reg)
    rhs = inst.T @ (w * y)
    try:
        theta = np.linalg.solve(lhs, rhs)
    except np.linalg.LinAlgError:
        raise RankDeficiencyError(
            "G-estimation system is singular: the S-residuals are collinear "
            "with the treatment-free design"
        ) from None
    p = B.shape[1]
    return theta[:p], theta[p:]


def _balancing(a, e, weight_form: str) -> np.ndarray:
    if weight_form == "overlap":
        return balancing_weights(a, e).values
    if weight_form == "iptw":
        return iptw_weights(a, e).values
    raise SpecificationError(f"unknown balancing weight form {weight_form!r}")


def _tailoring_cells(history, tailoring_columns):
    cols = sorted(tailoring_columns)
    if cols:
        mat = np.column_stack([np.asarray(history[c], dtype=float) for c in cols])
    else:
        mat = np.zeros((len(next(iter(history.values()))), 0))
    _, inverse = np.unique(mat, axis=0, return_inverse=True)
    return cols, mat, inverse


def _integrate_solve(history, blip_terms, tailoring_terms, tailoring_columns, psi_dagger, w):
    """Marginalize a full-history blip over the non-tailoring covariates using
    within-cell empirical frequencies, then express the per-cell values in the
    tailoring basis (exact when saturated, weighted least squares otherwise)."""
    hc_cols = blip_terms.columns() - set(tailoring_columns)
    for c in hc_cols:
        if len(np.unique(np.asarray(history[c]))) > INTEGRATE_MAX_LEVELS:
            raise UnsupportedFeatureError(
                f"non-tailoring blip covariate {c!r} looks continuous "
                f"(> {INTEGRATE_MAX_LEVELS} observed levels); the integrate "
                "marginalization supports discrete covariates only"
            )
    B = blip_terms.design_matrix(history)
    T = tailoring_terms.design_matrix(history)
    q = B @ psi_dagger
    cols, mat, inverse = _tailoring_cells(history, tailoring_columns)
    n_cells = int(inverse.max()) + 1
    cell_w = np.bincount(inverse, weights=w, minlength=n_cells)
    for cell in np.flatnonzero(cell_w <= 0.0):
        first = int(np.argmax(inverse == cell))
        desc = {c: mat[first, k] for k, c in enumerate(cols)}
        raise EstimationError(f"tailoring cell {desc} carries no weight")
    cell_q = np.bincount(inverse, weights=w * q, minlength=n_cells) / cell_w
    # Tailoring-term designs are constant within a cell; take any member's row.
    member = np.empty(n_cells, dtype=int)
    member[inverse] = np.arange(len(inverse))
    T_cells = T[member]
    f = glm.wls_fit(T_cells, cell_q, cell_w, column_names=tailoring_terms.names)
    return f.coefficients


# ---------------------------------------------------------------------------
# Public stage operations


def dwols_stage(
    pseudo_y,
    a,
    history: Mapping[str, np.ndarray],
    spec: StageSpec,
    weights: WeightVector | np.ndarray,
    stage: int = 1,
) -> StageFit:
    """Single weighted least squares fit of the stage outcome model; the blip
    coefficients are the treatment-interaction block."""
    w = weights.values if isinstance(weights, WeightVector) else np.asarray(weights, float)
    Xtf = spec.treatment_free_terms.design_matrix(history)
    B = spec.blip_terms.design_matrix(history)
    a = np.asarray(a, dtype=float)
    psi, beta = _split_wls(
        Xtf, B, a, np.asarray(pseudo_y, float), w,
        spec.treatment_free_terms.names, spec.blip_terms.names,
    )
    coef = BlipCoefficients(psi, spec.blip_terms, stage, BlipKind.ATS)
    return StageFit(
        stage=stage,
        psi_ats=coef,
        psi_dagger=coef,
        psi_pats=coef,
        beta=beta,
        beta_names=tuple(spec.treatment_free_terms.names),
    )


def gest_stage(
    pseudo_y,
    a,
    history: Mapping[str, np.ndarray],
    spec: StageSpec,
    propensity,
    stage: int = 1,
    base_weights=None,
) -> StageFit:
    """Closed-form G-estimation of the stage blip.

    ``propensity`` is the fitted E[A_j | H_j]; S(a) = a x blip design row and
    E[S(A)|H] = e x blip design row. The treatment-free model E[G|H] is linear
    in ``treatment_free_terms``, which keeps the estimating equations a linear
    system in (psi, beta).
    """
    Xtf = spec.treatment_free_terms.design_matrix(history)
    B = spec.blip_terms.design_matrix(history)
    a = np.asarray(a, dtype=float)
    n = len(a)
    w = np.ones(n) if base_weights is None else np.asarray(base_weights, float)
    psi, beta = _gest_solve(Xtf, B, a, np.asarray(propensity, float), np.asarray(pseudo_y, float), w)
    coef = BlipCoefficients(psi, spec.blip_terms, stage, BlipKind.ATS)
    return StageFit(
        stage=stage,
        psi_ats=coef,
        psi_dagger=coef,
        psi_pats=coef,
        beta=beta,
        beta_names=tuple(spec.treatment_free_terms.names),
    )


def iptw_pats_stage(
    pseudo_y_star,
    a,
    history: Mapping[str, np.ndarray],
    spec: StageSpec,
    kind: EstimatorKind,
    psi_ats: BlipCoefficients,
    stage: int = 1,
    weight_form: str = "overlap",
    base_weights=None,
) -> StageFit:
    """IPTW-corrected tailored-blip fit (the IPTW+dWOLS / IPTW+G-estimation step).

    Fits P(A|H*) and P(A|H), forms the ratio weights, and either runs the
    tailored weighted regression (dWOLS flavor) or solves the ratio-weighted
    estimating equations (G-estimation flavor).
    """
    if kind not in (EstimatorKind.IPTW_DWOLS, EstimatorKind.IPTW_GEST):
        raise SpecificationError(f"{kind} is not an IPTW estimator kind")
    a = np.asarray(a, dtype=float)
    ystar = np.asarray(pseudo_y_star, float)
    n = len(a)
    w0 = np.ones(n) if base_weights is None else np.asarray(base_weights, float)
    Xtr = spec.treatment_terms.design_matrix(history)
    T = spec.tailoring_terms.design_matrix(history)
    Xtf = spec.treatment_free_terms.design_matrix(history)
    e_full = glm.logistic_fit(Xtr, a, w0, column_names=spec.treatment_terms.names).fitted
    e_star = glm.logistic_fit(T, a, w0, column_names=spec.tailoring_terms.names).fitted
    varpi = ratio_weights(a, e_star, e_full).values
    if kind is EstimatorKind.IPTW_DWOLS:
        w_star = _balancing(a, e_star, weight_form)
        psi, beta = _split_wls(
            Xtf, T, a, ystar, w0 * w_star * varpi,
            spec.treatment_free_terms.names, spec.tailoring_terms.names,
        )
    else:
        psi, beta = _gest_solve(Xtf, T, a, e_star, ystar, w0, varpi=varpi)
    return StageFit(
        stage=stage,
        psi_ats=psi_ats,
        psi_dagger=psi_ats,
        psi_pats=BlipCoefficients(psi, spec.tailoring_terms, stage, BlipKind.PATS),
        beta=beta,
        beta_names=tuple(spec.treatment_free_terms.names),
        diagnostics={"propensity_full": e_full, "propensity_tailoring": e_star},
    )


def dagger_stage(
    pseudo_y_star,
    a,
    history: Mapping[str, np.ndarray],
    spec: StageSpec,
    kind: EstimatorKind,
    propensity,
    stage: int = 1,
    weight_form: str = "overlap",
    base_weights=None,
) -> BlipCoefficients:
    """Fit the intermediate full-history blip against the tailored
    pseudo-outcome. Mechanics are identical to the stage fit of the matching
    family, only the left-hand side changes."""
    a = np.asarray(a, dtype=float)
    n = len(a)
    w0 = np.ones(n) if base_weights is None else np.asarray(base_weights, float)
    Xtf = spec.treatment_free_terms.design_matrix(history)
    B = spec.blip_terms.design_matrix(history)
    e = np.asarray(propensity, float)
    if kind.uses_gest:
        psi, _ = _gest_solve(Xtf, B, a, e, np.asarray(pseudo_y_star, float), w0)
    else:
        w = w0 * _balancing(a, e, weight_form)
        psi, _ = _split_wls(
            Xtf, B, a, np.asarray(pseudo_y_star, float), w,
            spec.treatment_free_terms.names, spec.blip_terms.names,
        )
    return BlipCoefficients(psi, spec.blip_terms, stage, BlipKind.INTERMEDIATE)


def integrate_marginalize(
    psi_dagger: BlipCoefficients,
    spec: StageSpec,
    history: Mapping[str, np.ndarray],
    base_weights=None,
) -> BlipCoefficients:
    """Average the intermediate blip over the non-tailoring covariates using
    within-cell empirical frequencies (discrete covariates only)."""
    n = len(next(iter(history.values())))
    w = np.ones(n) if base_weights is None else np.asarray(base_weights, float)
    psi = _integrate_solve(
        history, psi_dagger.terms, spec.tailoring_terms, spec.tailoring_columns,
        psi_dagger.psi, w,
    )
    return BlipCoefficients(psi, spec.tailoring_terms, psi_dagger.stage, BlipKind.PATS)


def ce_marginalize(
    psi_dagger: BlipCoefficients,
    spec: StageSpec,
    history: Mapping[str, np.ndarray],
    base_weights=None,
) -> BlipCoefficients:
    """Regress the treated-arm intermediate blip predictions on the tailoring
    terms (the conditional-expectation marginalization)."""
    n = len(next(iter(history.values())))
    w = np.ones(n) if base_weights is None else np.asarray(base_weights, float)
    B = psi_dagger.terms.design_matrix(history)
    T = spec.tailoring_terms.design_matrix(history)
    q = B @ psi_dagger.psi
    f = glm.wls_fit(T, q, w, column_names=spec.tailoring_terms.names)
    return BlipCoefficients(f.coefficients, spec.tailoring_terms, psi_dagger.stage, BlipKind.PATS)


def make_pseudo_outcomes(
    dataset: StagedDataset,
    specs: Sequence[StageSpec],
    later_fits: Mapping[int, StageFit],
    kind: EstimatorKind,
    stage: int,
) -> PseudoOutcome:
    """Pseudo-outcome for the given stage from the already-fitted later stages.

    At the last stage this is the raw outcome. Earlier stages add, for every
    later stage k, the blip of the optimal decision minus the blip of the
    observed treatment (the tailored blip supplies the optimal part for the
    partially adaptive kinds).
    """
    values = dataset.outcome.astype(float).copy()
    for k in range(stage + 1, dataset.n_stages + 1):
        sf = later_fits[k]
        hist = dataset.history(k)
        a_k = dataset.stages[k - 1].treatment.astype(float)
        B = sf.psi_ats.terms.design_matrix(hist)
        observed = a_k * (B @ sf.psi_ats.psi)
        if kind.is_pats:
            T = sf.psi_pats.terms.design_matrix(hist)
            optimal = np.maximum(T @ sf.psi_pats.psi, 0.0)
        else:
            optimal = np.maximum(B @ sf.psi_ats.psi, 0.0)
        values += optimal - observed
    return PseudoOutcome(stage=stage, values=values)


# ---------------------------------------------------------------------------
# The dispatcher


def fit(
    dataset: StagedDataset,
    specs: Sequence[StageSpec],
    kind: EstimatorKind,
    *,
    weight_form: str = "overlap",
    base_weights=None,
) -> list[StageFit]:
    """Backward recursion over all stages; returns StageFits ordered 1..K.

    ``base_weights`` multiply into every model fit (censoring weights,
    bootstrap multiplicities); censored subjects must carry zero weight.
    """
    K = dataset.n_stages
    if len(specs) != K:
        raise SpecificationError(f"expected {K} stage specs, got {len(specs)}")
    n = dataset.n
    if base_weights is None:
        w0 = np.ones(n)
    else:
        w0 = np.asarray(base_weights, dtype=float)
        if w0.shape != (n,) or np.any(w0 < 0) or np.any(~np.isfinite(w0)):
            raise SpecificationError("base weights must be nonnegative, finite, length n")
    if dataset.censored is not None and np.any(w0[dataset.censored] != 0):
        raise SpecificationError(
            "censored subjects must carry zero base weight (supply censoring weights)"
        )
    for j in range(1, K + 1):
        specs[j - 1].validate_against(dataset.history_columns(j), j)
    if kind.is_pats:
        for j, sp in enumerate(specs, start=1):
            if len(sp.tailoring_terms) == 0:
                raise SpecificationError(f"stage {j}: PATS estimators need tailoring terms")

    fits: dict[int, StageFit] = {}
    for j in range(K, 0, -1):
        try:
            fits[j] = _fit_stage(dataset, specs, kind, j, fits, weight_form, w0)
        except EstimationError:
            raise
        except Exception as exc:
            raise EstimationError(f"stage {j} failed: {exc}", stage=j) from exc
    return [fits[j] for j in range(1, K + 1)]


def _fit_stage(dataset, specs, kind, j, fits, weight_form, w0) -> StageFit:
    spec = specs[j - 1]
    history = dataset.history(j)
    a = dataset.stages[j - 1].treatment.astype(float)
    Xtr = spec.treatment_terms.design_matrix(history)
    e_full = glm.logistic_fit(Xtr, a, w0, column_names=spec.treatment_terms.names).fitted

    ytilde = make_pseudo_outcomes(
        dataset, specs, fits, EstimatorKind.GEST if kind.uses_gest else EstimatorKind.DWOLS, j
    ).values
    if kind.uses_gest:
        ats = gest_stage(ytilde, a, history, spec, e_full, stage=j, base_weights=w0)
    else:
        w_bal = w0 * _balancing(a, e_full, weight_form)
        ats = dwols_stage(ytilde, a, history, spec, w_bal, stage=j)

    if not kind.is_pats:
        sf = ats
    elif kind.is_iptw:
        ystar = make_pseudo_outcomes(dataset, specs, fits, kind, j).values
        sf = iptw_pats_stage(
            ystar, a, history, spec, kind, ats.psi_ats, stage=j,
            weight_form=weight_form, base_weights=w0,
        )
    else:
        ystar = make_pseudo_outcomes(dataset, specs, fits, kind, j).values
        psi_dagger = dagger_stage(
            ystar, a, history, spec, kind, e_full, stage=j,
            weight_form=weight_form, base_weights=w0,
        )
        if kind in (EstimatorKind.INTEGRATE_DWOLS, EstimatorKind.INTEGRATE_GEST):
            psi_pats = integrate_marginalize(psi_dagger, spec, history, base_weights=w0)
        else:
            psi_pats = ce_marginalize(psi_dagger, spec, history, base_weights=w0)
        sf = StageFit(
            stage=j,
            psi_ats=ats.psi_ats,
            psi_dagger=psi_dagger,
            psi_pats=psi_pats,
            beta=ats.beta,
            beta_names=ats.beta_names,
            diagnostics={"propensity_full": e_full},
        )
    return sf
