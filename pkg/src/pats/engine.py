"""Batched refitting of the CE-dWOLS estimator under many resampling weights.

A bootstrap replicate drawn with replacement from n subjects is equivalent to
refitting the original dataset with multinomial count weights, so every design
matrix can be built once and shared across replicates. This module exploits
that: it evaluates the conditional-expectation dWOLS estimator for a whole
batch of count-weight vectors at once through batched normal equations and a
batched IRLS loop. The nested stage of the data-adaptive m-out-of-n bootstrap
needs B1 x B2 refits per tuning step, which is far too many for the one-at-a-
time path.

Only one- and two-stage problems are supported (the adaptive procedure itself
is defined for at most two stages). Agreement with the reference
implementation in :mod:`pats.estimators` is part of the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from . import glm
from .errors import UnsupportedFeatureError
from .estimators import EstimatorKind
from .model import StagedDataset, StageSpec

__all__ = ["CeDwolsEngine", "supports"]

_CHUNK = 4096  # replicates per batch; bounds peak memory at ~n x chunk floats


def supports(dataset: StagedDataset, kind: EstimatorKind) -> bool:
    """Whether the batched path applies to this problem."""
    return (
        kind is EstimatorKind.CE_DWOLS
        and dataset.n_stages <= 2
        and dataset.censored is None
    )


@dataclass(frozen=True)
class _StageDesigns:
    a: np.ndarray
    treatment: np.ndarray  # design of E[A|H]
    outcome: np.ndarray  # [treatment-free | a x blip] stacked design
    blip: np.ndarray
    tailoring: np.ndarray
    n_tf: int  # width of the treatment-free block within ``outcome``


class CeDwolsEngine:
    """Precomputed designs for batched CE-dWOLS evaluation.

    ``run(counts)`` takes a (B, n) array of nonnegative replicate weights and
    returns the (B, P) matrix of tailored blip estimates (stage 1 block first)
    plus a boolean failure mask (separation, non-convergence or a singular
    system in any fit of that replicate).
    """

    def __init__(self, dataset: StagedDataset, specs: list[StageSpec]):
        if not supports(dataset, EstimatorKind.CE_DWOLS) or len(specs) != dataset.n_stages:
            raise UnsupportedFeatureError(
                "batched path supports uncensored CE-dWOLS with at most two stages"
            )
        self.n = dataset.n
        self.y = dataset.outcome.astype(float)
        self.stages: list[_StageDesigns] = []
        for j, sp in enumerate(specs, start=1):
            hist = dataset.history(j)
            a = dataset.stages[j - 1].treatment.astype(float)
            Xtf = sp.treatment_free_terms.design_matrix(hist)
            B = sp.blip_terms.design_matrix(hist)
            self.stages.append(
                _StageDesigns(
                    a=a,
                    treatment=sp.treatment_terms.design_matrix(hist),
                    outcome=np.hstack([Xtf, a[:, None] * B]),
                    blip=B,
                    tailoring=sp.tailoring_terms.design_matrix(hist),
                    n_tf=Xtf.shape[1],
                )
            )
        self.n_params = sum(s.tailoring.shape[1] for s in self.stages)

    def run(self, counts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        counts = np.asarray(counts, dtype=float)
        out = np.empty((counts.shape[0], self.n_params))
        failed = np.zeros(counts.shape[0], dtype=bool)
        for lo in range(0, counts.shape[0], _CHUNK):
            sl = slice(lo, lo + _CHUNK)
            out[sl], failed[sl] = self._run_chunk(counts[sl])
        return out, failed

    def _run_chunk(self, W: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        Bn = W.shape[0]
        failed = np.zeros(Bn, dtype=bool)
        ystar = np.broadcast_to(self.y[:, None], (self.n, Bn)).copy()
        blocks: list[np.ndarray] = []
        for st in reversed(self.stages):
            e, bad = _batched_logistic(st.treatment, st.a, W)
            failed |= bad
            w_bal = W * np.abs(st.a[None, :] - e.T)
            theta, bad = _batched_wls(st.outcome, ystar, w_bal)
            failed |= bad
            psi = theta[:, st.n_tf :]
            # conditional-expectation marginalization onto the tailoring basis
            q = st.blip @ psi.T  # (n, B) treated-arm blip predictions
            psi_star, bad = _batched_wls(st.tailoring, q, W)
            failed |= bad
            blocks.append(psi_star)
            # tailored pseudo-outcome increment for the next (earlier) stage
            opt = np.maximum(st.tailoring @ psi_star.T, 0.0)
            ystar = ystar + opt - st.a[:, None] * (st.blip @ psi.T)
        blocks.reverse()
        return np.hstack(blocks), failed


def _solve_batch(M: np.ndarray, r: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Solve a stack of small linear systems, flagging singular members."""
    try:
        return (
            np.linalg.solve(M, r[..., None])[..., 0],
            np.zeros(M.shape[0], dtype=bool),
        )
    except np.linalg.LinAlgError:
        sol = np.zeros_like(r)
        bad = np.zeros(M.shape[0], dtype=bool)
        for i in range(M.shape[0]):
            try:
                sol[i] = np.linalg.solve(M[i], r[i])
            except np.linalg.LinAlgError:
                bad[i] = True
        return sol, bad


def _batched_wls(Z: np.ndarray, y, W: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-replicate weighted least squares via normal equations.

    ``y`` is either a shared (n,) response or a per-replicate (n, B) matrix.
    """
    M = np.einsum("bn,np,nq->bpq", W, Z, Z, optimize=True)
    if y.ndim == 1:
        r = (W * y[None, :]) @ Z
    else:
        r = np.einsum("bn,np->bp", W * y.T, Z, optimize=True)
    return _solve_batch(M, r)


def _batched_logistic(Z: np.ndarray, a: np.ndarray, W: np.ndarray):
    """Batched IRLS mirroring :func:`pats.glm.logistic_fit`.

    Returns (fitted probabilities (n, B), failure mask). A replicate fails on
    non-convergence, a separated coefficient, or a singular working system.
    """
    Bn, n = W.shape
    p = Z.shape[1]
    beta = np.zeros((Bn, p))
    done = np.zeros(Bn, dtype=bool)
    bad = np.zeros(Bn, dtype=bool)
    for _ in range(glm.MAX_IRLS_ITERATIONS):
        active = ~done & ~bad
        if not active.any():
            break
        eta = beta[active] @ Z.T  # (b, n)
        prob = np.clip(expit(eta), 1e-12, 1.0 - 1e-12)
        resid = a[None, :] - prob
        score = (W[active] * resid) @ Z
        conv = np.max(np.abs(score), axis=1) / n <= glm.SCORE_TOL
        idx = np.flatnonzero(active)
        done[idx[conv]] = True
        step = ~conv
        if not step.any():
            continue
        rows = idx[step]
        w_irls = W[rows] * prob[step] * (1.0 - prob[step])
        z_work = eta[step] + resid[step] / (prob[step] * (1.0 - prob[step]))
        sol, sing = _irls_step(Z, w_irls, z_work)
        beta[rows] = sol
        bad[rows[sing]] = True
    bad |= ~done
    bad |= np.max(np.abs(beta), axis=1) > glm.SEPARATION_THRESHOLD
    fitted = expit(beta @ Z.T).T  # (n, B)
    return fitted, bad


def _irls_step(Z, w_irls, z_work):
    M = np.einsum("bn,np,nq->bpq", w_irls, Z, Z, optimize=True)
    r = np.einsum("bn,np->bp", w_irls * z_work, Z, optimize=True)
    return _solve_batch(M, r)
