"""Tests for the eight estimators and their stage operations."""

from __future__ import annotations

import numpy as np
import pytest
from scipy.special import expit

from pats.estimators import (
    EstimatorKind,
    ce_marginalize,
    dagger_stage,
    dwols_stage,
    fit,
    gest_stage,
    integrate_marginalize,
    iptw_pats_stage,
    make_pseudo_outcomes,
)
from pats.glm import logistic_fit
from pats.model import (
    BlipCoefficients,
    BlipKind,
    Stage,
    StagedDataset,
    StageSpec,
    TermList,
)
from pats.simulation import analysis_specs, generate

PATS_KINDS = [k for k in EstimatorKind if k.is_pats]


def single_stage_spec(blip=("1", "x1", "x2"), tailoring=None, tailoring_columns=frozenset()):
    return StageSpec(
        treatment_terms=TermList(["1", "x1", "x2"]),
        treatment_free_terms=TermList(["1", "x1", "x2"]),
        blip_terms=TermList(list(blip)),
        tailoring_terms=TermList(list(tailoring)) if tailoring else None,
        tailoring_columns=tailoring_columns,
    )


class TestFit:
    def test_ce_dwols_recovers_tailored_truth_large_n(self):
        ds = generate("s1", 1_000_000, seed=10)
        fits = fit(ds, analysis_specs("s1"), EstimatorKind.CE_DWOLS)
        np.testing.assert_allclose(fits[0].psi_pats.psi, [1.25, -1.0], atol=0.02)

    def test_naive_dwols_bias(self):
        ds = generate("s1", 10_000, seed=11)
        fits = fit(ds, analysis_specs("s1", naive=True), EstimatorKind.DWOLS)
        psi = fits[0].psi_pats.psi
        # biased toward the full-history blip coefficients: roughly +1.9% and
        # +9.1% relative bias at this sample size
        assert 0.0 <= (psi[0] - 1.25) / 1.25 <= 0.05
        assert 0.04 <= (psi[1] - (-1.0)) / (-1.0) <= 0.15

    @pytest.mark.parametrize("kind", PATS_KINDS)
    def test_pats_equals_ats_when_everything_tailors(self, kind):
        ds = generate("s1", 2000, seed=12)
        spec = single_stage_spec()  # H^C empty: blip == tailoring
        ats_kind = EstimatorKind.GEST if kind.uses_gest else EstimatorKind.DWOLS
        pats = fit(ds, [spec], kind)[0].psi_pats.psi
        ats = fit(ds, [spec], ats_kind)[0].psi_ats.psi
        np.testing.assert_allclose(pats, ats, atol=1e-8)

    @pytest.mark.parametrize("kind", list(EstimatorKind))
    def test_deterministic(self, kind):
        ds = generate("e1", 400, seed=13)
        specs = analysis_specs("e1", naive=not kind.is_pats)
        a = fit(ds, specs, kind)
        b = fit(ds, specs, kind)
        for fa, fb in zip(a, b):
            assert fa.psi_pats.psi.tobytes() == fb.psi_pats.psi.tobytes()

    @pytest.mark.parametrize("kind", PATS_KINDS)
    def test_last_stage_dagger_equals_ats(self, kind):
        ds = generate("e1", 1500, seed=14)
        fits = fit(ds, analysis_specs("e1"), kind)
        last = fits[-1]
        np.testing.assert_allclose(last.psi_dagger.psi, last.psi_ats.psi, atol=1e-10)


class TestDwolsStage:
    def test_randomized_data_recovers_blip(self):
        rng = np.random.default_rng(20)
        n = 200_000
        x1 = rng.binomial(1, 0.5, n).astype(float)
        x2 = rng.binomial(1, 0.5, n).astype(float)
        a = rng.binomial(1, 0.5, n).astype(float)
        y = a * (0.5 - x1 + 1.5 * x2) + rng.standard_normal(n)
        spec = single_stage_spec()
        sf = dwols_stage(y, a, {"x1": x1, "x2": x2}, spec, np.full(n, 0.5))
        np.testing.assert_allclose(sf.psi_ats.psi, [0.5, -1.0, 1.5], atol=0.03)

    def test_zero_noise_exact(self):
        x1 = np.array([0.0, 1, 0, 1, 0, 1])
        a = np.array([0.0, 0, 1, 1, 1, 0])
        y = x1 + 2.0 * a
        spec = StageSpec(
            treatment_terms=TermList(["1", "x1"]),
            treatment_free_terms=TermList(["1", "x1"]),
            blip_terms=TermList(["1"]),
        )
        sf = dwols_stage(y, a, {"x1": x1}, spec, np.ones(6))
        np.testing.assert_allclose(sf.psi_ats.psi, [2.0], atol=1e-12)

    def test_equal_weights_match_ols_oracle(self):
        rng = np.random.default_rng(21)
        n = 20
        x1 = rng.binomial(1, 0.5, n).astype(float)
        x2 = rng.binomial(1, 0.5, n).astype(float)
        a = rng.binomial(1, 0.5, n).astype(float)
        y = rng.standard_normal(n)
        Z = np.column_stack([np.ones(n), x1, x2, a, a * x1, a * x2])
        ols = np.linalg.lstsq(Z, y, rcond=None)[0]
        spec = single_stage_spec()
        sf = dwols_stage(y, a, {"x1": x1, "x2": x2}, spec, np.ones(n))
        np.testing.assert_allclose(sf.psi_ats.psi, ols[3:], atol=1e-9)
        np.testing.assert_allclose(sf.beta, ols[:3], atol=1e-9)


class TestGestStage:
    def test_scenario1_full_blip(self):
        ds = generate("s1", 10_000, seed=22)
        hist = ds.history(1)
        a = ds.stages[0].treatment.astype(float)
        spec = single_stage_spec()
        e = logistic_fit(
            spec.treatment_terms.design_matrix(hist), a
        ).fitted
        sf = gest_stage(ds.outcome, a, hist, spec, e)
        np.testing.assert_allclose(sf.psi_ats.psi, [0.5, -1.0, 1.5], atol=0.06)

    def test_restricted_blip_bias(self):
        ds = generate("s1", 10_000, seed=23)
        fits = fit(ds, analysis_specs("s1", naive=True), EstimatorKind.GEST)
        psi = fits[0].psi_pats.psi
        assert 0.04 <= (psi[1] - (-1.0)) / (-1.0) <= 0.15

    def test_exact_recovery_zero_noise_true_propensity(self):
        x1 = np.array([0.0, 1, 0, 1, 0, 1, 0, 1])
        a = np.array([0.0, 0, 1, 1, 0, 1, 1, 0])
        e = np.full(8, 0.5)
        y = 0.3 * x1 + a * (1.0 - 2.0 * x1)
        spec = StageSpec(
            treatment_terms=TermList(["1", "x1"]),
            treatment_free_terms=TermList(["1", "x1"]),
            blip_terms=TermList(["1", "x1"]),
        )
        sf = gest_stage(y, a, {"x1": x1}, spec, e)
        np.testing.assert_allclose(sf.psi_ats.psi, [1.0, -2.0], atol=1e-10)
        np.testing.assert_allclose(sf.beta, [0.0, 0.3], atol=1e-10)


class TestIptwStage:
    def test_scenario1_low_bias(self):
        ds = generate("s1", 200_000, seed=24)
        fits = fit(ds, analysis_specs("s1"), EstimatorKind.IPTW_DWOLS)
        psi = fits[0].psi_pats.psi
        np.testing.assert_allclose(psi, [1.25, -1.0], atol=0.03)

    def test_scenario2_bias_persists(self):
        # treatment model misspecified: the IPTW corrections stay biased while
        # the marginalization estimators do not
        ds = generate("s2", 200_000, seed=25)
        specs = analysis_specs("s2")
        psi_iptw = fit(ds, specs, EstimatorKind.IPTW_DWOLS)[0].psi_pats.psi
        psi_iptw_g = fit(ds, specs, EstimatorKind.IPTW_GEST)[0].psi_pats.psi
        psi_ce = fit(ds, specs, EstimatorKind.CE_DWOLS)[0].psi_pats.psi
        assert 0.03 <= (psi_iptw[1] - (-1.0)) / (-1.0) <= 0.09
        assert 0.07 <= (psi_iptw_g[1] - (-1.0)) / (-1.0) <= 0.12
        # single fit: allow ~2 Monte-Carlo standard errors around zero bias
        assert abs((psi_ce[1] - (-1.0)) / (-1.0)) <= 0.025

    def test_reduces_to_ats_when_tailoring_is_everything(self):
        ds = generate("s1", 3000, seed=26)
        spec = single_stage_spec()
        hist = ds.history(1)
        a = ds.stages[0].treatment.astype(float)
        ats = fit(ds, [spec], EstimatorKind.DWOLS)[0]
        sf = iptw_pats_stage(
            ds.outcome, a, hist, spec, EstimatorKind.IPTW_DWOLS, ats.psi_ats
        )
        np.testing.assert_allclose(sf.psi_pats.psi, ats.psi_ats.psi, atol=1e-8)


class TestDaggerStage:
    def test_last_stage_identity_exact(self):
        ds = generate("s1", 5000, seed=27)
        spec = single_stage_spec(tailoring=("1", "x1"), tailoring_columns=frozenset({"x1"}))
        hist = ds.history(1)
        a = ds.stages[0].treatment.astype(float)
        e = logistic_fit(spec.treatment_terms.design_matrix(hist), a).fitted
        ats = dwols_stage(
            ds.outcome, a, hist, spec, np.abs(a - e)
        )
        dag = dagger_stage(ds.outcome, a, hist, spec, EstimatorKind.CE_DWOLS, e)
        np.testing.assert_array_equal(dag.psi, ats.psi_ats.psi)

    def test_single_stage_dagger_recovers_dgp(self):
        ds = generate("s1", 1_000_000, seed=28)
        fits = fit(ds, analysis_specs("s1"), EstimatorKind.CE_DWOLS)
        np.testing.assert_allclose(fits[0].psi_dagger.psi, [0.5, -1.0, 1.5], atol=0.02)

    def test_two_stage_last_dagger_recovers_dgp(self):
        ds = generate("e1", 1_000_000, seed=29)
        fits = fit(ds, analysis_specs("e1"), EstimatorKind.CE_DWOLS)
        np.testing.assert_allclose(fits[1].psi_dagger.psi, [-0.5, 1.0, -1.0], atol=0.02)


class TestMarginalize:
    def _balanced_history(self):
        # every (x1, x2) cell appears equally often: in-sample frequencies are
        # exactly 1/2 for x2 within each x1 level
        x1 = np.array([0.0, 0, 1, 1] * 5)
        x2 = np.array([0.0, 1, 0, 1] * 5)
        return {"x1": x1, "x2": x2}

    def _dagger(self, psi, terms=("1", "x1", "x2")):
        return BlipCoefficients(np.asarray(psi, float), TermList(list(terms)), 1, BlipKind.INTERMEDIATE)

    def test_integrate_exact_balanced_sample(self):
        spec = single_stage_spec(tailoring=("1", "x1"), tailoring_columns=frozenset({"x1"}))
        psi = integrate_marginalize(
            self._dagger([0.5, -1.0, 1.5]), spec, self._balanced_history()
        )
        np.testing.assert_allclose(psi.psi, [1.25, -1.0], atol=1e-12)

    def test_integrate_nothing_to_marginalize(self):
        spec = single_stage_spec(
            blip=("1", "x1"), tailoring=("1", "x1"), tailoring_columns=frozenset({"x1"})
        )
        psi = integrate_marginalize(
            self._dagger([0.7, -0.3], terms=("1", "x1")), spec, self._balanced_history()
        )
        np.testing.assert_allclose(psi.psi, [0.7, -0.3], atol=1e-12)

    def test_integrate_three_cell_toy_oracle(self):
        # z takes 3 levels with hand-set frequencies within each x level;
        # oracle: enumerate gamma(1, x, z) * freq(z | x) per cell
        x = np.array([0.0] * 6 + [1.0] * 4)
        z = np.array([0.0, 0, 0, 1, 1, 2, 0, 2, 2, 2])
        psi_dagger = np.array([0.2, -0.6, 0.45])
        spec = StageSpec(
            treatment_terms=TermList(["1", "x"]),
            treatment_free_terms=TermList(["1", "x", "z"]),
            blip_terms=TermList(["1", "x", "z"]),
            tailoring_terms=TermList(["1", "x"]),
            tailoring_columns=frozenset({"x"}),
        )
        expected = []
        for level in (0.0, 1.0):
            zs = z[x == level]
            gamma = [psi_dagger @ np.array([1.0, level, zv]) for zv in zs]
            expected.append(np.mean(gamma))
        psi = integrate_marginalize(
            self._dagger(psi_dagger, terms=("1", "x", "z")), spec, {"x": x, "z": z}
        )
        # saturated [1, x] basis: intercept = cell 0 mean, slope = difference
        np.testing.assert_allclose(
            psi.psi, [expected[0], expected[1] - expected[0]], atol=1e-12
        )

    def test_ce_equals_integrate_when_saturated(self):
        ds = generate("s1", 5000, seed=30)
        spec = analysis_specs("s1")[0]
        hist = ds.history(1)
        dagger = self._dagger([0.4, -0.9, 1.1])
        a = integrate_marginalize(dagger, spec, hist)
        b = ce_marginalize(dagger, spec, hist)
        np.testing.assert_allclose(a.psi, b.psi, atol=1e-10)

    def test_ce_exact_when_dagger_depends_only_on_tailoring(self):
        spec = single_stage_spec(tailoring=("1", "x1"), tailoring_columns=frozenset({"x1"}))
        dagger = self._dagger([0.7, -0.3, 0.0])
        psi = ce_marginalize(dagger, spec, self._balanced_history())
        np.testing.assert_allclose(psi.psi, [0.7, -0.3], atol=1e-12)


class TestPseudoOutcomes:
    def test_last_stage_is_raw_outcome(self):
        ds = generate("e1", 100, seed=31)
        po = make_pseudo_outcomes(ds, analysis_specs("e1"), {}, EstimatorKind.CE_DWOLS, 2)
        np.testing.assert_array_equal(po.values, ds.outcome)

    def test_single_subject_increment_zero(self):
        # one subject whose observed a2 equals the optimal tailored decision
        # and whose non-tailoring covariate is zero: the increment vanishes
        n = 4
        x11 = np.array([0.0, 1, 0, 1])
        x21 = np.array([1.0, 1, 1, 1])
        x22 = np.zeros(n)
        a1 = np.zeros(n, dtype=int)
        a2 = np.ones(n, dtype=int)
        ds = StagedDataset(
            [
                Stage(a1, {"x11": x11, "x12": np.zeros(n)}, "a1"),
                Stage(a2, {"x21": x21, "x22": x22}, "a2"),
            ],
            np.zeros(n),
        )
        specs = analysis_specs("e1")
        psi2 = BlipCoefficients(
            np.array([-0.5, 1.0, 0.7]), specs[1].blip_terms, 2, BlipKind.ATS
        )
        psi2_star = BlipCoefficients(
            np.array([-0.5, 1.0]), specs[1].tailoring_terms, 2, BlipKind.PATS
        )
        sf = _fake_stage_fit(2, psi2, psi2_star)
        po = make_pseudo_outcomes(ds, specs, {2: sf}, EstimatorKind.CE_DWOLS, 1)
        # blip*(1, x21=1) = 0.5 > 0 -> d_opt = 1 = a2; gamma(1, h) = 0.5 too
        # since x22 = 0, so every increment is 0.5 - 0.5 = 0
        np.testing.assert_allclose(po.values, ds.outcome, atol=1e-14)

    def test_stage1_pseudo_outcome_mean_matches_counterfactual_oracle(self):
        # with the true stage-2 parameters plugged in, the mean tailored
        # pseudo-outcome approximates E[Y^{a1, d2_opt*}] from a counterfactual
        # simulator
        from pats.simulation import true_pats_parameters

        n = 400_000
        ds = generate("e1", n, seed=32)
        specs = analysis_specs("e1")
        psi2 = BlipCoefficients(
            np.array([-0.5, 1.0, -1.0]), specs[1].blip_terms, 2, BlipKind.ATS
        )
        truth2 = true_pats_parameters("e1")[1]
        psi2_star = BlipCoefficients(truth2, specs[1].tailoring_terms, 2, BlipKind.PATS)
        sf = _fake_stage_fit(2, psi2, psi2_star)
        po = make_pseudo_outcomes(ds, specs, {2: sf}, EstimatorKind.CE_DWOLS, 1)

        # counterfactual oracle: same subjects, stage-2 treatment set by the
        # tailored rule, outcome mean computed from the generating process
        rng = np.random.default_rng(33)
        x11 = ds.stages[0].covariates["x11"]
        x12 = ds.stages[0].covariates["x12"]
        a1 = ds.stages[0].treatment.astype(float)
        x21 = ds.stages[1].covariates["x21"]
        x22 = ds.stages[1].covariates["x22"]
        d2 = (truth2[0] + truth2[1] * x21 > 0).astype(float)
        blip1 = -0.5 + x11 - x12
        blip2 = -0.5 + x21 - x22
        mu1 = ((blip1 > 0) - a1) * blip1
        mu2 = ((blip2 > 0) - d2) * blip2
        oracle = np.mean(x11 + x12 - mu1 - mu2)
        assert po.values.mean() == pytest.approx(oracle, abs=0.02)


def _fake_stage_fit(stage, psi_ats, psi_pats):
    from pats.estimators import StageFit

    return StageFit(
        stage=stage,
        psi_ats=psi_ats,
        psi_dagger=psi_ats,
        psi_pats=psi_pats,
        beta=np.zeros(1),
        beta_names=("intercept",),
    )


class TestIptwEquivalence:
    def test_iptw_dwols_solves_iptw_gest_equations(self):
        # the IPTW+dWOLS solution satisfies the IPTW+G-estimation estimating
        # equations when the balancing weights use the tailoring propensity
        for seed in range(5):
            ds = generate("s1", 200, seed=40, replication=seed)
            specs = analysis_specs("s1")
            assert _appendix_d_residual(ds, specs[0]) <= 1e-8


def _appendix_d_residual(ds, spec):
    hist = ds.history(1)
    a = ds.stages[0].treatment.astype(float)
    sf = fit(ds, [spec], EstimatorKind.IPTW_DWOLS)[0]
    T = spec.tailoring_terms.design_matrix(hist)
    Xtf = spec.treatment_free_terms.design_matrix(hist)
    e_full = logistic_fit(spec.treatment_terms.design_matrix(hist), a).fitted
    e_star = logistic_fit(T, a).fitted
    varpi = (a * e_star + (1 - a) * (1 - e_star)) / (a * e_full + (1 - a) * (1 - e_full))
    resid = ds.outcome - a * (T @ sf.psi_pats.psi) - Xtf @ sf.beta
    inst = (varpi * (a - e_star))[:, None] * T
    score = inst.T @ resid
    return np.max(np.abs(score)) / ds.n
