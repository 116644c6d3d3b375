"""Agreement tests between the batched CE-dWOLS path and the reference path."""

from __future__ import annotations

import numpy as np
import pytest

from pats.engine import CeDwolsEngine, supports
from pats.errors import UnsupportedFeatureError
from pats.estimators import EstimatorKind, fit
from pats.simulation import analysis_specs, generate


@pytest.mark.parametrize("scenario,n", [("s1", 400), ("e1", 300)])
def test_agreement_with_reference_fit(scenario, n):
    ds = generate(scenario, n, seed=50)
    specs = analysis_specs(scenario)
    eng = CeDwolsEngine(ds, specs)
    rng = np.random.default_rng(51)
    counts = rng.multinomial(n, np.full(n, 1.0 / n), size=10).astype(float)
    counts[0] = 1.0  # the unweighted replicate must equal the plain fit
    est, failed = eng.run(counts)
    assert not failed.any()
    for b in range(counts.shape[0]):
        ref = fit(ds, specs, EstimatorKind.CE_DWOLS, base_weights=counts[b])
        refv = np.concatenate([sf.psi_pats.psi for sf in ref])
        np.testing.assert_allclose(est[b], refv, atol=1e-8)


def test_agreement_on_subsample_counts(test_m=180):
    # m-out-of-n draws: count vectors summing to m < n
    ds = generate("e1", 300, seed=52)
    specs = analysis_specs("e1")
    eng = CeDwolsEngine(ds, specs)
    rng = np.random.default_rng(53)
    counts = rng.multinomial(test_m, np.full(300, 1.0 / 300), size=5).astype(float)
    est, failed = eng.run(counts)
    assert not failed.any()
    for b in range(5):
        ref = fit(ds, specs, EstimatorKind.CE_DWOLS, base_weights=counts[b])
        refv = np.concatenate([sf.psi_pats.psi for sf in ref])
        np.testing.assert_allclose(est[b], refv, atol=1e-8)


def test_supports_excludes_other_kinds_and_censoring():
    ds = generate("s1", 100, seed=54)
    assert supports(ds, EstimatorKind.CE_DWOLS)
    assert not supports(ds, EstimatorKind.CE_GEST)
    assert not supports(ds, EstimatorKind.DWOLS)


def test_engine_rejects_wrong_spec_count():
    ds = generate("e1", 100, seed=55)
    with pytest.raises(UnsupportedFeatureError):
        CeDwolsEngine(ds, analysis_specs("s1"))


def test_chunking_is_transparent():
    import pats.engine as engine_mod

    ds = generate("s1", 120, seed=56)
    specs = analysis_specs("s1")
    eng = CeDwolsEngine(ds, specs)
    rng = np.random.default_rng(57)
    counts = rng.multinomial(120, np.full(120, 1 / 120), size=30).astype(float)
    whole, _ = eng.run(counts)
    old = engine_mod._CHUNK
    try:
        engine_mod._CHUNK = 7
        chunked, _ = eng.run(counts)
    finally:
        engine_mod._CHUNK = old
    np.testing.assert_array_equal(whole, chunked)
