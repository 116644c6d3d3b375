"""Analysis of user-supplied CSV datasets driven by a YAML configuration.

The configuration maps CSV columns onto the staged data model, names the
per-stage treatment / treatment-free / blip / tailoring models, selects an
estimator, and configures bootstrap inference. Rows with missing values in any
mapped column are dropped (complete-case) and counted; an optional censoring
indicator switches the fit to inverse-probability-of-censoring weighting, in
which case the censoring model is refit inside every bootstrap replicate.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import pandas as pd
import yaml

from .errors import InferenceError, SpecificationError
from .estimators import EstimatorKind, fit
from .inference import (
    BootstrapConfig,
    BootstrapMode,
    InferenceResult,
    _percentile_ci,
    bootstrap_inference,
)
from .model import Stage, StagedDataset, StageSpec, TermList
from .weights import censoring_weights

__all__ = ["StageConfig", "AnalysisConfig", "load_config", "load_dataset", "run_analysis", "AnalysisReport"]


@dataclass(frozen=True)
class StageConfig:
    treatment: str
    covariates: tuple[str, ...]
    treatment_model: TermList
    treatment_free_model: TermList
    blip_model: TermList
    tailoring_model: TermList | None = None
    tailoring_columns: frozenset[str] = frozenset()

    def to_spec(self) -> StageSpec:
        return StageSpec(
            treatment_terms=self.treatment_model,
            treatment_free_terms=self.treatment_free_model,
            blip_terms=self.blip_model,
            tailoring_terms=self.tailoring_model,
            tailoring_columns=self.tailoring_columns,
        )


@dataclass(frozen=True)
class AnalysisConfig:
    input: str
    outcome: str
    stages: tuple[StageConfig, ...]
    estimator: EstimatorKind
    censoring: str | None = None
    censoring_truncation: float = 0.999
    seed: int = 0
    output_format: str = "csv"
    bootstrap: BootstrapConfig = field(default_factory=BootstrapConfig)

    @property
    def specs(self) -> list[StageSpec]:
        return [s.to_spec() for s in self.stages]

    def mapped_columns(self) -> list[str]:
        cols = [self.outcome]
        if self.censoring is not None:
            cols.append(self.censoring)
        for s in self.stages:
            cols.append(s.treatment)
            cols.extend(s.covariates)
        return cols


def _require(mapping: dict, key: str, context: str):
    if key not in mapping:
        raise SpecificationError(f"{context}: missing required key {key!r}")
    return mapping[key]


def _term_list(value, context: str) -> TermList:
    if not isinstance(value, (list, tuple)) or not value:
        raise SpecificationError(f"{context}: expected a non-empty list of terms")
    return TermList([str(t) for t in value])


def load_config(path: str) -> AnalysisConfig:
    """Parse and validate a YAML analysis configuration."""
    with open(path) as fh:
        raw = yaml.safe_load(fh)
    if not isinstance(raw, dict):
        raise SpecificationError("config root must be a mapping")
    stages_raw = _require(raw, "stages", "config")
    if not isinstance(stages_raw, list) or not stages_raw:
        raise SpecificationError("config: 'stages' must be a non-empty list")
    stages = []
    for j, sr in enumerate(stages_raw, start=1):
        ctx = f"stage {j}"
        if not isinstance(sr, dict):
            raise SpecificationError(f"{ctx}: expected a mapping")
        tailoring_model = sr.get("tailoring_model")
        stages.append(
            StageConfig(
                treatment=str(_require(sr, "treatment", ctx)),
                covariates=tuple(str(c) for c in _require(sr, "covariates", ctx)),
                treatment_model=_term_list(_require(sr, "treatment_model", ctx), ctx),
                treatment_free_model=_term_list(
                    _require(sr, "treatment_free_model", ctx), ctx
                ),
                blip_model=_term_list(_require(sr, "blip_model", ctx), ctx),
                tailoring_model=(
                    _term_list(tailoring_model, ctx) if tailoring_model is not None else None
                ),
                tailoring_columns=frozenset(
                    str(c) for c in sr.get("tailoring_columns", ())
                ),
            )
        )
    kind_name = str(_require(raw, "estimator", "config"))
    try:
        kind = EstimatorKind(kind_name)
    except ValueError:
        valid = ", ".join(k.value for k in EstimatorKind)
        raise SpecificationError(
            f"config: unknown estimator {kind_name!r}; valid: {valid}"
        ) from None
    boot_raw = raw.get("bootstrap", {})
    if not isinstance(boot_raw, dict):
        raise SpecificationError("config: 'bootstrap' must be a mapping")
    mode_name = str(boot_raw.get("mode", "plain"))
    try:
        mode = BootstrapMode(mode_name)
    except ValueError:
        raise SpecificationError(
            f"config: unknown bootstrap mode {mode_name!r}; valid: plain, adaptive_mn"
        ) from None
    seed = int(raw.get("seed", 0))
    try:
        boot = BootstrapConfig(
            b1=int(boot_raw.get("b1", 500)),
            b2=int(boot_raw.get("b2", 500)),
            alpha_start=float(boot_raw.get("alpha_start", 0.025)),
            alpha_step=float(boot_raw.get("alpha_step", 0.025)),
            alpha_cap=float(boot_raw.get("alpha_cap", 0.5)),
            ci_level=float(boot_raw.get("ci_level", 0.95)),
            seed=int(boot_raw.get("seed", seed)),
            mode=mode,
        )
    except ValueError as exc:
        raise SpecificationError(f"config: invalid bootstrap settings: {exc}") from None
    fmt = str(raw.get("output_format", "csv"))
    if fmt not in ("csv", "table"):
        raise SpecificationError("config: output_format must be 'csv' or 'table'")
    return AnalysisConfig(
        input=str(_require(raw, "input", "config")),
        outcome=str(_require(raw, "outcome", "config")),
        stages=tuple(stages),
        estimator=kind,
        censoring=str(raw["censoring"]) if raw.get("censoring") is not None else None,
        censoring_truncation=float(raw.get("censoring_truncation", 0.999)),
        seed=seed,
        output_format=fmt,
        bootstrap=boot,
    )


def load_dataset(config: AnalysisConfig) -> tuple[StagedDataset, int]:
    """Read the configured CSV into a staged dataset.

    Returns (dataset, number of dropped incomplete rows). Rows missing any
    mapped value are dropped, except that censored subjects may have a missing
    outcome.
    """
    frame = pd.read_csv(config.input)
    missing_cols = [c for c in config.mapped_columns() if c not in frame.columns]
    if missing_cols:
        raise SpecificationError(
            f"input {config.input!r} is missing mapped columns: {sorted(set(missing_cols))}"
        )
    required = [c for c in config.mapped_columns() if c != config.outcome]
    complete = frame[required].notna().all(axis=1)
    if config.censoring is not None:
        cens = frame[config.censoring].fillna(1).astype(float) != 0
        complete &= cens | frame[config.outcome].notna()
    else:
        complete &= frame[config.outcome].notna()
    dropped = int((~complete).sum())
    frame = frame.loc[complete]
    if frame.empty:
        raise SpecificationError("no complete rows remain after filtering")
    stages = []
    for sc in config.stages:
        stages.append(
            Stage(
                treatment=frame[sc.treatment].to_numpy(),
                covariates={c: frame[c].to_numpy(dtype=float) for c in sc.covariates},
                treatment_name=sc.treatment,
            )
        )
    censored = None
    outcome = frame[config.outcome].to_numpy(dtype=float)
    if config.censoring is not None:
        censored = frame[config.censoring].to_numpy(dtype=float) != 0
        outcome = np.where(censored, 0.0, outcome)
    return StagedDataset(stages, outcome, censored), dropped


def _censoring_design(dataset: StagedDataset) -> np.ndarray:
    """Design for the censoring model: intercept plus every covariate and
    treatment across stages."""
    cols = [np.ones(dataset.n)]
    for s in dataset.stages:
        for v in s.covariates.values():
            cols.append(v)
        cols.append(s.treatment.astype(float))
    return np.column_stack(cols)


def _fit_with_censoring(dataset, specs, kind, truncation):
    cw = censoring_weights(dataset.censored, _censoring_design(dataset), truncation)
    return fit(dataset, specs, kind, base_weights=cw.values)


def _censored_bootstrap(dataset, specs, kind, config: BootstrapConfig, truncation):
    """Plain bootstrap that refits the censoring model in every replicate."""
    rng = np.random.default_rng([config.seed])
    replicates = []
    attempts = 0
    failures = 0
    while len(replicates) < config.b1:
        if attempts > config.b1 / 0.95 + 1:
            raise InferenceError(
                f"bootstrap fit failures persist: {failures}/{attempts} replicates failed"
            )
        idx = rng.integers(0, dataset.n, size=dataset.n)
        attempts += 1
        try:
            stage_fits = _fit_with_censoring(dataset.take(idx), specs, kind, truncation)
        except Exception:
            failures += 1
            continue
        replicates.append(np.concatenate([sf.psi_pats.psi for sf in stage_fits]))
    return np.array(replicates), failures


@dataclass(frozen=True)
class AnalysisReport:
    """Per-parameter estimates with bootstrap confidence intervals."""

    labels: tuple[tuple[int, str], ...]
    estimate: np.ndarray
    ci_lower: np.ndarray
    ci_upper: np.ndarray
    n_used: int
    n_dropped: int
    estimator: str
    p_hat: float | None = None
    alpha_hat: float | None = None
    m_hat: int | None = None

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["stage", "term", "estimate", "ci_lower", "ci_upper"])
        for k, (stage, term) in enumerate(self.labels):
            writer.writerow(
                [stage, term, repr(float(self.estimate[k])),
                 repr(float(self.ci_lower[k])), repr(float(self.ci_upper[k]))]
            )
        return buf.getvalue()

    def to_table(self) -> str:
        lines = [
            f"estimator {self.estimator}  n={self.n_used}  dropped={self.n_dropped}"
        ]
        if self.p_hat is not None:
            alpha = "-" if self.alpha_hat is None else f"{self.alpha_hat:.6g}"
            lines.append(f"p_hat={self.p_hat:.6g}  alpha_hat={alpha}  m_hat={self.m_hat}")
        lines.append("")
        lines.append(
            f"{'stage':>5} {'term':<12} {'estimate':>12} {'ci_lower':>12} {'ci_upper':>12}"
        )
        for k, (stage, term) in enumerate(self.labels):
            lines.append(
                f"{stage:>5} {term:<12} {self.estimate[k]:>12.6g} "
                f"{self.ci_lower[k]:>12.6g} {self.ci_upper[k]:>12.6g}"
            )
        return "\n".join(lines) + "\n"


def run_analysis(config: AnalysisConfig) -> AnalysisReport:
    """Load the configured dataset, fit the estimator and bootstrap the CIs."""
    dataset, dropped = load_dataset(config)
    specs = config.specs
    if dataset.censored is not None and dataset.censored.any():
        stage_fits = _fit_with_censoring(
            dataset, specs, config.estimator, config.censoring_truncation
        )
        labels = tuple(
            (sf.stage, nm) for sf in stage_fits for nm in sf.psi_pats.terms.names
        )
        point = np.concatenate([sf.psi_pats.psi for sf in stage_fits])
        if config.bootstrap.mode is not BootstrapMode.PLAIN:
            raise SpecificationError(
                "the adaptive bootstrap does not support censored data; use plain mode"
            )
        replicates, _ = _censored_bootstrap(
            dataset, specs, config.estimator, config.bootstrap,
            config.censoring_truncation,
        )
        lower, upper = _percentile_ci(replicates, config.bootstrap.ci_level)
        result = InferenceResult(
            labels=labels, point=point, lower=lower, upper=upper,
            p_hat=None, alpha_hat=None, m_hat=dataset.n,
            replicates=replicates, failures=0,
        )
    else:
        if dataset.censored is not None:  # censoring column present, nobody censored
            dataset = StagedDataset(list(dataset.stages), dataset.outcome)
        result = bootstrap_inference(dataset, specs, config.estimator, config.bootstrap)
    return AnalysisReport(
        labels=result.labels,
        estimate=result.point,
        ci_lower=result.lower,
        ci_upper=result.upper,
        n_used=dataset.n,
        n_dropped=dropped,
        estimator=config.estimator.value,
        p_hat=result.p_hat,
        alpha_hat=result.alpha_hat,
        m_hat=result.m_hat,
    )
