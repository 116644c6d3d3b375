"""Longitudinal data model, design-matrix construction and decision rules.

Everything downstream (weights, the eight estimators, the bootstrap, the
simulation harness) consumes the types defined here: a staged dataset of
subject trajectories, term lists describing the treatment / treatment-free /
blip models at each stage, and blip coefficient vectors with their evaluation
and argmax decision rule.

All types are immutable after construction and all operations are pure, so
they can be shared freely across bootstrap or replication workers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Iterator, Mapping, Sequence

import numpy as np

from .errors import SpecificationError, UnsupportedFeatureError

__all__ = [
    "Intercept",
    "MainEffect",
    "Interaction",
    "TermList",
    "StageSpec",
    "Stage",
    "StagedDataset",
    "BlipKind",
    "BlipCoefficients",
    "build_design_row",
    "blip_value",
    "optimal_decision",
    "parse_term",
]


# ---------------------------------------------------------------------------
# Terms


@dataclass(frozen=True)
class Intercept:
    def columns(self) -> tuple[str, ...]:
        return ()

    @property
    def name(self) -> str:
        return "intercept"


@dataclass(frozen=True)
class MainEffect:
    column: str

    def columns(self) -> tuple[str, ...]:
        return (self.column,)

    @property
    def name(self) -> str:
        return self.column


@dataclass(frozen=True)
class Interaction:
    left: str
    right: str

    def columns(self) -> tuple[str, ...]:
        return (self.left, self.right)

    @property
    def name(self) -> str:
        return f"{self.left}:{self.right}"


Term = Intercept | MainEffect | Interaction


def parse_term(text: str) -> Term:
    """Parse a term from its string form: ``"1"``, ``"x1"`` or ``"x1:x2"``."""
    text = text.strip()
    if text in ("1", "intercept"):
        return Intercept()
    if ":" in text:
        left, _, right = text.partition(":")
        left, right = left.strip(), right.strip()
        if not left or not right or ":" in right:
            raise SpecificationError(f"malformed interaction term {text!r}")
        return Interaction(left, right)
    if not text:
        raise SpecificationError("empty term")
    return MainEffect(text)


@dataclass(frozen=True)
class TermList:
    """Ordered list of model terms, evaluated against a subject history.

    The column order of any design built from a TermList is the declared term
    order. An Intercept, if present, must come first.
    """

    terms: tuple[Term, ...]

    def __init__(self, terms: Sequence[Term | str]):
        parsed = tuple(parse_term(t) if isinstance(t, str) else t for t in terms)
        for i, t in enumerate(parsed):
            if isinstance(t, Intercept) and i != 0:
                raise SpecificationError("Intercept, if present, must be the first term")
        if len(parsed) != len(set(parsed)):
            raise SpecificationError("duplicate terms in term list")
        object.__setattr__(self, "terms", parsed)

    def __len__(self) -> int:
        return len(self.terms)

    def __iter__(self) -> Iterator[Term]:
        return iter(self.terms)

    @property
    def names(self) -> list[str]:
        return [t.name for t in self.terms]

    def columns(self) -> set[str]:
        """All history columns referenced by any term."""
        out: set[str] = set()
        for t in self.terms:
            out.update(t.columns())
        return out

    def main_effect_columns(self) -> set[str]:
        return {t.column for t in self.terms if isinstance(t, MainEffect)}

    def design_matrix(self, history: Mapping[str, np.ndarray]) -> np.ndarray:
        """Evaluate every term against per-subject history columns.

        Returns an (n, p) float array with columns in declared term order.
        """
        cols = []
        n = None
        for t in self.terms:
            if isinstance(t, Intercept):
                cols.append(None)  # filled once n is known
                continue
            for c in t.columns():
                if c not in history:
                    raise SpecificationError(f"term {t.name!r} references missing column {c!r}")
            if isinstance(t, MainEffect):
                v = np.asarray(history[t.column], dtype=float)
            else:
                v = np.asarray(history[t.left], dtype=float) * np.asarray(
                    history[t.right], dtype=float
                )
            n = v.shape[0]
            cols.append(v)
        if n is None:  # intercept-only model: infer n from any column
            if history:
                n = len(next(iter(history.values())))
            else:
                raise SpecificationError("cannot size an intercept-only design from an empty history")
        out = np.empty((n, len(self.terms)), dtype=float)
        for k, v in enumerate(cols):
            out[:, k] = 1.0 if v is None else v
        return out


def build_design_row(terms: TermList, history: Mapping[str, float]) -> np.ndarray:
    """Evaluate a term list for one subject: Intercept -> 1, MainEffect -> value,
    Interaction -> product. Raises SpecificationError naming any missing column."""
    out = np.empty(len(terms), dtype=float)
    for k, t in enumerate(terms):
        if isinstance(t, Intercept):
            out[k] = 1.0
            continue
        for c in t.columns():
            if c not in history:
                raise SpecificationError(f"term {t.name!r} references missing column {c!r}")
        if isinstance(t, MainEffect):
            out[k] = float(history[t.column])
        else:
            out[k] = float(history[t.left]) * float(history[t.right])
    return out


# ---------------------------------------------------------------------------
# Stage specification


@dataclass(frozen=True)
class StageSpec:
    """Per-stage model specification.

    Attributes
    ----------
    treatment_terms : model for E[A_j | H_j] (logistic).
    treatment_free_terms : the treatment-free outcome component f_j(h_j; beta_j).
    blip_terms : covariates interacting with a_j in the full-history blip.
    tailoring_terms : blip terms over the tailoring subset only; used by the
        partially adaptive estimators. May equal ``blip_terms``.
    tailoring_columns : the tailoring covariate subset. Defaults to the columns
        referenced by ``tailoring_terms``.
    """

    treatment_terms: TermList
    treatment_free_terms: TermList
    blip_terms: TermList
    tailoring_terms: TermList | None = None
    tailoring_columns: frozenset[str] = field(default_factory=frozenset)

    def __post_init__(self):
        tail = self.tailoring_terms if self.tailoring_terms is not None else self.blip_terms
        object.__setattr__(self, "tailoring_terms", tail)
        if not self.tailoring_columns:
            object.__setattr__(self, "tailoring_columns", frozenset(tail.columns()))
        extra = tail.columns() - self.tailoring_columns
        if extra:
            raise SpecificationError(
                f"tailoring terms reference non-tailoring columns: {sorted(extra)}"
            )
        # dWOLS hierarchy: every blip covariate must appear as a main effect in
        # the treatment-free component.
        missing = self.blip_terms.columns() - self.treatment_free_terms.main_effect_columns()
        if missing:
            raise SpecificationError(
                "blip covariates must appear as main effects in the treatment-free "
                f"component; missing: {sorted(missing)}"
            )

    def validate_against(self, history_columns: set[str], stage: int) -> None:
        for tl, label in (
            (self.treatment_terms, "treatment"),
            (self.treatment_free_terms, "treatment-free"),
            (self.blip_terms, "blip"),
            (self.tailoring_terms, "tailoring"),
        ):
            missing = tl.columns() - history_columns
            if missing:
                raise SpecificationError(
                    f"stage {stage} {label} model references columns absent from the "
                    f"history: {sorted(missing)}"
                )
        if not self.tailoring_columns <= history_columns:
            raise SpecificationError(
                f"stage {stage} tailoring columns absent from the history: "
                f"{sorted(self.tailoring_columns - history_columns)}"
            )


# ---------------------------------------------------------------------------
# Dataset


@dataclass(frozen=True)
class Stage:
    """One treatment stage: a binary treatment vector and named covariates."""

    treatment: np.ndarray
    covariates: Mapping[str, np.ndarray]
    treatment_name: str

    def __post_init__(self):
        a = np.asarray(self.treatment)
        if a.ndim != 1:
            raise SpecificationError("treatment must be a 1-d vector")
        vals = np.unique(a)
        if not np.all(np.isin(vals, (0, 1))):
            raise UnsupportedFeatureError(
                "treatments must be binary coded 0/1; multilevel or continuous "
                "treatments are not supported"
            )
        object.__setattr__(self, "treatment", a.astype(np.int8))
        covs = {k: np.ascontiguousarray(v, dtype=float) for k, v in self.covariates.items()}
        for k, v in covs.items():
            if v.shape != a.shape:
                raise SpecificationError(f"covariate {k!r} length differs from treatment length")
        object.__setattr__(self, "covariates", covs)


class StagedDataset:
    """n subjects followed over K stages with a single final outcome.

    The history before treatment j is every covariate measured up to and
    including stage j plus all earlier treatments; ``history(j)`` materializes
    it as a column mapping.
    """

    def __init__(
        self,
        stages: Sequence[Stage],
        outcome: np.ndarray,
        censored: np.ndarray | None = None,
    ):
        if not stages:
            raise SpecificationError("at least one stage is required")
        self.stages: tuple[Stage, ...] = tuple(stages)
        y = np.asarray(outcome, dtype=float)
        n = self.stages[0].treatment.shape[0]
        if y.shape != (n,):
            raise SpecificationError("outcome length differs from subject count")
        for j, s in enumerate(self.stages, start=1):
            if s.treatment.shape[0] != n:
                raise SpecificationError(f"stage {j} has a different subject count")
        names = [s.treatment_name for s in self.stages]
        if len(set(names)) != len(names):
            raise SpecificationError("treatment names must be unique across stages")
        seen: set[str] = set(names)
        for j, s in enumerate(self.stages, start=1):
            dup = set(s.covariates) & seen
            if dup:
                raise SpecificationError(f"stage {j} redefines columns {sorted(dup)}")
            seen.update(s.covariates)
        if censored is not None:
            c = np.asarray(censored).astype(bool)
            if c.shape != (n,):
                raise SpecificationError("censoring indicator length differs from subject count")
            self.censored = c
            if not np.all(np.isfinite(y[~c])):
                raise SpecificationError("outcome must be finite for every uncensored subject")
        else:
            self.censored = None
            if not np.all(np.isfinite(y)):
                raise SpecificationError("outcome must be finite for every subject")
        self.outcome = y
        self.n = n
        self.n_stages = len(self.stages)

    def history(self, stage: int) -> dict[str, np.ndarray]:
        """Columns observable before the stage-``stage`` treatment (1-based)."""
        if not 1 <= stage <= self.n_stages:
            raise SpecificationError(f"stage {stage} out of range 1..{self.n_stages}")
        out: dict[str, np.ndarray] = {}
        for j in range(stage):
            s = self.stages[j]
            out.update(s.covariates)
            if j < stage - 1:
                out[s.treatment_name] = s.treatment.astype(float)
        return out

    def history_columns(self, stage: int) -> set[str]:
        return set(self.history(stage).keys())

    def take(self, indices: np.ndarray) -> "StagedDataset":
        """Row-subset / resample by subject indices (whole trajectories)."""
        idx = np.asarray(indices)
        stages = [
            Stage(
                treatment=s.treatment[idx],
                covariates={k: v[idx] for k, v in s.covariates.items()},
                treatment_name=s.treatment_name,
            )
            for s in self.stages
        ]
        cens = self.censored[idx] if self.censored is not None else None
        return StagedDataset(stages, self.outcome[idx], cens)


# ---------------------------------------------------------------------------
# Blip coefficients and decisions


class BlipKind(Enum):
    ATS = "ats"
    PATS = "pats"
    INTERMEDIATE = "intermediate"


@dataclass(frozen=True)
class BlipCoefficients:
    """A blip coefficient vector aligned with a term list."""

    psi: np.ndarray
    terms: TermList
    stage: int
    kind: BlipKind

    def __post_init__(self):
        psi = np.asarray(self.psi, dtype=float)
        if psi.shape != (len(self.terms),):
            raise SpecificationError(
                f"coefficient length {psi.shape} does not match term list of "
                f"length {len(self.terms)}"
            )
        if not np.all(np.isfinite(psi)):
            raise SpecificationError("blip coefficients must be finite")
        object.__setattr__(self, "psi", psi)


def blip_value(
    coef: BlipCoefficients, terms: TermList, a: int, history: Mapping[str, float]
) -> float:
    """a * (design_row . psi); exactly 0 for the reference treatment a = 0."""
    if a not in (0, 1):
        raise UnsupportedFeatureError("binary treatment required")
    if len(coef.psi) != len(terms):
        raise SpecificationError("coefficients are not aligned with the term list")
    if a == 0:
        return 0.0
    row = build_design_row(terms, history)
    return float(row @ coef.psi)


def optimal_decision(
    coef: BlipCoefficients, terms: TermList, history: Mapping[str, float]
) -> int:
    """1 iff treating has a strictly positive blip; ties go to the reference 0."""
    return 1 if blip_value(coef, terms, 1, history) > 0.0 else 0
