"""Knowledge-component models (Q-matrices) and candidate comparison.

A KC model maps each (problem, step) to the set of skills it exercises.
Candidate models are refined by splitting or merging skills and compared
by refitting the additive-factors model and ranking on AIC.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

from .errors import TutorkitError
from .logstore import Transaction, rollup_student_steps


class KCModelError(TutorkitError):
    pass


class EmptyModel(KCModelError):
    def __init__(self, path):
        super().__init__(f"KC model file has no rows: {path}")


class MalformedRow(KCModelError):
    def __init__(self, row: int, message: str):
        super().__init__(f"row {row}: {message}")
        self.row = row


class UnknownKC(KCModelError):
    def __init__(self, kc: str):
        super().__init__(f"unknown KC label: {kc!r}")
        self.kc = kc


class IncompleteAssignment(KCModelError):
    def __init__(self, missing: Sequence[tuple[str, str]]):
        super().__init__(f"split assignment missing {len(missing)} step(s): {sorted(missing)[:5]}")
        self.missing = sorted(missing)


class UnusedNewLabel(KCModelError):
    def __init__(self, labels: Sequence[str]):
        super().__init__(f"split labels never assigned: {sorted(labels)}")
        self.labels = sorted(labels)


@dataclass(frozen=True)
class KCModel:
    """Named mapping (problem_id, step_id) -> nonempty set of KC labels."""

    name: str
    mapping: Mapping[tuple[str, str], frozenset[str]]

    def __post_init__(self):
        for step, kcs in self.mapping.items():
            if not kcs:
                raise KCModelError(f"step {step} mapped to an empty KC set")

    @property
    def kc_labels(self) -> frozenset[str]:
        labels: set[str] = set()
        for kcs in self.mapping.values():
            labels.update(kcs)
        return frozenset(labels)

    @property
    def steps(self) -> frozenset[tuple[str, str]]:
        return frozenset(self.mapping)


@dataclass(frozen=True)
class SplitRule:
    """Replace one KC with new labels, per-step.

    ``assignment`` must cover exactly the steps currently mapped to
    ``target_kc``, and every new label must be used at least once.
    """

    target_kc: str
    new_labels: tuple[str, ...]
    assignment: Mapping[tuple[str, str], str]

    def __post_init__(self):
        if len(self.new_labels) < 2:
            raise KCModelError("a split needs at least 2 new labels")


def load_kc_model(path, name: Optional[str] = None) -> KCModel:
    """Load a KC model from CSV with columns problem, step, kc.

    Duplicate rows are deduplicated; a step appearing with several KCs maps
    to their union.
    """
    mapping: dict[tuple[str, str], set[str]] = {}
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise EmptyModel(path)
        required = {"problem", "step", "kc"}
        missing = required - set(reader.fieldnames)
        if missing:
            raise KCModelError(f"KC model CSV missing columns: {sorted(missing)}")
        n_rows = 0
        for rownum, row in enumerate(reader, start=1):
            problem = (row.get("problem") or "").strip()
            step = (row.get("step") or "").strip()
            kc = (row.get("kc") or "").strip()
            if not (problem and step and kc):
                raise MalformedRow(rownum, f"empty field in {row}")
            mapping.setdefault((problem, step), set()).add(kc)
            n_rows += 1
    if n_rows == 0:
        raise EmptyModel(path)
    frozen = {step: frozenset(kcs) for step, kcs in mapping.items()}
    import os

    return KCModel(name=name or os.path.splitext(os.path.basename(path))[0], mapping=frozen)


def save_kc_model(model: KCModel, path) -> None:
    """Write a KC model as CSV (problem, step, kc), one row per pair."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["problem", "step", "kc"])
        for (problem, step), kcs in sorted(model.mapping.items()):
            for kc in sorted(kcs):
                writer.writerow([problem, step, kc])


def load_split_rule(path, target_kc: str, model: KCModel) -> SplitRule:
    """Load a split-rule CSV with columns problem, step, new_kc."""
    assignment: dict[tuple[str, str], str] = {}
    labels: set[str] = set()
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        for rownum, row in enumerate(reader, start=1):
            problem = (row.get("problem") or "").strip()
            step = (row.get("step") or "").strip()
            new_kc = (row.get("new_kc") or "").strip()
            if not (problem and step and new_kc):
                raise MalformedRow(rownum, f"empty field in {row}")
            assignment[(problem, step)] = new_kc
            labels.add(new_kc)
    return SplitRule(target_kc=target_kc, new_labels=tuple(sorted(labels)), assignment=assignment)


def split_kc(model: KCModel, rule: SplitRule) -> KCModel:
    """Split one KC into several, per the rule's step assignment.

    The returned model replaces the target KC on each of its steps by the
    assigned new label; all other mappings are untouched.
    """
    if rule.target_kc not in model.kc_labels:
        raise UnknownKC(rule.target_kc)
    target_steps = {s for s, kcs in model.mapping.items() if rule.target_kc in kcs}
    missing = target_steps - set(rule.assignment)
    if missing:
        raise IncompleteAssignment(sorted(missing))
    extra = set(rule.assignment) - target_steps
    if extra:
        raise KCModelError(
            f"split assignment covers steps not mapped to {rule.target_kc!r}: {sorted(extra)[:5]}"
        )
    used = {rule.assignment[s] for s in target_steps}
    unused = set(rule.new_labels) - used
    if unused:
        raise UnusedNewLabel(sorted(unused))

    new_mapping: dict[tuple[str, str], frozenset[str]] = {}
    for step, kcs in model.mapping.items():
        if rule.target_kc in kcs:
            kcs = (kcs - {rule.target_kc}) | {rule.assignment[step]}
        new_mapping[step] = frozenset(kcs)
    return KCModel(name=f"{model.name}+split({rule.target_kc})", mapping=new_mapping)


def merge_kcs(model: KCModel, labels: set[str], new_label: str) -> KCModel:
    """Merge a set of KC labels into one; sets deduplicate naturally."""
    unknown = set(labels) - set(model.kc_labels)
    if unknown:
        raise UnknownKC(sorted(unknown)[0])
    new_mapping = {}
    for step, kcs in model.mapping.items():
        if kcs & labels:
            kcs = (kcs - labels) | {new_label}
        new_mapping[step] = frozenset(kcs)
    return KCModel(name=f"{model.name}+merge({new_label})", mapping=new_mapping)


@dataclass(frozen=True)
class CandidateResult:
    """Fit summary for one candidate KC model."""

    name: str
    log_lik: float
    aic: float
    bic: float
    n_params: int
    n_kcs: int
    gamma: Mapping[str, float]  # per-KC fitted learning slope
    failure: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.failure is None


@dataclass(frozen=True)
class ModelComparison:
    """Ranking of candidate KC models, ascending by AIC."""

    ranked: tuple[CandidateResult, ...]
    failed: tuple[CandidateResult, ...] = ()

    def best(self) -> CandidateResult:
        return self.ranked[0]


def compare_models(
    transactions: Sequence[Transaction],
    candidates: Sequence[KCModel],
    fit_config=None,
) -> ModelComparison:
    """Roll up and fit each candidate, then rank by AIC.

    Ties break by fewer parameters, then by name. Candidates that fail to
    roll up or fit are excluded from the ranking with a reason.
    """
    from .afm import AFMFitConfig, fit_afm

    if len(candidates) < 2:
        raise KCModelError("need at least 2 candidate models to compare")
    config = fit_config or AFMFitConfig()

    results: list[CandidateResult] = []
    failed: list[CandidateResult] = []
    for model in candidates:
        try:
            table = rollup_student_steps(transactions, model)
            fit = fit_afm(table, config)
        except TutorkitError as exc:
            failed.append(
                CandidateResult(
                    name=model.name,
                    log_lik=float("nan"),
                    aic=float("inf"),
                    bic=float("inf"),
                    n_params=0,
                    n_kcs=len(model.kc_labels),
                    gamma={},
                    failure=f"{type(exc).__name__}: {exc}",
                )
            )
            continue
        results.append(
            CandidateResult(
                name=model.name,
                log_lik=fit.log_lik,
                aic=fit.aic,
                bic=fit.bic,
                n_params=fit.n_params,
                n_kcs=len(fit.gamma),
                gamma=dict(fit.gamma),
            )
        )
    results.sort(key=lambda r: (r.aic, r.n_params, r.name))
    return ModelComparison(ranked=tuple(results), failed=tuple(failed))
