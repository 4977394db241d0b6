"""Offline simulation of practice policies.

A simulated tutor selects problems from a pool, optionally skipping steps
whose KCs are all estimated mastered, while a synthetic student (with its
own ground-truth model, deliberately separate from the tutor's tracker)
produces correct/incorrect responses. Reports quantify opportunities,
over-practice past a threshold, under-practice, skips, and time.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Optional, Sequence

import numpy as np

from .bkt import BKTParams, update_p_know
from .errors import TutorkitError


class SimError(TutorkitError):
    pass


class EmptyPool(SimError):
    def __init__(self):
        super().__init__("problem pool is empty")


@dataclass(frozen=True)
class Problem:
    problem_id: str
    steps: tuple[tuple[str, frozenset[str]], ...]  # (step_id, KC set), in order
    est_step_seconds: float = 30.0

    def __post_init__(self):
        if not self.steps:
            raise SimError(f"problem {self.problem_id!r} has no steps")
        if self.est_step_seconds <= 0:
            raise SimError("est_step_seconds must be positive")


@dataclass(frozen=True)
class ProblemPool:
    problems: tuple[Problem, ...]

    def __post_init__(self):
        if not self.problems:
            raise EmptyPool()

    @property
    def kcs(self) -> frozenset[str]:
        out: set[str] = set()
        for p in self.problems:
            for _, kcs in p.steps:
                out.update(kcs)
        return frozenset(out)


class Selection(str, Enum):
    FIXED_SEQUENCE = "FIXED_SEQUENCE"
    ADAPTIVE = "ADAPTIVE"


@dataclass(frozen=True)
class PolicyConfig:
    mastery_threshold: float = 0.95
    overpractice_threshold: float = 0.80
    skip_enabled: bool = False
    selection: Selection = Selection.ADAPTIVE
    max_problems: int = 100
    rng_seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.overpractice_threshold <= self.mastery_threshold <= 1.0:
            raise SimError(
                "need 0 < overpractice_threshold <= mastery_threshold <= 1, got "
                f"{self.overpractice_threshold} / {self.mastery_threshold}"
            )


class Generator(str, Enum):
    BKT_TRUTH = "BKT_TRUTH"
    AFM_TRUTH = "AFM_TRUTH"


@dataclass(frozen=True)
class SyntheticStudent:
    """Ground-truth response model for one simulated student.

    BKT_TRUTH: a latent known/unknown state per KC evolving by the learn
    rate. AFM_TRUTH: success probability from a logistic opportunity model
    with the student's own proficiency.
    """

    generator: Generator
    bkt_truth: Optional[Mapping[str, BKTParams]] = None
    theta: float = 0.0
    afm_beta: Optional[Mapping[str, float]] = None
    afm_gamma: Optional[Mapping[str, float]] = None

    def __post_init__(self):
        if self.generator is Generator.BKT_TRUTH and self.bkt_truth is None:
            raise SimError("BKT_TRUTH student needs bkt_truth parameters")
        if self.generator is Generator.AFM_TRUTH and (
            self.afm_beta is None or self.afm_gamma is None
        ):
            raise SimError("AFM_TRUTH student needs afm_beta and afm_gamma")

    def spawn(self, rng: np.random.Generator) -> "_StudentState":
        return _StudentState(self, rng)


class _StudentState:
    """Stateful per-run instantiation of a SyntheticStudent."""

    def __init__(self, spec: SyntheticStudent, rng: np.random.Generator):
        self.spec = spec
        self.rng = rng
        self.known: dict[str, bool] = {}
        self.opps: dict[str, int] = {}
        if spec.generator is Generator.BKT_TRUTH:
            for kc in sorted(spec.bkt_truth):
                p = spec.bkt_truth[kc]
                self.known[kc] = bool(rng.random() < p.p_init)

    def answer(self, kcs: frozenset[str]) -> bool:
        """Sample a first-attempt response for a step and advance state."""
        spec = self.spec
        if spec.generator is Generator.BKT_TRUTH:
            p_correct = 1.0
            for kc in sorted(kcs):
                p = spec.bkt_truth[kc]
                p_kc = (1.0 - p.p_slip) if self.known[kc] else p.p_guess
                p_correct *= p_kc
            correct = bool(self.rng.random() < p_correct)
            for kc in sorted(kcs):
                p = spec.bkt_truth[kc]
                if not self.known[kc] and self.rng.random() < p.p_learn:
                    self.known[kc] = True
            return correct
        z = spec.theta
        for kc in sorted(kcs):
            t = self.opps.get(kc, 0)
            z += spec.afm_beta[kc] + spec.afm_gamma[kc] * t
            self.opps[kc] = t + 1
        p_correct = 1.0 / (1.0 + math.exp(-z))
        return bool(self.rng.random() < p_correct)


@dataclass(frozen=True)
class KCOutcome:
    opportunities: int
    opportunities_after_overpractice_threshold: int
    final_mastery_estimate: float
    underpracticed: bool


@dataclass(frozen=True)
class SimReport:
    per_kc: Mapping[str, KCOutcome]
    skipped_steps: int
    completed_steps: int
    simulated_seconds: float
    problems_attempted: int = 0

    def to_dict(self) -> dict:
        return {
            "per_kc": {
                kc: {
                    "opportunities": o.opportunities,
                    "opportunities_after_overpractice_threshold": o.opportunities_after_overpractice_threshold,
                    "final_mastery_estimate": o.final_mastery_estimate,
                    "underpracticed": o.underpracticed,
                }
                for kc, o in sorted(self.per_kc.items())
            },
            "skipped_steps": self.skipped_steps,
            "completed_steps": self.completed_steps,
            "simulated_seconds": self.simulated_seconds,
            "problems_attempted": self.problems_attempted,
        }


def select_next_problem(
    pool: ProblemPool,
    mastery: Mapping[str, float],
    completed: set[str],
    config: PolicyConfig,
) -> Optional[str]:
    """Pick the next problem, or None when practice is done.

    ADAPTIVE maximizes the count of steps containing at least one
    unmastered KC; ties break by fewest fully-mastered steps, then by
    problem_id. Done when no uncompleted problem practices an unmastered
    KC. FIXED_SEQUENCE walks the pool in order until exhausted.
    """
    candidates = [p for p in pool.problems if p.problem_id not in completed]
    if not candidates:
        return None
    if config.selection is Selection.FIXED_SEQUENCE:
        return candidates[0].problem_id

    def unmastered(kcs: frozenset[str]) -> bool:
        return any(mastery[kc] < config.mastery_threshold for kc in kcs)

    best_id = None
    best_key = None
    for p in candidates:
        utility = sum(1 for _, kcs in p.steps if unmastered(kcs))
        mastered_steps = sum(1 for _, kcs in p.steps if not unmastered(kcs))
        key = (-utility, mastered_steps, p.problem_id)
        if utility > 0 and (best_key is None or key < best_key):
            best_key = key
            best_id = p.problem_id
    return best_id


def should_skip_step(
    step_kcs: frozenset[str],
    mastery: Mapping[str, float],
    config: PolicyConfig,
) -> bool:
    """True iff skipping is enabled and every KC on the step is at or above
    the mastery threshold."""
    if not config.skip_enabled:
        return False
    return all(mastery[kc] >= config.mastery_threshold for kc in step_kcs)


def simulate_practice(
    pool: ProblemPool,
    student: SyntheticStudent,
    tracker_params: Mapping[str, BKTParams],
    config: PolicyConfig,
    rng: Optional[np.random.Generator] = None,
) -> SimReport:
    """Run one student through the pool under a policy.

    The tutor's tracker (two-state tracing with ``tracker_params``) decides
    selection and skipping; the student's ground truth generates responses.
    Fully deterministic given the config's rng_seed.
    """
    missing = pool.kcs - set(tracker_params)
    if missing:
        raise SimError(f"tracker_params missing KCs: {sorted(missing)}")
    if rng is None:
        rng = np.random.default_rng(config.rng_seed)
    state = student.spawn(rng)

    mastery = {kc: tracker_params[kc].p_init for kc in sorted(pool.kcs)}
    opportunities = {kc: 0 for kc in mastery}
    over_ops = {kc: 0 for kc in mastery}
    skipped = 0
    done_steps = 0
    seconds = 0.0
    completed: set[str] = set()
    by_id = {p.problem_id: p for p in pool.problems}

    while len(completed) < config.max_problems:
        pid = select_next_problem(pool, mastery, completed, config)
        if pid is None:
            break
        problem = by_id[pid]
        for _, kcs in problem.steps:
            if should_skip_step(kcs, mastery, config):
                # Never skip below threshold; guarded here as well as in tests.
                assert all(mastery[kc] >= config.mastery_threshold for kc in kcs)
                skipped += 1
                continue
            correct = state.answer(kcs)
            for kc in sorted(kcs):
                if mastery[kc] >= config.overpractice_threshold:
                    over_ops[kc] += 1
                opportunities[kc] += 1
                mastery[kc] = update_p_know(mastery[kc], tracker_params[kc], correct)
            done_steps += 1
            seconds += problem.est_step_seconds
        completed.add(pid)

    per_kc = {
        kc: KCOutcome(
            opportunities=opportunities[kc],
            opportunities_after_overpractice_threshold=over_ops[kc],
            final_mastery_estimate=mastery[kc],
            underpracticed=mastery[kc] < config.mastery_threshold,
        )
        for kc in mastery
    }
    return SimReport(
        per_kc=per_kc,
        skipped_steps=skipped,
        completed_steps=done_steps,
        simulated_seconds=seconds,
        problems_attempted=len(completed),
    )


@dataclass(frozen=True)
class PolicyAggregate:
    """Population summary of simulation runs under one config."""

    config: PolicyConfig
    n_students: int
    mean: Mapping[str, float]  # scalar report fields
    sd: Mapping[str, float]  # sample SD (n-1); 0.0 when n == 1
    per_kc_mean_opportunities: Mapping[str, float]
    per_kc_mean_over_threshold: Mapping[str, float]
    reports: tuple[SimReport, ...] = ()

    def to_dict(self) -> dict:
        return {
            "n_students": self.n_students,
            "mean": dict(self.mean),
            "sd": dict(self.sd),
            "per_kc_mean_opportunities": dict(self.per_kc_mean_opportunities),
            "per_kc_mean_over_threshold": dict(self.per_kc_mean_over_threshold),
            "selection": self.config.selection.value,
            "skip_enabled": self.config.skip_enabled,
        }


_SCALAR_FIELDS = ("skipped_steps", "completed_steps", "simulated_seconds", "total_opportunities", "total_over_threshold")


def _scalars(report: SimReport) -> dict[str, float]:
    return {
        "skipped_steps": float(report.skipped_steps),
        "completed_steps": float(report.completed_steps),
        "simulated_seconds": float(report.simulated_seconds),
        "total_opportunities": float(sum(o.opportunities for o in report.per_kc.values())),
        "total_over_threshold": float(
            sum(o.opportunities_after_overpractice_threshold for o in report.per_kc.values())
        ),
    }


def _sd(values) -> float:
    arr = np.asarray(values, dtype=float)
    return float(arr.std(ddof=1)) if len(arr) > 1 else 0.0


def compare_policies(
    pool: ProblemPool,
    population: Sequence[SyntheticStudent],
    tracker_params: Mapping[str, BKTParams],
    configs: Sequence[PolicyConfig],
) -> tuple[list[PolicyAggregate], dict[str, dict[str, float]]]:
    """Aggregate simulation outcomes per config over a shared population.

    Student i gets the same rng stream under every config (derived from
    that config's rng_seed and i), so configs with equal seeds are paired.
    Returns the per-config aggregates and mean paired per-student
    differences of each later config against the first.
    """
    if not population:
        raise SimError("population must have at least 1 student")
    all_reports: list[list[SimReport]] = []
    aggregates = []
    for config in configs:
        reports = []
        for i, student in enumerate(population):
            rng = np.random.default_rng(
                np.random.SeedSequence(entropy=config.rng_seed, spawn_key=(i,))
            )
            reports.append(
                simulate_practice(pool, student, tracker_params, config, rng=rng)
            )
        all_reports.append(reports)
        scalars = [_scalars(r) for r in reports]
        mean = {f: float(np.mean([s[f] for s in scalars])) for f in _SCALAR_FIELDS}
        sd = {f: _sd([s[f] for s in scalars]) for f in _SCALAR_FIELDS}
        kcs = sorted(pool.kcs)
        per_kc_opp = {
            kc: float(np.mean([r.per_kc[kc].opportunities for r in reports])) for kc in kcs
        }
        per_kc_over = {
            kc: float(
                np.mean(
                    [r.per_kc[kc].opportunities_after_overpractice_threshold for r in reports]
                )
            )
            for kc in kcs
        }
        aggregates.append(
            PolicyAggregate(
                config=config,
                n_students=len(population),
                mean=mean,
                sd=sd,
                per_kc_mean_opportunities=per_kc_opp,
                per_kc_mean_over_threshold=per_kc_over,
                reports=tuple(reports),
            )
        )

    paired: dict[str, dict[str, float]] = {}
    base = [_scalars(r) for r in all_reports[0]]
    for j in range(1, len(configs)):
        other = [_scalars(r) for r in all_reports[j]]
        diffs = {
            f: float(np.mean([o[f] - b[f] for o, b in zip(other, base)]))
            for f in _SCALAR_FIELDS
        }
        paired[f"config_{j}_minus_config_0"] = diffs
    return aggregates, paired


def load_pool(path) -> ProblemPool:
    """Load a pool from CSV: problem, step, kcs (';'-separated),
    est_step_seconds. Step order within a problem is file order."""
    rows_by_problem: dict[str, list[tuple[str, frozenset[str]]]] = {}
    seconds: dict[str, float] = {}
    order: list[str] = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            pid = (row.get("problem") or "").strip()
            step = (row.get("step") or "").strip()
            kcs = frozenset(k.strip() for k in (row.get("kcs") or "").split(";") if k.strip())
            if not (pid and step and kcs):
                raise SimError(f"malformed pool row: {row}")
            if pid not in rows_by_problem:
                rows_by_problem[pid] = []
                order.append(pid)
            rows_by_problem[pid].append((step, kcs))
            sec = (row.get("est_step_seconds") or "").strip()
            if sec:
                seconds[pid] = float(sec)
    problems = tuple(
        Problem(
            problem_id=pid,
            steps=tuple(rows_by_problem[pid]),
            est_step_seconds=seconds.get(pid, 30.0),
        )
        for pid in order
    )
    return ProblemPool(problems=problems)


def save_pool(pool: ProblemPool, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["problem", "step", "kcs", "est_step_seconds"])
        for p in pool.problems:
            for step, kcs in p.steps:
                writer.writerow([p.problem_id, step, ";".join(sorted(kcs)), p.est_step_seconds])
