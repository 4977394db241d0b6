"""Process measures from logs: time-on-task, productivity, opportunity
allocation, and knowledge summaries by condition.

Time-on-task subtracts idle periods (inter-transaction gaps strictly
longer than the threshold, two minutes by default) from logged-in time
per session. All standard deviations are sample SDs (n-1).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from .afm import KnowledgeEstimate
from .bkt import BKTParams, update_p_know
from .errors import TutorkitError
from .logstore import StudentStepTable, Transaction


class MetricsError(TutorkitError):
    pass


class UnknownKC(MetricsError):
    def __init__(self, kc: str):
        super().__init__(f"new-KC list names a KC absent from the data: {kc!r}")
        self.kc = kc


@dataclass(frozen=True)
class TimeBreakdown:
    student: str
    session: str
    logged_in_seconds: float  # last - first transaction timestamp in the session
    idle_seconds: float  # sum of gaps strictly above the idle threshold
    active_seconds: float

    def __post_init__(self):
        if abs(self.active_seconds - (self.logged_in_seconds - self.idle_seconds)) > 1e-9:
            raise MetricsError("active must equal logged_in - idle")
        if self.idle_seconds < 0 or self.active_seconds < -1e-9:
            raise MetricsError("negative time component")


def time_on_task(
    transactions: Sequence[Transaction],
    idle_threshold_seconds: float = 120.0,
    subtract_excess_only: bool = False,
) -> list[TimeBreakdown]:
    """Per-(student, session) time breakdown.

    A gap counts as idle when strictly greater than the threshold; by
    default the whole gap is subtracted. ``subtract_excess_only`` instead
    subtracts only the part beyond the threshold (sensitivity analysis).
    Single-transaction sessions yield all-zero breakdowns.
    """
    by_session: dict[tuple[str, str], list[float]] = {}
    for t in transactions:
        by_session.setdefault((t.student_id, t.session_id), []).append(t.timestamp)

    out = []
    for (student, session), times in sorted(by_session.items()):
        times.sort()
        logged_in = times[-1] - times[0]
        idle = 0.0
        for a, b in zip(times, times[1:]):
            gap = b - a
            if gap > idle_threshold_seconds:
                idle += (gap - idle_threshold_seconds) if subtract_excess_only else gap
        out.append(
            TimeBreakdown(
                student=student,
                session=session,
                logged_in_seconds=logged_in,
                idle_seconds=idle,
                active_seconds=logged_in - idle,
            )
        )
    return out


@dataclass(frozen=True)
class ProductivityRow:
    student: str
    condition: Optional[str]
    unit: Optional[str]
    completed_steps: int


def productivity(table: StudentStepTable) -> list[ProductivityRow]:
    """Completed step-instance counts per student x condition x unit.

    A step instance counts as completed when some attempt in it was
    correct.
    """
    counts: dict[tuple[str, Optional[str], Optional[str]], int] = {}
    for rec in table.records:
        if rec.completed:
            key = (rec.student_id, rec.condition_tag, rec.unit_tag)
            counts[key] = counts.get(key, 0) + 1
    return [
        ProductivityRow(student=s, condition=c, unit=u, completed_steps=n)
        for (s, c, u), n in sorted(counts.items(), key=lambda kv: (kv[0][0], kv[0][1] or "", kv[0][2] or ""))
    ]


class KCType:
    NEW = "NEW"
    ESTABLISHED = "ESTABLISHED"


@dataclass(frozen=True)
class AllocationRow:
    condition: Optional[str]
    kc: str
    kc_type: str  # NEW or ESTABLISHED
    opportunities: int
    opportunities_after_overpractice: int


def opportunity_allocation(
    table: StudentStepTable,
    new_kc_list: Sequence[str],
    bkt_params: Mapping[str, BKTParams],
    overpractice_threshold: float = 0.80,
) -> list[AllocationRow]:
    """Opportunity counts per (condition, KC), splitting out opportunities
    taken while the traced mastery estimate was already at or above the
    threshold.

    Tracing runs over each student's full per-KC sequence in time order;
    each opportunity is attributed to the condition of its record.
    """
    unknown = set(new_kc_list) - set(table.kcs)
    if unknown:
        raise UnknownKC(sorted(unknown)[0])
    new_kcs = set(new_kc_list)

    totals: dict[tuple[Optional[str], str], int] = {}
    over: dict[tuple[Optional[str], str], int] = {}
    # table.records are ordered by student, then time; trace in that order.
    p_know: dict[tuple[str, str], float] = {}
    for rec in table.records:
        for kc in sorted(rec.kcs):
            params = bkt_params.get(kc)
            if params is None:
                raise MetricsError(f"no tracing parameters for KC {kc!r}")
            state_key = (rec.student_id, kc)
            current = p_know.get(state_key, params.p_init)
            key = (rec.condition_tag, kc)
            totals[key] = totals.get(key, 0) + 1
            if current >= overpractice_threshold:
                over[key] = over.get(key, 0) + 1
            p_know[state_key] = update_p_know(current, params, rec.first_attempt_correct)

    return [
        AllocationRow(
            condition=cond,
            kc=kc,
            kc_type=KCType.NEW if kc in new_kcs else KCType.ESTABLISHED,
            opportunities=totals[(cond, kc)],
            opportunities_after_overpractice=over.get((cond, kc), 0),
        )
        for cond, kc in sorted(totals, key=lambda k: (k[0] or "", k[1]))
    ]


def _mean_sd(values: Sequence[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=float)
    mean = float(arr.mean()) if len(arr) else float("nan")
    sd = float(arr.std(ddof=1)) if len(arr) > 1 else 0.0
    return mean, sd


@dataclass(frozen=True)
class ConditionSummary:
    condition: Optional[str]
    n_students: int
    total_mean: float
    total_sd: float
    average_mean: float
    average_sd: float
    mastered_mean: float
    mastered_sd: float


@dataclass(frozen=True)
class KnowledgeSummary:
    """Per-condition aggregates of knowledge estimates (sample SD, n-1),
    with per-student paired differences where a student appears in both
    conditions (crossover design)."""

    by_condition: tuple[ConditionSummary, ...]
    paired_total_diffs: Mapping[str, float]  # student -> total(cond B) - total(cond A)
    paired_mean_diff: Optional[float]

    def to_dict(self) -> dict:
        return {
            "sd_convention": "sample (n-1)",
            "by_condition": [
                {
                    "condition": c.condition,
                    "n_students": c.n_students,
                    "total_mean": c.total_mean,
                    "total_sd": c.total_sd,
                    "average_mean": c.average_mean,
                    "average_sd": c.average_sd,
                    "mastered_mean": c.mastered_mean,
                    "mastered_sd": c.mastered_sd,
                }
                for c in self.by_condition
            ],
            "paired_total_diffs": dict(sorted(self.paired_total_diffs.items())),
            "paired_mean_diff": self.paired_mean_diff,
        }


def knowledge_summary(
    estimates: Sequence[tuple[Optional[str], KnowledgeEstimate]],
) -> KnowledgeSummary:
    """Aggregate (condition, estimate) pairs into per-condition summaries.

    With exactly two conditions, paired differences (second minus first in
    sorted condition order) are reported per student observed in both.
    """
    by_cond: dict[Optional[str], list[KnowledgeEstimate]] = {}
    for cond, est in estimates:
        by_cond.setdefault(cond, []).append(est)

    summaries = []
    for cond in sorted(by_cond, key=lambda c: c or ""):
        ests = by_cond[cond]
        total_mean, total_sd = _mean_sd([e.total for e in ests])
        avg_mean, avg_sd = _mean_sd([e.average for e in ests])
        mast_mean, mast_sd = _mean_sd([float(e.mastered_count) for e in ests])
        summaries.append(
            ConditionSummary(
                condition=cond,
                n_students=len(ests),
                total_mean=total_mean,
                total_sd=total_sd,
                average_mean=avg_mean,
                average_sd=avg_sd,
                mastered_mean=mast_mean,
                mastered_sd=mast_sd,
            )
        )

    paired: dict[str, float] = {}
    paired_mean: Optional[float] = None
    if len(by_cond) == 2:
        cond_a, cond_b = sorted(by_cond, key=lambda c: c or "")
        totals_a = {e.student: e.total for e in by_cond[cond_a]}
        totals_b = {e.student: e.total for e in by_cond[cond_b]}
        for student in sorted(set(totals_a) & set(totals_b)):
            paired[student] = totals_b[student] - totals_a[student]
        if paired:
            paired_mean = float(np.mean(list(paired.values())))
    return KnowledgeSummary(
        by_condition=tuple(summaries),
        paired_total_diffs=paired,
        paired_mean_diff=paired_mean,
    )


def metrics_to_json(
    breakdowns: Sequence[TimeBreakdown],
    prod: Sequence[ProductivityRow],
    allocation: Sequence[AllocationRow],
    summary: Optional[KnowledgeSummary] = None,
) -> str:
    payload = {
        "sd_convention": "sample (n-1)",
        "time_on_task": [
            {
                "student": b.student,
                "session": b.session,
                "logged_in_seconds": b.logged_in_seconds,
                "idle_seconds": b.idle_seconds,
                "active_seconds": b.active_seconds,
            }
            for b in breakdowns
        ],
        "productivity": [
            {
                "student": r.student,
                "condition": r.condition,
                "unit": r.unit,
                "completed_steps": r.completed_steps,
            }
            for r in prod
        ],
        "opportunity_allocation": [
            {
                "condition": r.condition,
                "kc": r.kc,
                "kc_type": r.kc_type,
                "opportunities": r.opportunities,
                "opportunities_after_overpractice": r.opportunities_after_overpractice,
            }
            for r in allocation
        ],
    }
    if summary is not None:
        payload["knowledge_summary"] = summary.to_dict()
    return json.dumps(payload, indent=2, sort_keys=True)
