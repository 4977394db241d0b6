"""Transaction log ingest and the first-attempt student-step roll-up.

Logs arrive as tab-separated exports with one row per tutor transaction.
Everything downstream (model fitting, curves, metrics) consumes the
roll-up built here: one record per (student, problem, step) instance with
the first-attempt outcome and per-KC opportunity counters.
"""

from __future__ import annotations

import csv
import datetime as _dt
import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Optional, Sequence

from .errors import TutorkitError


class Outcome(str, Enum):
    CORRECT = "CORRECT"
    INCORRECT = "INCORRECT"
    HINT = "HINT"


# Case-insensitive raw-string -> Outcome. "error" is a common synonym for
# incorrect in exported logs.
OUTCOME_ALIASES = {
    "correct": Outcome.CORRECT,
    "incorrect": Outcome.INCORRECT,
    "error": Outcome.INCORRECT,
    "hint": Outcome.HINT,
}

#: Default column names for the tab-separated export format.
DEFAULT_COLUMNS: Mapping[str, str] = {
    "student_id": "Anon Student Id",
    "session_id": "Session Id",
    "timestamp": "Time",
    "problem_id": "Problem Name",
    "step_id": "Step Name",
    "attempt_index": "Attempt At Step",
    "outcome": "Outcome",
    "condition_tag": "Condition",
    "unit_tag": "Level (Unit)",
}

#: Columns that may be absent from the file without error.
OPTIONAL_FIELDS = ("condition_tag", "unit_tag")

#: Timestamps above this magnitude are taken to be milliseconds.
_MS_THRESHOLD = 1e11


class LogError(TutorkitError):
    pass


class MissingColumn(LogError):
    def __init__(self, name: str):
        super().__init__(f"missing required column: {name!r}")
        self.name = name


class RowError(LogError):
    """A row-level parse problem; ``row`` is the 1-based data row number."""

    def __init__(self, row: int, message: str):
        super().__init__(f"row {row}: {message}")
        self.row = row


class BadTimestamp(RowError):
    def __init__(self, row: int, value: str):
        super().__init__(row, f"unparseable timestamp {value!r}")
        self.value = value


class UnknownOutcome(RowError):
    def __init__(self, row: int, value: str):
        super().__init__(row, f"unknown outcome {value!r}")
        self.value = value


class IngestError(LogError):
    """Aggregates row-level errors collected during a parse."""

    def __init__(self, errors: Sequence[RowError], truncated: bool = False):
        lines = "; ".join(str(e) for e in errors[:5])
        more = f" (+{len(errors) - 5} more)" if len(errors) > 5 else ""
        super().__init__(f"{len(errors)} bad row(s): {lines}{more}")
        self.errors = list(errors)
        self.truncated = truncated


class NoMappedSteps(LogError):
    def __init__(self, model_name: str):
        super().__init__(f"KC model {model_name!r} maps no step present in the data")


@dataclass(frozen=True)
class Transaction:
    """One logged tutor event."""

    student_id: str
    session_id: str
    timestamp: float  # seconds since epoch
    problem_id: str
    step_id: str
    attempt_index: int  # 1 = first attempt at this step instance
    outcome: Outcome
    condition_tag: Optional[str] = None
    unit_tag: Optional[str] = None

    def __post_init__(self):
        if self.timestamp < 0:
            raise ValueError(f"timestamp must be >= 0, got {self.timestamp}")
        if self.attempt_index < 1:
            raise ValueError(f"attempt_index must be >= 1, got {self.attempt_index}")
        if not isinstance(self.outcome, Outcome):
            raise ValueError(f"outcome must be an Outcome, got {self.outcome!r}")


@dataclass(frozen=True)
class StudentStepRecord:
    """First-attempt roll-up of one step instance."""

    student_id: str
    problem_id: str
    step_id: str
    first_attempt_outcome: Outcome
    first_attempt_time: float
    kcs: frozenset[str]
    opportunity: Mapping[str, int]  # KC -> 1-based count, inclusive of this record
    session_id: str = ""
    condition_tag: Optional[str] = None
    unit_tag: Optional[str] = None
    completed: bool = False  # some attempt in the instance was CORRECT
    n_attempts: int = 1

    @property
    def first_attempt_correct(self) -> bool:
        """Hints count as errors under the first-attempt convention."""
        return self.first_attempt_outcome is Outcome.CORRECT


@dataclass(frozen=True)
class StudentStepTable:
    """Roll-up table: records sorted by student, then first-attempt time."""

    records: tuple[StudentStepRecord, ...]
    kc_model_name: str
    students: frozenset[str]
    kcs: frozenset[str]
    diagnostics: Mapping[str, object] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.records)


_TIME_FORMATS = (
    "%Y-%m-%d %H:%M:%S.%f",
    "%Y-%m-%d %H:%M:%S",
    "%m/%d/%Y %H:%M:%S",
    "%m/%d/%y %H:%M",
)


def parse_timestamp(raw: str) -> float:
    """Parse a timestamp cell to epoch seconds.

    Accepts numeric epoch values (milliseconds detected by magnitude) and
    a handful of common datetime formats, interpreted as UTC.

    Raises ValueError when the cell cannot be parsed.
    """
    text = raw.strip()
    try:
        value = float(text)
    except ValueError:
        pass
    else:
        if abs(value) > _MS_THRESHOLD:
            value /= 1000.0
        return value
    for fmt in _TIME_FORMATS:
        try:
            dt = _dt.datetime.strptime(text, fmt)
        except ValueError:
            continue
        return dt.replace(tzinfo=_dt.timezone.utc).timestamp()
    try:
        dt = _dt.datetime.fromisoformat(text)
    except ValueError:
        raise ValueError(f"unparseable timestamp: {raw!r}")
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=_dt.timezone.utc)
    return dt.timestamp()


def normalize_outcome(raw: str) -> Outcome:
    try:
        return OUTCOME_ALIASES[raw.strip().lower()]
    except KeyError:
        raise ValueError(f"unknown outcome: {raw!r}")


def ingest_transactions(
    path,
    columns: Optional[Mapping[str, str]] = None,
    max_row_errors: int = 100,
) -> list[Transaction]:
    """Parse a tab-separated transaction log into sorted Transactions.

    ``columns`` maps logical field names (keys of DEFAULT_COLUMNS) to the
    column names used in this file; unspecified fields keep their defaults.

    Structural problems (missing required columns) abort immediately.
    Row-level problems (bad timestamps, unknown outcomes) are collected up
    to ``max_row_errors`` and raised together as IngestError.

    Returns transactions sorted by (student_id, timestamp, attempt_index).
    """
    colmap = dict(DEFAULT_COLUMNS)
    if columns:
        unknown = set(columns) - set(DEFAULT_COLUMNS)
        if unknown:
            raise LogError(f"unknown column mapping keys: {sorted(unknown)}")
        colmap.update(columns)

    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh, delimiter="\t")
        try:
            header = next(reader)
        except StopIteration:
            raise MissingColumn(colmap["student_id"])
        index: dict[str, int] = {}
        for fld, col in colmap.items():
            if col in header:
                index[fld] = header.index(col)
            elif fld not in OPTIONAL_FIELDS:
                raise MissingColumn(col)

        transactions: list[Transaction] = []
        errors: list[RowError] = []
        truncated = False
        for rownum, row in enumerate(reader, start=1):
            if not row or all(not cell.strip() for cell in row):
                continue

            def cell(fld: str) -> str:
                i = index.get(fld)
                return row[i] if i is not None and i < len(row) else ""

            try:
                timestamp = parse_timestamp(cell("timestamp"))
            except ValueError:
                errors.append(BadTimestamp(rownum, cell("timestamp")))
                if len(errors) >= max_row_errors:
                    truncated = True
                    break
                continue
            try:
                outcome = normalize_outcome(cell("outcome"))
            except ValueError:
                errors.append(UnknownOutcome(rownum, cell("outcome")))
                if len(errors) >= max_row_errors:
                    truncated = True
                    break
                continue
            attempt_raw = cell("attempt_index").strip()
            attempt = int(attempt_raw) if attempt_raw else 1
            transactions.append(
                Transaction(
                    student_id=cell("student_id").strip(),
                    session_id=cell("session_id").strip(),
                    timestamp=timestamp,
                    problem_id=cell("problem_id").strip(),
                    step_id=cell("step_id").strip(),
                    attempt_index=attempt,
                    outcome=outcome,
                    condition_tag=cell("condition_tag").strip() or None,
                    unit_tag=cell("unit_tag").strip() or None,
                )
            )
    if errors:
        raise IngestError(errors, truncated=truncated)
    transactions.sort(key=lambda t: (t.student_id, t.timestamp, t.attempt_index))
    return transactions


def _format_timestamp(value: float) -> str:
    if value == int(value):
        return str(int(value))
    return repr(value)


def serialize_transactions(transactions: Sequence[Transaction], path) -> None:
    """Write transactions as canonical TSV using the default column names.

    Round-trips: ingest(serialize(ingest(f))) equals ingest(f).
    """
    fields = list(DEFAULT_COLUMNS)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        writer.writerow([DEFAULT_COLUMNS[f] for f in fields])
        for t in transactions:
            writer.writerow(
                [
                    t.student_id,
                    t.session_id,
                    _format_timestamp(t.timestamp),
                    t.problem_id,
                    t.step_id,
                    t.attempt_index,
                    t.outcome.value,
                    t.condition_tag or "",
                    t.unit_tag or "",
                ]
            )


class _Instance:
    __slots__ = ("first", "closed", "session", "completed", "n_attempts")

    def __init__(self, first: Transaction):
        self.first = first
        self.session = first.session_id
        self.completed = first.outcome is Outcome.CORRECT
        self.closed = self.completed
        self.n_attempts = 1


def rollup_student_steps(transactions: Sequence[Transaction], model) -> StudentStepTable:
    """Roll transactions up to one record per step instance.

    An instance of a (student, problem, step) collects consecutive attempts
    until one is CORRECT or the session ends; a later transaction on the
    same step starts a new instance only after such a boundary. Steps not
    mapped by the KC model are dropped and counted in the diagnostics.

    Raises NoMappedSteps when the model resolves nothing in the data.
    """
    if not transactions:
        raise LogError("no transactions to roll up")

    ordered = sorted(
        transactions, key=lambda t: (t.student_id, t.timestamp, t.attempt_index)
    )

    # Build step instances per student.
    instances_by_student: dict[str, list[_Instance]] = {}
    open_instances: dict[tuple[str, str, str], _Instance] = {}
    for t in ordered:
        key = (t.student_id, t.problem_id, t.step_id)
        inst = open_instances.get(key)
        if inst is not None and not inst.closed and inst.session == t.session_id:
            inst.n_attempts += 1
            if t.outcome is Outcome.CORRECT:
                inst.completed = True
                inst.closed = True
        else:
            inst = _Instance(t)
            open_instances[key] = inst
            instances_by_student.setdefault(t.student_id, []).append(inst)

    mapping = model.mapping
    records: list[StudentStepRecord] = []
    students: set[str] = set()
    kcs_seen: set[str] = set()
    unmapped_steps: set[tuple[str, str]] = set()
    n_dropped = 0

    for student in sorted(instances_by_student):
        insts = instances_by_student[student]
        insts.sort(key=lambda i: i.first.timestamp)  # stable: ties keep arrival order
        counters: dict[str, int] = {}
        for inst in insts:
            t = inst.first
            kcs = mapping.get((t.problem_id, t.step_id))
            if not kcs:
                unmapped_steps.add((t.problem_id, t.step_id))
                n_dropped += 1
                continue
            opportunity = {}
            for kc in sorted(kcs):
                counters[kc] = counters.get(kc, 0) + 1
                opportunity[kc] = counters[kc]
            records.append(
                StudentStepRecord(
                    student_id=student,
                    problem_id=t.problem_id,
                    step_id=t.step_id,
                    first_attempt_outcome=t.outcome,
                    first_attempt_time=t.timestamp,
                    kcs=frozenset(kcs),
                    opportunity=opportunity,
                    session_id=t.session_id,
                    condition_tag=t.condition_tag,
                    unit_tag=t.unit_tag,
                    completed=inst.completed,
                    n_attempts=inst.n_attempts,
                )
            )
            students.add(student)
            kcs_seen.update(kcs)

    if not records:
        raise NoMappedSteps(getattr(model, "name", "?"))

    diagnostics = {
        "n_transactions": len(transactions),
        "n_records": len(records),
        "n_dropped_instances": n_dropped,
        "unmapped_steps": sorted(unmapped_steps),
    }
    return StudentStepTable(
        records=tuple(records),
        kc_model_name=getattr(model, "name", "?"),
        students=frozenset(students),
        kcs=frozenset(kcs_seen),
        diagnostics=diagnostics,
    )


def diagnostics_json(table: StudentStepTable) -> str:
    """Diagnostics summary as a JSON string."""
    diag = dict(table.diagnostics)
    diag["unmapped_steps"] = [list(pair) for pair in diag.get("unmapped_steps", [])]
    diag["n_students"] = len(table.students)
    diag["n_kcs"] = len(table.kcs)
    return json.dumps(diag, indent=2, sort_keys=True)
