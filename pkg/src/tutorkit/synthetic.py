"""Synthetic data generators for simulations, fixtures, and checks.

These generate logs and roll-up tables from known ground-truth parameters
so fitted estimates can be compared against the values that produced the
data.
"""

from __future__ import annotations

import math
from typing import Mapping, Optional, Sequence

import numpy as np

from .bkt import BKTParams
from .kcmodel import KCModel
from .logstore import Outcome, StudentStepRecord, StudentStepTable, Transaction
from .policysim import Problem, ProblemPool


def _sigmoid(z: float) -> float:
    return 1.0 / (1.0 + math.exp(-z))


def generate_afm_table(
    beta: Mapping[str, float],
    gamma: Mapping[str, float],
    n_students: int,
    n_opportunities: int,
    seed: int,
    theta_sd: float = 1.0,
    delta: float = 0.0,
    condition_split: Optional[tuple[str, str]] = None,
) -> StudentStepTable:
    """Roll-up table sampled from a known logistic opportunity model.

    Every student sees every KC ``n_opportunities`` times, one KC per
    record. With ``condition_split`` students alternate between the two
    condition tags and records in the second tag get the ``delta`` logit
    shift.
    """
    rng = np.random.default_rng(seed)
    kcs = sorted(beta)
    students = [f"s{i:04d}" for i in range(n_students)]
    thetas = rng.normal(0.0, theta_sd, size=n_students)

    records = []
    for si, student in enumerate(students):
        condition = None
        shift = 0.0
        if condition_split is not None:
            condition = condition_split[si % 2]
            shift = delta if si % 2 == 1 else 0.0
        t_clock = float(si) * 1e6
        for opp in range(1, n_opportunities + 1):
            for kc in kcs:
                z = thetas[si] + beta[kc] + gamma[kc] * (opp - 1) + shift
                correct = rng.random() < _sigmoid(z)
                t_clock += 10.0
                records.append(
                    StudentStepRecord(
                        student_id=student,
                        problem_id=f"p{opp:03d}",
                        step_id=f"step-{kc}",
                        first_attempt_outcome=Outcome.CORRECT if correct else Outcome.INCORRECT,
                        first_attempt_time=t_clock,
                        kcs=frozenset([kc]),
                        opportunity={kc: opp},
                        session_id="sess1",
                        condition_tag=condition,
                        completed=bool(correct),
                    )
                )
    return StudentStepTable(
        records=tuple(records),
        kc_model_name="synthetic",
        students=frozenset(students),
        kcs=frozenset(kcs),
    )


def generate_afm_transactions(
    beta: Mapping[str, float],
    gamma: Mapping[str, float],
    kc_to_step: Mapping[str, tuple[str, str]],
    n_students: int,
    n_opportunities: int,
    seed: int,
    theta_sd: float = 1.0,
) -> list[Transaction]:
    """Transaction log sampled from the same model, for ingest/rollup paths.

    ``kc_to_step`` maps each KC to its (problem prefix, step id); each
    opportunity n uses problem ``<prefix><n>`` so every encounter is a
    fresh step instance.
    """
    rng = np.random.default_rng(seed)
    kcs = sorted(beta)
    transactions = []
    thetas = rng.normal(0.0, theta_sd, size=n_students)
    for si in range(n_students):
        student = f"s{si:04d}"
        t_clock = float(si) * 1e6
        for opp in range(1, n_opportunities + 1):
            for kc in kcs:
                prefix, step = kc_to_step[kc]
                z = thetas[si] + beta[kc] + gamma[kc] * (opp - 1)
                correct = rng.random() < _sigmoid(z)
                t_clock += 10.0
                transactions.append(
                    Transaction(
                        student_id=student,
                        session_id="sess1",
                        timestamp=t_clock,
                        problem_id=f"{prefix}{opp:03d}",
                        step_id=step,
                        attempt_index=1,
                        outcome=Outcome.CORRECT if correct else Outcome.INCORRECT,
                    )
                )
    return transactions


def generate_bkt_sequences(
    params: BKTParams,
    n_students: int,
    n_opportunities: int,
    seed: int,
) -> list[list[bool]]:
    """Outcome sequences from the two-state generative model."""
    rng = np.random.default_rng(seed)
    sequences = []
    for _ in range(n_students):
        known = rng.random() < params.p_init
        seq = []
        for _ in range(n_opportunities):
            p_correct = (1.0 - params.p_slip) if known else params.p_guess
            seq.append(bool(rng.random() < p_correct))
            if not known and rng.random() < params.p_learn:
                known = True
        sequences.append(seq)
    return sequences


def easy_hard_pool() -> tuple[ProblemPool, dict[str, BKTParams]]:
    """Fixture pool with one fast-mastered KC and one slow KC.

    Six 3-step drills on the easy KC come first in pool order, then six
    mixed problems pairing the hard KC with one easy step. Fixed-order
    practice therefore over-practices the easy KC; adaptive selection
    moves on once it is mastered.
    """
    easy = BKTParams(kc="easy", p_init=0.3, p_learn=0.35, p_guess=0.2, p_slip=0.05)
    hard = BKTParams(kc="hard", p_init=0.1, p_learn=0.05, p_guess=0.1, p_slip=0.1)
    problems = []
    for i in range(6):
        problems.append(
            Problem(
                problem_id=f"drill{i:02d}",
                steps=tuple((f"e{j}", frozenset(["easy"])) for j in range(3)),
                est_step_seconds=20.0,
            )
        )
    for i in range(6):
        problems.append(
            Problem(
                problem_id=f"mixed{i:02d}",
                steps=(("h0", frozenset(["hard"])), ("e0", frozenset(["easy"]))),
                est_step_seconds=40.0,
            )
        )
    return ProblemPool(problems=tuple(problems)), {"easy": easy, "hard": hard}


def new_kc_pool() -> tuple[ProblemPool, dict[str, BKTParams], list[str]]:
    """Fixture pool with established KCs up front and 5 low-coverage new
    KCs at the end of the sequence.

    Returns (pool, tracker params, new KC labels). Established KCs master
    quickly; the new KCs are hard and each appears in a single problem, so
    fixed-order practice under a problem budget rarely reaches them.
    """
    params: dict[str, BKTParams] = {}
    problems = []
    established = [f"est{i}" for i in range(3)]
    for kc in established:
        params[kc] = BKTParams(kc=kc, p_init=0.4, p_learn=0.3, p_guess=0.2, p_slip=0.05)
    new = [f"new{i}" for i in range(5)]
    for kc in new:
        params[kc] = BKTParams(kc=kc, p_init=0.05, p_learn=0.1, p_guess=0.1, p_slip=0.1)

    for i in range(8):
        kc = established[i % len(established)]
        problems.append(
            Problem(
                problem_id=f"estp{i:02d}",
                steps=tuple((f"s{j}", frozenset([kc])) for j in range(2)),
                est_step_seconds=25.0,
            )
        )
    for i, kc in enumerate(new):
        problems.append(
            Problem(
                problem_id=f"newp{i:02d}",
                steps=(("n0", frozenset([kc])), ("n1", frozenset([kc]))),
                est_step_seconds=35.0,
            )
        )
    return ProblemPool(problems=tuple(problems)), params, new


def fixture_kc_model(kcs: Sequence[str], n_problems: int) -> KCModel:
    """KC model covering problems ``q000..`` with one step per KC."""
    mapping = {}
    for n in range(n_problems):
        for kc in kcs:
            mapping[(f"q{n:03d}", f"step-{kc}")] = frozenset([kc])
    return KCModel(name="fixture", mapping=mapping)


def generate_fixture_log(
    n_students: int = 20,
    seed: int = 7,
    n_problems: int = 8,
) -> tuple[list[Transaction], KCModel]:
    """Small two-condition log for end-to-end runs.

    Students alternate between conditions "orig" and "redesign"; each works
    problems q000.. in order with two KC steps per problem, occasional
    retries, hints, and idle gaps, so every downstream path has something
    to chew on.
    """
    rng = np.random.default_rng(seed)
    kcs = ["add", "sub"]
    model = fixture_kc_model(kcs, n_problems)
    beta = {"add": 0.3, "sub": -0.6}
    gamma = {"add": 0.15, "sub": 0.25}
    transactions = []
    for si in range(n_students):
        student = f"stu{si:02d}"
        condition = "orig" if si % 2 == 0 else "redesign"
        theta = float(rng.normal(0.0, 0.8))
        t_clock = 1_600_000_000.0 + si * 86_400.0
        opp: dict[str, int] = {k: 0 for k in kcs}
        for half, session in ((0, "day1"), (1, "day2")):
            start = half * (n_problems // 2)
            for n in range(start, start + n_problems // 2):
                for kc in kcs:
                    opp[kc] += 1
                    z = theta + beta[kc] + gamma[kc] * (opp[kc] - 1)
                    u = rng.random()
                    if u < _sigmoid(z):
                        outcome = Outcome.CORRECT
                    elif u < _sigmoid(z) + 0.15:
                        outcome = Outcome.HINT
                    else:
                        outcome = Outcome.INCORRECT
                    gap = 15.0 if rng.random() > 0.05 else 400.0  # occasional idle gap
                    t_clock += gap
                    transactions.append(
                        Transaction(
                            student_id=student,
                            session_id=session,
                            timestamp=t_clock,
                            problem_id=f"q{n:03d}",
                            step_id=f"step-{kc}",
                            attempt_index=1,
                            outcome=outcome,
                            condition_tag=condition,
                            unit_tag="7.05",
                        )
                    )
                    if outcome is not Outcome.CORRECT:
                        # retry until correct, at most twice
                        for attempt in range(2, 4):
                            t_clock += 8.0
                            retry_ok = rng.random() < 0.7
                            transactions.append(
                                Transaction(
                                    student_id=student,
                                    session_id=session,
                                    timestamp=t_clock,
                                    problem_id=f"q{n:03d}",
                                    step_id=f"step-{kc}",
                                    attempt_index=attempt,
                                    outcome=Outcome.CORRECT if retry_ok else Outcome.INCORRECT,
                                    condition_tag=condition,
                                    unit_tag="7.05",
                                )
                            )
                            if retry_ok:
                                break
            t_clock += 3600.0  # between sessions
    transactions.sort(key=lambda t: (t.student_id, t.timestamp, t.attempt_index))
    return transactions, model
