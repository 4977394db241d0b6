import pytest

from tutorkit.kcmodel import KCModel
from tutorkit.logstore import Outcome, Transaction


@pytest.fixture
def simple_model():
    return KCModel(
        name="simple",
        mapping={
            ("p1", "s1"): frozenset(["k1"]),
            ("p1", "s2"): frozenset(["k2"]),
            ("p2", "s1"): frozenset(["k1"]),
            ("p2", "s2"): frozenset(["k1", "k2"]),
        },
    )


def make_tx(student="a", session="sess", time=0.0, problem="p1", step="s1",
            attempt=1, outcome=Outcome.CORRECT, condition=None, unit=None):
    return Transaction(
        student_id=student,
        session_id=session,
        timestamp=time,
        problem_id=problem,
        step_id=step,
        attempt_index=attempt,
        outcome=outcome,
        condition_tag=condition,
        unit_tag=unit,
    )
