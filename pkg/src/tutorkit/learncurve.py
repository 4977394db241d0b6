"""Empirical and model-predicted learning curves per KC.

A curve point is the first-attempt error rate at the n-th opportunity,
aggregated over students; the predicted curve is one minus the mean model
prediction over the same contributing observations. High, flat curves are
flagged as screening evidence for ill-specified or unsupported KCs.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from enum import Enum
from typing import Mapping, Optional, Sequence

import numpy as np

from .afm import AFMFit, predict_table
from .errors import TutorkitError
from .logstore import StudentStepTable


class CurveError(TutorkitError):
    pass


class UnknownKC(CurveError):
    def __init__(self, kc: str):
        super().__init__(f"KC not present in table: {kc!r}")
        self.kc = kc


@dataclass(frozen=True)
class CurvePoint:
    opportunity: int
    n_students: int
    error_rate: float
    predicted_error: Optional[float] = None


class KCFlag(str, Enum):
    OK = "OK"
    HIGH_FLAT = "HIGH_FLAT"  # high mean error and near-zero fitted slope
    NO_DATA = "NO_DATA"  # below min_n at every opportunity


@dataclass(frozen=True)
class FlagConfig:
    high_error: float = 0.4
    flat_slope: float = 0.01
    min_n: int = 10


def learning_curve(
    table: StudentStepTable,
    kc: str,
    fit: Optional[AFMFit] = None,
    min_n: int = 10,
) -> list[CurvePoint]:
    """Curve points for one KC at every opportunity with >= min_n students.

    Error rate counts first attempts that are not CORRECT (hints included).
    When a fit is given, predicted_error is attached per point.
    """
    if kc not in table.kcs:
        raise UnknownKC(kc)
    predictions = predict_table(fit, table) if fit is not None else None

    errors: dict[int, int] = {}
    counts: dict[int, int] = {}
    pred_sums: dict[int, float] = {}
    for i, rec in enumerate(table.records):
        if kc not in rec.kcs:
            continue
        opp = rec.opportunity[kc]
        counts[opp] = counts.get(opp, 0) + 1
        if not rec.first_attempt_correct:
            errors[opp] = errors.get(opp, 0) + 1
        if predictions is not None:
            pred_sums[opp] = pred_sums.get(opp, 0.0) + float(predictions[i])

    points = []
    for opp in sorted(counts):
        n = counts[opp]
        if n < min_n:
            continue
        predicted = None
        if predictions is not None:
            predicted = 1.0 - pred_sums[opp] / n
        points.append(
            CurvePoint(
                opportunity=opp,
                n_students=n,
                error_rate=errors.get(opp, 0) / n,
                predicted_error=predicted,
            )
        )
    return points


def flag_kcs(
    curves: Mapping[str, Sequence[CurvePoint]],
    fit: AFMFit,
    config: FlagConfig = FlagConfig(),
) -> list[tuple[str, KCFlag]]:
    """Advisory screening flags per KC, from its curve and fitted slope.

    HIGH_FLAT: mean empirical error above ``high_error`` with fitted slope
    below ``flat_slope``. NO_DATA: no curve point cleared min_n. Otherwise
    OK. The analyst makes the call; these are evidence, not verdicts.
    """
    out = []
    for kc in sorted(curves):
        points = curves[kc]
        if not points:
            out.append((kc, KCFlag.NO_DATA))
            continue
        mean_error = float(np.mean([p.error_rate for p in points]))
        slope = fit.gamma.get(kc, 0.0)
        if mean_error > config.high_error and slope < config.flat_slope:
            out.append((kc, KCFlag.HIGH_FLAT))
        else:
            out.append((kc, KCFlag.OK))
    return out


def curves_to_csv(curves: Mapping[str, Sequence[CurvePoint]], path) -> None:
    """Write curves as CSV (kc, opportunity, n, error_rate, predicted_error)."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["kc", "opportunity", "n", "error_rate", "predicted_error"])
        for kc in sorted(curves):
            for p in curves[kc]:
                writer.writerow(
                    [
                        kc,
                        p.opportunity,
                        p.n_students,
                        repr(p.error_rate),
                        "" if p.predicted_error is None else repr(p.predicted_error),
                    ]
                )
