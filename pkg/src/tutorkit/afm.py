"""Additive-factors model of first-attempt correctness.

The model predicts success on a step as

    p = sigmoid(theta_student + sum_over_step_KCs(beta_kc + gamma_kc * T_kc)
                + delta * condition)

where T_kc is the number of *prior* opportunities on the KC (0-based) and
gamma_kc >= 0. Student proficiency theta is L2-penalized in place of a
random effect, which also pins down the theta/beta translation invariance.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit

from .errors import TutorkitError
from .logstore import StudentStepTable


class AFMError(TutorkitError):
    pass


class UnknownStudent(AFMError):
    def __init__(self, student: str):
        super().__init__(f"student not in fit: {student!r}")
        self.student = student


class UnknownKC(AFMError):
    def __init__(self, kc: str):
        super().__init__(f"KC not in fit: {kc!r}")
        self.kc = kc


class SingleCondition(AFMError):
    def __init__(self, levels):
        super().__init__(f"need two condition levels, found {sorted(levels)}")


class NonConvergence(AFMError):
    """Raised in strict mode; carries the best fit found so far."""

    def __init__(self, fit: "AFMFit"):
        super().__init__(
            f"fit did not reach gradient tolerance in {fit.iterations} iterations"
        )
        self.fit = fit


@dataclass(frozen=True)
class AFMFitConfig:
    l2_theta: float = 0.5
    max_iter: int = 500
    tol: float = 1e-6  # max absolute component of the projected gradient
    with_condition: bool = False
    strict: bool = False  # raise NonConvergence instead of returning converged=False


@dataclass(frozen=True)
class AFMFit:
    """Fitted parameters plus fit diagnostics."""

    theta: Mapping[str, float]
    beta: Mapping[str, float]
    gamma: Mapping[str, float]
    delta: Optional[float]
    log_lik: float
    n_params: int
    n_obs: int
    aic: float
    bic: float
    converged: bool
    iterations: int
    l2_theta: float
    condition_levels: tuple[str, ...] = ()  # delta applies to the second level
    degenerate_kcs: tuple[str, ...] = ()  # < 2 observations; gamma fixed at 0
    gamma_at_bound: tuple[str, ...] = ()  # gamma hit the 0 bound ("no learning")

    def to_json(self) -> str:
        payload = {
            "theta": dict(sorted(self.theta.items())),
            "beta": dict(sorted(self.beta.items())),
            "gamma": dict(sorted(self.gamma.items())),
            "delta": self.delta,
            "log_lik": self.log_lik,
            "n_params": self.n_params,
            "n_obs": self.n_obs,
            "aic": self.aic,
            "bic": self.bic,
            "converged": self.converged,
            "iterations": self.iterations,
            "l2_theta": self.l2_theta,
            "condition_levels": list(self.condition_levels),
            "degenerate_kcs": list(self.degenerate_kcs),
            "gamma_at_bound": list(self.gamma_at_bound),
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "AFMFit":
        d = json.loads(text)
        return cls(
            theta=d["theta"],
            beta=d["beta"],
            gamma=d["gamma"],
            delta=d["delta"],
            log_lik=d["log_lik"],
            n_params=d["n_params"],
            n_obs=d["n_obs"],
            aic=d["aic"],
            bic=d["bic"],
            converged=d["converged"],
            iterations=d["iterations"],
            l2_theta=d["l2_theta"],
            condition_levels=tuple(d.get("condition_levels", ())),
            degenerate_kcs=tuple(d.get("degenerate_kcs", ())),
            gamma_at_bound=tuple(d.get("gamma_at_bound", ())),
        )


class Design:
    """Index arrays for vectorized likelihood evaluation over a table.

    Parameter vector layout: [theta (n_students), beta (n_kcs),
    gamma (n_kcs), delta (if condition)].
    """

    def __init__(self, table: StudentStepTable, with_condition: bool = False):
        self.students = sorted(table.students)
        self.kcs = sorted(table.kcs)
        stu_index = {s: i for i, s in enumerate(self.students)}
        kc_index = {k: i for i, k in enumerate(self.kcs)}
        self.stu_index = stu_index
        self.kc_index = kc_index

        n_obs = len(table.records)
        self.n_obs = n_obs
        self.y = np.empty(n_obs)
        self.stu_idx = np.empty(n_obs, dtype=np.intp)
        pair_obs: list[int] = []
        pair_kc: list[int] = []
        pair_t: list[float] = []
        cond = np.zeros(n_obs) if with_condition else None
        levels: set[str] = set()
        for i, rec in enumerate(table.records):
            if not rec.kcs:
                raise AFMError(f"record without KCs: {rec.problem_id}/{rec.step_id}")
            self.y[i] = 1.0 if rec.first_attempt_correct else 0.0
            self.stu_idx[i] = stu_index[rec.student_id]
            for kc in sorted(rec.kcs):
                pair_obs.append(i)
                pair_kc.append(kc_index[kc])
                pair_t.append(rec.opportunity[kc] - 1)  # prior count, 0-based
            if with_condition:
                levels.add(rec.condition_tag or "")
        self.pair_obs = np.asarray(pair_obs, dtype=np.intp)
        self.pair_kc = np.asarray(pair_kc, dtype=np.intp)
        self.pair_t = np.asarray(pair_t)

        self.condition_levels: tuple[str, ...] = ()
        self.cond = None
        if with_condition:
            if len(levels) != 2:
                raise SingleCondition(levels)
            self.condition_levels = tuple(sorted(levels))
            marker = self.condition_levels[1]
            for i, rec in enumerate(table.records):
                cond[i] = 1.0 if (rec.condition_tag or "") == marker else 0.0
            self.cond = cond

        self.n_students = len(self.students)
        self.n_kcs = len(self.kcs)
        self.n_params = self.n_students + 2 * self.n_kcs + (1 if with_condition else 0)
        self.kc_obs_counts = np.bincount(self.pair_kc, minlength=self.n_kcs)

    def unpack(self, x: np.ndarray):
        S, K = self.n_students, self.n_kcs
        theta = x[:S]
        beta = x[S : S + K]
        gamma = x[S + K : S + 2 * K]
        delta = x[S + 2 * K] if self.cond is not None else None
        return theta, beta, gamma, delta

    def logits(self, x: np.ndarray) -> np.ndarray:
        theta, beta, gamma, delta = self.unpack(x)
        z = theta[self.stu_idx].copy()
        contrib = beta[self.pair_kc] + gamma[self.pair_kc] * self.pair_t
        z += np.bincount(self.pair_obs, weights=contrib, minlength=self.n_obs)
        if delta is not None:
            z += delta * self.cond
        return z

    def log_lik(self, x: np.ndarray) -> float:
        """Unpenalized Bernoulli log-likelihood."""
        z = self.logits(x)
        # log p = -log(1+e^-z), log(1-p) = -log(1+e^z)
        ll = -(self.y * np.logaddexp(0.0, -z) + (1.0 - self.y) * np.logaddexp(0.0, z))
        return float(ll.sum())

    def penalized_neg_log_lik_and_grad(self, x: np.ndarray, l2_theta: float):
        theta, beta, gamma, delta = self.unpack(x)
        z = self.logits(x)
        ll = -(self.y * np.logaddexp(0.0, -z) + (1.0 - self.y) * np.logaddexp(0.0, z))
        obj = float(ll.sum()) - l2_theta * float(np.dot(theta, theta))

        p = expit(z)
        resid = self.y - p
        grad = np.empty_like(x)
        S, K = self.n_students, self.n_kcs
        grad[:S] = np.bincount(self.stu_idx, weights=resid, minlength=S)
        grad[:S] -= 2.0 * l2_theta * theta
        pair_resid = resid[self.pair_obs]
        grad[S : S + K] = np.bincount(self.pair_kc, weights=pair_resid, minlength=K)
        grad[S + K : S + 2 * K] = np.bincount(
            self.pair_kc, weights=pair_resid * self.pair_t, minlength=K
        )
        if delta is not None:
            grad[S + 2 * K] = float(np.dot(resid, self.cond))
        return -obj, -grad

    def observed_information_diagonal(self, x: np.ndarray, l2_theta: float) -> np.ndarray:
        """Diagonal of the observed information of the penalized likelihood."""
        z = self.logits(x)
        w = expit(z) * (1.0 - expit(z))
        S, K = self.n_students, self.n_kcs
        diag = np.zeros_like(x)
        diag[:S] = np.bincount(self.stu_idx, weights=w, minlength=S) + 2.0 * l2_theta
        pair_w = w[self.pair_obs]
        diag[S : S + K] = np.bincount(self.pair_kc, weights=pair_w, minlength=K)
        diag[S + K : S + 2 * K] = np.bincount(
            self.pair_kc, weights=pair_w * self.pair_t**2, minlength=K
        )
        if self.cond is not None:
            diag[S + 2 * K] = float(np.dot(w, self.cond))
        return diag


def fit_afm(table: StudentStepTable, config: AFMFitConfig = AFMFitConfig()) -> AFMFit:
    """Maximize the theta-penalized log-likelihood, gamma projected to >= 0.

    Deterministic: all-zero initialization, bounded quasi-Newton steps with
    monotone line search. KCs with fewer than 2 observations are retained
    with gamma fixed at 0 and reported in ``degenerate_kcs``.
    """
    if not table.records:
        raise AFMError("empty table")
    design = Design(table, with_condition=config.with_condition)

    degenerate = [design.kcs[k] for k in range(design.n_kcs) if design.kc_obs_counts[k] < 2]
    S, K = design.n_students, design.n_kcs
    bounds: list[tuple[Optional[float], Optional[float]]] = [(None, None)] * S
    bounds += [(None, None)] * K
    for k in range(K):
        if design.kcs[k] in degenerate:
            bounds.append((0.0, 0.0))
        else:
            bounds.append((0.0, None))
    if design.cond is not None:
        bounds.append((None, None))

    x0 = np.zeros(design.n_params)
    result = minimize(
        design.penalized_neg_log_lik_and_grad,
        x0,
        args=(config.l2_theta,),
        jac=True,
        method="L-BFGS-B",
        bounds=bounds,
        options={
            "maxiter": config.max_iter,
            "ftol": 1e-14,
            "gtol": config.tol,
            "maxfun": 10 * config.max_iter,
        },
    )
    x = result.x

    # Convergence per the projected gradient of the penalized objective.
    _, neg_grad = design.penalized_neg_log_lik_and_grad(x, config.l2_theta)
    grad = -neg_grad
    proj = grad.copy()
    gamma_slice = slice(S + K, S + 2 * K)
    at_zero = x[gamma_slice] <= 0.0
    pushing_down = grad[gamma_slice] < 0.0
    proj[gamma_slice] = np.where(at_zero & pushing_down, 0.0, grad[gamma_slice])
    converged = bool(np.max(np.abs(proj)) <= config.tol)

    theta, beta, gamma, delta = design.unpack(x)
    log_lik = design.log_lik(x)
    n_params = design.n_params
    aic = 2.0 * n_params - 2.0 * log_lik
    bic = n_params * math.log(design.n_obs) - 2.0 * log_lik
    at_bound = [
        design.kcs[k]
        for k in range(K)
        if gamma[k] <= 0.0 and design.kcs[k] not in degenerate
    ]

    fit = AFMFit(
        theta={s: float(theta[i]) for i, s in enumerate(design.students)},
        beta={k: float(beta[i]) for i, k in enumerate(design.kcs)},
        gamma={k: float(gamma[i]) for i, k in enumerate(design.kcs)},
        delta=float(delta) if delta is not None else None,
        log_lik=log_lik,
        n_params=n_params,
        n_obs=design.n_obs,
        aic=aic,
        bic=bic,
        converged=converged,
        iterations=int(result.nit),
        l2_theta=config.l2_theta,
        condition_levels=design.condition_levels,
        degenerate_kcs=tuple(degenerate),
        gamma_at_bound=tuple(at_bound),
    )
    if config.strict and not converged:
        raise NonConvergence(fit)
    return fit


def afm_predict(
    fit: AFMFit,
    student: str,
    kcs: Sequence[str],
    opps: Mapping[str, int],
    condition: Optional[str] = None,
    allow_unknown_student: bool = False,
) -> float:
    """Predicted success probability for one step.

    ``opps`` gives the 1-based opportunity number per KC at this step; the
    prior-practice count entering the model is ``opps[kc] - 1``. With
    ``allow_unknown_student`` an unseen student gets zero proficiency.
    """
    if student in fit.theta:
        z = fit.theta[student]
    elif allow_unknown_student:
        z = 0.0
    else:
        raise UnknownStudent(student)
    for kc in kcs:
        if kc not in fit.beta:
            raise UnknownKC(kc)
        z += fit.beta[kc] + fit.gamma[kc] * (opps[kc] - 1)
    if condition is not None and fit.delta is not None:
        if condition == fit.condition_levels[1]:
            z += fit.delta
    return float(expit(z))


def predict_table(fit: AFMFit, table: StudentStepTable, use_condition: bool = False) -> np.ndarray:
    """Predicted success probability for every record in the table."""
    out = np.empty(len(table.records))
    for i, rec in enumerate(table.records):
        out[i] = afm_predict(
            fit,
            rec.student_id,
            sorted(rec.kcs),
            rec.opportunity,
            condition=(rec.condition_tag if use_condition else None),
        )
    return out


@dataclass(frozen=True)
class ConditionEffect:
    """Jointly estimated condition coefficient with a Wald-style SE.

    ``delta`` is the logit shift for the second condition level (sorted
    order); negative means lower success probability in that condition.
    """

    delta: float
    std_error_approx: float
    condition_levels: tuple[str, ...]
    fit: AFMFit


def afm_condition_effect(table: StudentStepTable, config: AFMFitConfig = AFMFitConfig()) -> ConditionEffect:
    """Fit the model with a condition covariate and report delta with an
    approximate standard error from the observed-information diagonal."""
    cfg = AFMFitConfig(
        l2_theta=config.l2_theta,
        max_iter=config.max_iter,
        tol=config.tol,
        with_condition=True,
        strict=config.strict,
    )
    fit = fit_afm(table, cfg)
    design = Design(table, with_condition=True)
    x = _pack_fit(fit, design)
    diag = design.observed_information_diagonal(x, cfg.l2_theta)
    info_delta = diag[-1]
    se = float(1.0 / math.sqrt(info_delta)) if info_delta > 0 else float("inf")
    return ConditionEffect(
        delta=float(fit.delta),
        std_error_approx=se,
        condition_levels=fit.condition_levels,
        fit=fit,
    )


def _pack_fit(fit: AFMFit, design: Design) -> np.ndarray:
    x = np.empty(design.n_params)
    for i, s in enumerate(design.students):
        x[i] = fit.theta[s]
    S, K = design.n_students, design.n_kcs
    for i, k in enumerate(design.kcs):
        x[S + i] = fit.beta[k]
        x[S + K + i] = fit.gamma[k]
    if design.cond is not None:
        x[S + 2 * K] = fit.delta
    return x


@dataclass(frozen=True)
class KnowledgeEstimate:
    """End-of-practice knowledge summary for one student."""

    student: str
    per_kc_final: Mapping[str, float]  # predicted correctness at final opportunity + 1
    total: float
    average: float
    mastered_count: int
    condition_tag: Optional[str] = None


def knowledge_estimates(
    fit: AFMFit,
    table: StudentStepTable,
    mastery_threshold: float = 0.95,
) -> list[KnowledgeEstimate]:
    """Per-student predicted knowledge at one opportunity past the last
    observed one for each practiced KC, plus total/average/mastered-count
    aggregates. Default mastery threshold 0.95."""
    final_opp: dict[str, dict[str, int]] = {}
    condition: dict[str, Optional[str]] = {}
    for rec in table.records:
        per = final_opp.setdefault(rec.student_id, {})
        for kc in rec.kcs:
            per[kc] = max(per.get(kc, 0), rec.opportunity[kc])
        condition.setdefault(rec.student_id, rec.condition_tag)

    estimates = []
    for student in sorted(final_opp):
        per_kc = {}
        for kc, n_final in sorted(final_opp[student].items()):
            # One opportunity past the final observed one: prior count = n_final.
            per_kc[kc] = afm_predict(fit, student, [kc], {kc: n_final + 1})
        total = float(sum(per_kc.values()))
        average = total / len(per_kc)
        mastered = sum(1 for p in per_kc.values() if p >= mastery_threshold)
        estimates.append(
            KnowledgeEstimate(
                student=student,
                per_kc_final=per_kc,
                total=total,
                average=average,
                mastered_count=mastered,
                condition_tag=condition[student],
            )
        )
    return estimates
