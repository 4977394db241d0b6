"""Two-state knowledge tracing: mastery updates, tracing, and fitting.

Each KC has four probabilities: initial knowledge L0, learn rate T, guess
G, and slip S. Observing a first attempt updates the mastery estimate by
Bayes' rule and then applies the learning transition:

    correct:   posterior = L(1-S) / (L(1-S) + (1-L)G)
    incorrect: posterior = L*S / (L*S + (1-L)(1-S))
    then       L' = posterior + (1 - posterior) * T

Fitting is a deterministic grid search over the capped parameter box,
followed by one finer refinement pass around the incumbent.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import TutorkitError


class BKTError(TutorkitError):
    pass


class EmptyData(BKTError):
    def __init__(self):
        super().__init__("no observation sequences to fit")


@dataclass(frozen=True)
class BKTParams:
    """Per-KC tracing parameters."""

    kc: str
    p_init: float
    p_learn: float
    p_guess: float
    p_slip: float
    log_lik: float = float("nan")

    def __post_init__(self):
        for name in ("p_init", "p_learn", "p_guess", "p_slip"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise BKTError(f"{name} must be in [0,1], got {v}")


@dataclass(frozen=True)
class MasteryState:
    """Current mastery estimate for one (student, KC) with update history."""

    student: str
    kc: str
    p_know: float
    history: tuple[tuple[bool, float], ...] = ()  # (observation, p_know after)

    def __post_init__(self):
        if not 0.0 <= self.p_know <= 1.0:
            raise BKTError(f"p_know must be in [0,1], got {self.p_know}")


def predict_correct(p_know: float, params: BKTParams) -> float:
    """Probability of a correct response given the current mastery estimate."""
    return p_know * (1.0 - params.p_slip) + (1.0 - p_know) * params.p_guess


def update_p_know(p_know: float, params: BKTParams, correct: bool) -> float:
    """One Bayes update plus learning transition; clamped to [0,1]."""
    if correct:
        num = p_know * (1.0 - params.p_slip)
        den = num + (1.0 - p_know) * params.p_guess
    else:
        num = p_know * params.p_slip
        den = num + (1.0 - p_know) * (1.0 - params.p_guess)
    posterior = num / den if den > 0.0 else p_know
    updated = posterior + (1.0 - posterior) * params.p_learn
    return min(1.0, max(0.0, updated))


def bkt_update(state: MasteryState, params: BKTParams, correct: bool) -> MasteryState:
    """Apply one observation, returning a new state with appended history."""
    p_new = update_p_know(state.p_know, params, correct)
    return MasteryState(
        student=state.student,
        kc=state.kc,
        p_know=p_new,
        history=state.history + ((correct, p_new),),
    )


def trace_mastery(params: BKTParams, sequence: Sequence[bool], student: str = "") -> MasteryState:
    """Fold updates over a first-attempt outcome sequence from p_init."""
    state = MasteryState(student=student, kc=params.kc, p_know=params.p_init)
    for correct in sequence:
        state = bkt_update(state, params, correct)
    return state


def sequence_log_lik(params: BKTParams, sequence: Sequence[bool]) -> float:
    """Sum of per-observation predictive log-probabilities along a trace."""
    p_know = params.p_init
    total = 0.0
    for correct in sequence:
        p_c = predict_correct(p_know, params)
        p_obs = p_c if correct else 1.0 - p_c
        total += np.log(p_obs) if p_obs > 0.0 else -np.inf
        p_know = update_p_know(p_know, params, correct)
    return float(total)


@dataclass(frozen=True)
class BKTFitConfig:
    grid_step: float = 0.05
    refine: bool = True
    refine_step: float = 0.01
    guess_cap: float = 0.3
    slip_cap: float = 0.3


def _axis(lo: float, hi: float, step: float) -> np.ndarray:
    n = int(round((hi - lo) / step))
    vals = lo + step * np.arange(n + 1)
    return np.clip(vals, 0.0, 1.0)


def _grid_log_liks(
    obs: np.ndarray, mask: np.ndarray, grid: np.ndarray
) -> np.ndarray:
    """Total log-likelihood of all sequences at every grid point.

    ``obs`` is (n_seq, max_len) with 1=correct, ``mask`` marks real cells.
    ``grid`` is (n_points, 4) columns [L0, T, G, S]. Vectorized over grid
    points; chunked to bound memory.
    """
    n_points = grid.shape[0]
    n_seq, max_len = obs.shape
    total = np.zeros(n_points)
    chunk = max(1, int(4_000_000 // max(n_seq, 1)))
    with np.errstate(divide="ignore", invalid="ignore"):
        for start in range(0, n_points, chunk):
            g = grid[start : start + chunk]
            L0, T, G, S = (g[:, i : i + 1] for i in range(4))
            L = np.broadcast_to(L0, (g.shape[0], n_seq)).copy()
            ll = np.zeros((g.shape[0], n_seq))
            for t in range(max_len):
                m = mask[:, t]
                if not m.any():
                    continue
                o = obs[:, t]
                p_c = L * (1.0 - S) + (1.0 - L) * G
                p_obs = np.where(o == 1, p_c, 1.0 - p_c)
                step_ll = np.where(m, np.where(p_obs > 0.0, np.log(p_obs), -np.inf), 0.0)
                ll += step_ll
                num = np.where(o == 1, L * (1.0 - S), L * S)
                den = np.where(o == 1, p_c, 1.0 - p_c)
                posterior = np.where(den > 0.0, num / den, L)
                updated = posterior + (1.0 - posterior) * T
                L = np.where(m, np.clip(updated, 0.0, 1.0), L)
            total[start : start + chunk] = ll.sum(axis=1)
    return total


def _pack_sequences(sequences: Sequence[Sequence[bool]]):
    lengths = [len(s) for s in sequences]
    max_len = max(lengths)
    obs = np.zeros((len(sequences), max_len), dtype=np.int8)
    mask = np.zeros((len(sequences), max_len), dtype=bool)
    for i, seq in enumerate(sequences):
        for t, correct in enumerate(seq):
            obs[i, t] = 1 if correct else 0
            mask[i, t] = True
    return obs, mask


def fit_bkt(
    sequences: Sequence[Sequence[bool]],
    kc: str = "",
    config: BKTFitConfig = BKTFitConfig(),
) -> BKTParams:
    """Fit parameters for one KC from per-student outcome sequences.

    Coarse grid search over [0,1]^2 x [0,guess_cap] x [0,slip_cap] at
    ``grid_step``, then one refinement pass at ``refine_step`` around the
    incumbent. Deterministic; ties resolve to the lowest-index grid point.
    """
    sequences = [s for s in sequences if len(s) > 0]
    if not sequences:
        raise EmptyData()
    obs, mask = _pack_sequences(sequences)

    def search(axes) -> tuple[np.ndarray, float]:
        mesh = np.meshgrid(*axes, indexing="ij")
        grid = np.stack([m.ravel() for m in mesh], axis=1)
        lls = _grid_log_liks(obs, mask, grid)
        best = int(np.argmax(lls))
        return grid[best], float(lls[best])

    axes = (
        _axis(0.0, 1.0, config.grid_step),
        _axis(0.0, 1.0, config.grid_step),
        _axis(0.0, config.guess_cap, config.grid_step),
        _axis(0.0, config.slip_cap, config.grid_step),
    )
    incumbent, best_ll = search(axes)

    if config.refine:
        span = config.grid_step
        caps = (1.0, 1.0, config.guess_cap, config.slip_cap)
        fine_axes = []
        for i in range(4):
            lo = max(0.0, incumbent[i] - span)
            hi = min(caps[i], incumbent[i] + span)
            vals = np.unique(np.clip(_axis(lo, hi, config.refine_step), 0.0, caps[i]))
            fine_axes.append(vals)
        candidate, cand_ll = search(tuple(fine_axes))
        if cand_ll > best_ll:
            incumbent, best_ll = candidate, cand_ll

    params = BKTParams(
        kc=kc,
        p_init=float(incumbent[0]),
        p_learn=float(incumbent[1]),
        p_guess=float(incumbent[2]),
        p_slip=float(incumbent[3]),
        log_lik=best_ll,
    )
    return params


def sequences_from_table(table, kc: str) -> dict[str, list[bool]]:
    """Per-student ordered first-attempt correctness sequences for one KC.

    Hints count as incorrect, matching the first-attempt error convention.
    """
    out: dict[str, list[bool]] = {}
    for rec in table.records:  # table order: student, then time
        if kc in rec.kcs:
            out.setdefault(rec.student_id, []).append(rec.first_attempt_correct)
    return out


def fit_bkt_per_kc(table, config: BKTFitConfig = BKTFitConfig()) -> dict[str, BKTParams]:
    """Fit every KC in a roll-up table independently."""
    out = {}
    for kc in sorted(table.kcs):
        seqs = list(sequences_from_table(table, kc).values())
        out[kc] = fit_bkt(seqs, kc=kc, config=config)
    return out


def save_bkt_params(params: Mapping[str, BKTParams], path) -> None:
    payload = {
        kc: {
            "p_init": p.p_init,
            "p_learn": p.p_learn,
            "p_guess": p.p_guess,
            "p_slip": p.p_slip,
            "log_lik": None if np.isnan(p.log_lik) else p.log_lik,
        }
        for kc, p in params.items()
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_bkt_params(path) -> dict[str, BKTParams]:
    """Load externally supplied parameters (same schema as save_bkt_params)."""
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    out = {}
    for kc, d in payload.items():
        ll = d.get("log_lik")
        out[kc] = BKTParams(
            kc=kc,
            p_init=d["p_init"],
            p_learn=d["p_learn"],
            p_guess=d["p_guess"],
            p_slip=d["p_slip"],
            log_lik=float("nan") if ll is None else ll,
        )
    return out
