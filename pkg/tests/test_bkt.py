import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tutorkit.bkt import (
    BKTFitConfig,
    BKTParams,
    EmptyData,
    MasteryState,
    bkt_update,
    fit_bkt,
    load_bkt_params,
    predict_correct,
    save_bkt_params,
    sequence_log_lik,
    trace_mastery,
    update_p_know,
)
from tutorkit.synthetic import generate_bkt_sequences

P = BKTParams(kc="k", p_init=0.5, p_learn=0.2, p_guess=0.2, p_slip=0.1)


class TestUpdate:
    def test_hand_computed_correct_update(self):
        # posterior = 0.5*0.9 / (0.5*0.9 + 0.5*0.2) = 0.45/0.55
        # updated = posterior + (1-posterior)*0.2
        state = MasteryState(student="a", kc="k", p_know=0.5)
        new = bkt_update(state, P, correct=True)
        posterior = 0.45 / 0.55
        assert new.p_know == pytest.approx(posterior + (1 - posterior) * 0.2, abs=1e-12)
        assert new.p_know == pytest.approx(0.8545454545, abs=1e-9)
        assert new.history == ((True, new.p_know),)

    def test_hand_computed_incorrect_update(self):
        state = MasteryState(student="a", kc="k", p_know=0.5)
        new = bkt_update(state, P, correct=False)
        posterior = (0.5 * 0.1) / (0.5 * 0.1 + 0.5 * 0.8)
        assert new.p_know == pytest.approx(posterior + (1 - posterior) * 0.2, abs=1e-12)

    def test_certain_mastery_absorbing_with_zero_slip(self):
        params = BKTParams(kc="k", p_init=1.0, p_learn=0.1, p_guess=0.2, p_slip=0.0)
        state = MasteryState(student="a", kc="k", p_know=1.0)
        assert bkt_update(state, params, correct=True).p_know == 1.0

    def test_uninformative_likelihood(self):
        params = BKTParams(kc="k", p_init=0.5, p_learn=0.0, p_guess=0.5, p_slip=0.5)
        state = MasteryState(student="a", kc="k", p_know=0.5)
        assert bkt_update(state, params, correct=True).p_know == pytest.approx(0.5)
        assert bkt_update(state, params, correct=False).p_know == pytest.approx(0.5)

    @given(
        l=st.floats(0, 1), t=st.floats(0, 1), g=st.floats(0, 1), s=st.floats(0, 1),
        correct=st.booleans(),
    )
    @settings(max_examples=300, deadline=None)
    def test_update_stays_in_unit_interval(self, l, t, g, s, correct):
        params = BKTParams(kc="k", p_init=l, p_learn=t, p_guess=g, p_slip=s)
        assert 0.0 <= update_p_know(l, params, correct) <= 1.0


class TestTrace:
    def test_empty_sequence_is_prior(self):
        state = trace_mastery(P, [])
        assert state.p_know == P.p_init
        assert state.history == ()

    def test_single_correct_matches_update(self):
        state = trace_mastery(P, [True])
        assert state.p_know == pytest.approx(0.8545454545, abs=1e-9)

    def test_monotone_under_zero_noise(self):
        params = BKTParams(kc="k", p_init=0.3, p_learn=0.1, p_guess=0.0, p_slip=0.0)
        state = MasteryState(student="a", kc="k", p_know=0.3)
        new = bkt_update(state, params, correct=True)
        assert new.p_know >= state.p_know
        assert new.p_know == 1.0  # zero-noise correct implies known

    def test_history_length_matches_observations(self):
        seq = [True, False, True, True]
        state = trace_mastery(P, seq)
        assert len(state.history) == len(seq)


class TestFit:
    def test_recovers_generating_parameters(self):
        true = BKTParams(kc="k", p_init=0.3, p_learn=0.15, p_guess=0.2, p_slip=0.1)
        seqs = generate_bkt_sequences(true, n_students=500, n_opportunities=15, seed=9)
        fitted = fit_bkt(seqs, kc="k")
        assert abs(fitted.p_init - true.p_init) <= 0.05
        assert abs(fitted.p_learn - true.p_learn) <= 0.05
        assert abs(fitted.p_guess - true.p_guess) <= 0.05
        assert abs(fitted.p_slip - true.p_slip) <= 0.05

    def test_optimal_on_own_grid(self):
        # Single all-correct observations: exhaustively recheck every coarse
        # grid point against the fitted likelihood.
        seqs = [[True]] * 20
        config = BKTFitConfig(grid_step=0.25, refine=False)
        fitted = fit_bkt(seqs, kc="k", config=config)
        axis01 = np.arange(0, 1.0001, 0.25)
        axis_cap = np.arange(0, 0.30001, 0.25)
        for l0 in axis01:
            for t in axis01:
                for g in axis_cap:
                    for s in axis_cap:
                        p = BKTParams(kc="k", p_init=l0, p_learn=t, p_guess=g, p_slip=s)
                        ll = sum(sequence_log_lik(p, seq) for seq in seqs)
                        assert fitted.log_lik >= ll - 1e-9

    def test_guess_cap_binds(self):
        true = BKTParams(kc="k", p_init=0.05, p_learn=0.02, p_guess=0.5, p_slip=0.05)
        seqs = generate_bkt_sequences(true, n_students=400, n_opportunities=8, seed=10)
        fitted = fit_bkt(seqs, kc="k")
        assert fitted.p_guess == pytest.approx(0.3, abs=1e-12)

    def test_empty_data(self):
        with pytest.raises(EmptyData):
            fit_bkt([])
        with pytest.raises(EmptyData):
            fit_bkt([[]])

    def test_fitter_log_lik_matches_trace_consistency(self):
        true = BKTParams(kc="k", p_init=0.4, p_learn=0.2, p_guess=0.25, p_slip=0.1)
        seqs = generate_bkt_sequences(true, n_students=40, n_opportunities=6, seed=11)
        fitted = fit_bkt(seqs, kc="k", config=BKTFitConfig(grid_step=0.1))
        recomputed = sum(sequence_log_lik(fitted, seq) for seq in seqs)
        assert fitted.log_lik == pytest.approx(recomputed, abs=1e-8)

    def test_deterministic(self):
        true = BKTParams(kc="k", p_init=0.3, p_learn=0.2, p_guess=0.2, p_slip=0.1)
        seqs = generate_bkt_sequences(true, n_students=50, n_opportunities=6, seed=12)
        f1 = fit_bkt(seqs, kc="k", config=BKTFitConfig(grid_step=0.1))
        f2 = fit_bkt(seqs, kc="k", config=BKTFitConfig(grid_step=0.1))
        assert f1 == f2


class TestIO:
    def test_save_load_roundtrip(self, tmp_path):
        params = {
            "k1": BKTParams(kc="k1", p_init=0.3, p_learn=0.1, p_guess=0.2, p_slip=0.05, log_lik=-12.5),
            "k2": BKTParams(kc="k2", p_init=0.5, p_learn=0.3, p_guess=0.1, p_slip=0.1),
        }
        path = tmp_path / "params.json"
        save_bkt_params(params, path)
        loaded = load_bkt_params(path)
        assert loaded["k1"] == params["k1"]
        assert loaded["k2"].p_init == 0.5
        assert np.isnan(loaded["k2"].log_lik)


def test_predictive_probability_definition():
    assert predict_correct(0.5, P) == pytest.approx(0.5 * 0.9 + 0.5 * 0.2)
