import pytest

from tutorkit.afm import AFMFitConfig
from tutorkit.kcmodel import (
    EmptyModel,
    IncompleteAssignment,
    KCModel,
    SplitRule,
    UnknownKC,
    UnusedNewLabel,
    compare_models,
    load_kc_model,
    merge_kcs,
    save_kc_model,
    split_kc,
)
from tutorkit.synthetic import generate_afm_transactions


class TestLoad:
    def test_two_rows_one_step(self, tmp_path):
        path = tmp_path / "m.csv"
        path.write_text("problem,step,kc\np1,s1,k1\np1,s1,k2\n")
        model = load_kc_model(path)
        assert model.mapping == {("p1", "s1"): frozenset(["k1", "k2"])}
        assert model.kc_labels == {"k1", "k2"}

    def test_empty_model(self, tmp_path):
        path = tmp_path / "m.csv"
        path.write_text("problem,step,kc\n")
        with pytest.raises(EmptyModel):
            load_kc_model(path)

    def test_duplicate_rows_idempotent(self, tmp_path):
        a = tmp_path / "a.csv"
        b = tmp_path / "b.csv"
        a.write_text("problem,step,kc\np1,s1,k1\n")
        b.write_text("problem,step,kc\np1,s1,k1\np1,s1,k1\n")
        assert load_kc_model(a, name="m").mapping == load_kc_model(b, name="m").mapping

    def test_save_load_roundtrip(self, tmp_path, simple_model):
        path = tmp_path / "m.csv"
        save_kc_model(simple_model, path)
        assert load_kc_model(path, name=simple_model.name).mapping == simple_model.mapping


def grid_model(n_steps=10):
    mapping = {(f"p{i}", "s1"): frozenset(["read-point"]) for i in range(n_steps)}
    mapping[("px", "s9")] = frozenset(["other"])
    return KCModel(name="grid", mapping=mapping)


class TestSplitMerge:
    def test_split_adds_one_kc(self):
        model = grid_model()
        assignment = {
            (f"p{i}", "s1"): ("read-point-grid" if i % 2 else "read-point-interp")
            for i in range(10)
        }
        rule = SplitRule("read-point", ("read-point-grid", "read-point-interp"), assignment)
        split = split_kc(model, rule)
        assert len(split.kc_labels) == len(model.kc_labels) + 1
        assert split.steps == model.steps
        assert split.mapping[("p0", "s1")] == frozenset(["read-point-interp"])

    def test_incomplete_assignment(self):
        model = grid_model()
        assignment = {(f"p{i}", "s1"): "a" for i in range(9)}
        assignment[("p0", "s1")] = "b"
        with pytest.raises(IncompleteAssignment):
            split_kc(model, SplitRule("read-point", ("a", "b"), assignment))

    def test_unused_new_label(self):
        model = grid_model()
        assignment = {(f"p{i}", "s1"): "a" for i in range(10)}
        with pytest.raises(UnusedNewLabel):
            split_kc(model, SplitRule("read-point", ("a", "b"), assignment))

    def test_unknown_target(self):
        with pytest.raises(UnknownKC):
            split_kc(grid_model(), SplitRule("nope", ("a", "b"), {}))

    def test_split_then_merge_restores(self):
        model = grid_model()
        assignment = {(f"p{i}", "s1"): ("a" if i < 5 else "b") for i in range(10)}
        split = split_kc(model, SplitRule("read-point", ("a", "b"), assignment))
        merged = merge_kcs(split, {"a", "b"}, "read-point")
        assert merged.mapping == model.mapping

    def test_merge_set_semantics(self):
        model = KCModel(name="m", mapping={("p", "s"): frozenset(["a", "b"])})
        merged = merge_kcs(model, {"a", "b"}, "c")
        assert merged.mapping[("p", "s")] == frozenset(["c"])

    def test_merge_self_identity(self):
        model = grid_model()
        merged = merge_kcs(model, {"other"}, "other")
        assert merged.mapping == model.mapping

    def test_merge_unknown(self):
        with pytest.raises(UnknownKC):
            merge_kcs(grid_model(), {"nope"}, "x")


def two_kc_transactions(seed, beta_gap=1.5, n_students=60, n_opps=8):
    beta = {"kA": beta_gap / 2, "kB": -beta_gap / 2}
    gamma = {"kA": 0.1, "kB": 0.1}
    kc_to_step = {"kA": ("p", "sA"), "kB": ("p", "sB")}
    return generate_afm_transactions(
        beta, gamma, kc_to_step, n_students=n_students, n_opportunities=n_opps, seed=seed
    )


def split_and_merged_candidates(n_opps=8):
    split_map = {}
    merged_map = {}
    for n in range(1, n_opps + 1):
        split_map[(f"p{n:03d}", "sA")] = frozenset(["kA"])
        split_map[(f"p{n:03d}", "sB")] = frozenset(["kB"])
        merged_map[(f"p{n:03d}", "sA")] = frozenset(["k"])
        merged_map[(f"p{n:03d}", "sB")] = frozenset(["k"])
    return (
        KCModel(name="split", mapping=split_map),
        KCModel(name="merged", mapping=merged_map),
    )


class TestCompare:
    def test_split_model_wins_by_aic(self):
        txs = two_kc_transactions(seed=11)
        split, merged = split_and_merged_candidates()
        comparison = compare_models(txs, [merged, split], AFMFitConfig(tol=1e-3, max_iter=200))
        assert comparison.best().name == "split"

    def test_merge_has_two_fewer_params(self):
        txs = two_kc_transactions(seed=12)
        split, merged = split_and_merged_candidates()
        comparison = compare_models(txs, [split, merged], AFMFitConfig(tol=1e-3, max_iter=200))
        by_name = {r.name: r for r in comparison.ranked}
        assert by_name["split"].n_params - by_name["merged"].n_params == 2

    def test_aic_identity(self):
        txs = two_kc_transactions(seed=13, n_students=30, n_opps=5)
        split, merged = split_and_merged_candidates(n_opps=5)
        comparison = compare_models(txs, [split, merged], AFMFitConfig(tol=1e-3, max_iter=200))
        for r in comparison.ranked:
            assert r.aic == pytest.approx(2 * r.n_params - 2 * r.log_lik, abs=1e-9)

    def test_identical_candidates_tie_by_name(self):
        txs = two_kc_transactions(seed=14, n_students=30, n_opps=5)
        split, _ = split_and_merged_candidates(n_opps=5)
        twin = KCModel(name="a-twin", mapping=split.mapping)
        comparison = compare_models(txs, [split, twin], AFMFitConfig(tol=1e-3, max_iter=200))
        assert comparison.ranked[0].aic == pytest.approx(comparison.ranked[1].aic)
        assert comparison.ranked[0].name == "a-twin"

    def test_ranking_invariant_to_order(self):
        txs = two_kc_transactions(seed=15, n_students=30, n_opps=5)
        split, merged = split_and_merged_candidates(n_opps=5)
        c1 = compare_models(txs, [split, merged], AFMFitConfig(tol=1e-3, max_iter=200))
        c2 = compare_models(txs, [merged, split], AFMFitConfig(tol=1e-3, max_iter=200))
        assert [r.name for r in c1.ranked] == [r.name for r in c2.ranked]

    def test_unresolving_candidate_excluded(self):
        txs = two_kc_transactions(seed=16, n_students=20, n_opps=5)
        split, merged = split_and_merged_candidates(n_opps=5)
        bogus = KCModel(name="bogus", mapping={("nope", "nope"): frozenset(["x"])})
        comparison = compare_models(txs, [split, merged, bogus], AFMFitConfig(tol=1e-3, max_iter=200))
        assert [r.name for r in comparison.failed] == ["bogus"]
        assert "NoMappedSteps" in comparison.failed[0].failure

    def test_needs_two_candidates(self):
        split, _ = split_and_merged_candidates()
        with pytest.raises(Exception):
            compare_models([], [split])
