import hashlib
import json
import os

import pytest

from tutorkit.bkt import save_bkt_params
from tutorkit.cli import main
from tutorkit.kcmodel import save_kc_model
from tutorkit.logstore import serialize_transactions
from tutorkit.policysim import save_pool
from tutorkit.synthetic import easy_hard_pool, generate_fixture_log


@pytest.fixture(scope="module")
def fixture_dir(tmp_path_factory):
    """20-student transaction log, KC model, pool, and tracker params."""
    root = tmp_path_factory.mktemp("fixture")
    transactions, model = generate_fixture_log(n_students=20, seed=7)
    serialize_transactions(transactions, root / "transactions.tsv")
    save_kc_model(model, root / "model.csv")
    pool, params = easy_hard_pool()
    save_pool(pool, root / "pool.csv")
    save_bkt_params(params, root / "bkt_params.json")
    return root


def run(args):
    return main([str(a) for a in args])


def test_unknown_subcommand_is_usage_error(capsys):
    assert run(["frobnicate"]) == 1
    assert "Usage" in capsys.readouterr().err


def test_missing_required_flag(capsys):
    assert run(["fit-afm"]) == 1


def test_data_error_exit_code(tmp_path, fixture_dir, capsys):
    bad = tmp_path / "bad.tsv"
    bad.write_text("Anon Student Id\tSession Id\tTime\tProblem Name\tStep Name\tAttempt At Step\tOutcome\n"
                   "a\ts\t10\tp\ts\t1\tnonsense\n")
    code = run(["ingest", "--input", bad, "-o", tmp_path / "out"])
    assert code == 2
    assert "nonsense" in capsys.readouterr().err


def test_ingest_writes_canonical_tsv_and_diagnostics(fixture_dir, tmp_path):
    out = tmp_path / "out"
    code = run([
        "ingest", "--input", fixture_dir / "transactions.tsv",
        "--kc-model", fixture_dir / "model.csv", "-o", out,
    ])
    assert code == 0
    assert (out / "transactions.tsv").exists()
    diag = json.loads((out / "ingest_diagnostics.json").read_text())
    assert diag["n_students"] == 20
    manifest = json.loads((out / "manifest_ingest.json").read_text())
    assert manifest["command"] == "ingest"
    assert manifest["config_hash"]


def test_fit_afm_outputs(fixture_dir, tmp_path):
    out = tmp_path / "out"
    code = run([
        "fit-afm", "--input", fixture_dir / "transactions.tsv",
        "--kc-model", fixture_dir / "model.csv",
        "--with-condition", "--tol", "1e-4", "-o", out,
    ])
    assert code == 0
    fit = json.loads((out / "afm_fit.json").read_text())
    assert set(fit["beta"]) == {"add", "sub"}
    assert fit["aic"] == pytest.approx(2 * fit["n_params"] - 2 * fit["log_lik"])
    effect = json.loads((out / "condition_effect.json").read_text())
    assert effect["condition_levels"] == ["orig", "redesign"]
    assert (out / "knowledge_estimates.json").exists()
    assert (out / "predictions.csv").exists()


def test_curves_and_figures(fixture_dir, tmp_path):
    out = tmp_path / "out"
    code = run([
        "curves", "--input", fixture_dir / "transactions.tsv",
        "--kc-model", fixture_dir / "model.csv",
        "--min-n", 5, "--tol", "1e-3", "-o", out,
    ])
    assert code == 0
    lines = (out / "curves.csv").read_text().splitlines()
    assert lines[0] == "kc,opportunity,n,error_rate,predicted_error"
    assert len(lines) > 1
    assert (out / "curves.svg").exists()
    flags = json.loads((out / "kc_flags.json").read_text())
    assert set(flags) == {"add", "sub"}


def test_fit_bkt_and_simulate(fixture_dir, tmp_path):
    out = tmp_path / "out"
    code = run([
        "fit-bkt", "--input", fixture_dir / "transactions.tsv",
        "--kc-model", fixture_dir / "model.csv",
        "--grid-step", 0.1, "-o", out,
    ])
    assert code == 0
    params = json.loads((out / "bkt_params.json").read_text())
    assert set(params) == {"add", "sub"}

    sim_out = tmp_path / "sim"
    code = run([
        "simulate", "--pool", fixture_dir / "pool.csv",
        "--bkt-params", fixture_dir / "bkt_params.json",
        "--max-problems", 8, "--seed", 3, "-o", sim_out,
    ])
    assert code == 0
    report = json.loads((sim_out / "sim_report.json").read_text())
    assert report["completed_steps"] > 0
    assert set(report["per_kc"]) == {"easy", "hard"}


def test_compare_policies_cmd(fixture_dir, tmp_path):
    out = tmp_path / "out"
    code = run([
        "compare-policies", "--pool", fixture_dir / "pool.csv",
        "--bkt-params", fixture_dir / "bkt_params.json",
        "--n-students", 5, "--max-problems", 8, "--seed", 1, "-o", out,
    ])
    assert code == 0
    payload = json.loads((out / "policy_comparison.json").read_text())
    assert len(payload["aggregates"]) == 2
    assert "config_1_minus_config_0" in payload["paired_mean_differences"]
    assert (out / "policy_comparison.svg").exists()


def test_compare_models_cmd(fixture_dir, tmp_path):
    from tutorkit.kcmodel import KCModel, load_kc_model, merge_kcs

    model = load_kc_model(fixture_dir / "model.csv", name="split")
    merged = merge_kcs(model, {"add", "sub"}, "arith")
    merged_path = tmp_path / "merged.csv"
    save_kc_model(KCModel(name="merged", mapping=merged.mapping), merged_path)
    out = tmp_path / "out"
    code = run([
        "compare-models", "--input", fixture_dir / "transactions.tsv",
        "--kc-model", fixture_dir / "model.csv",
        "--kc-model", merged_path,
        "--tol", "1e-3", "-o", out,
    ])
    assert code == 0
    payload = json.loads((out / "model_comparison.json").read_text())
    assert len(payload["ranked"]) == 2
    assert (out / "model_comparison.txt").exists()


def test_metrics_cmd(fixture_dir, tmp_path):
    out = tmp_path / "out"
    new_kcs = tmp_path / "new.txt"
    new_kcs.write_text("sub\n")
    code = run([
        "metrics", "--input", fixture_dir / "transactions.tsv",
        "--kc-model", fixture_dir / "model.csv",
        "--new-kcs", new_kcs, "-o", out,
    ])
    assert code == 0
    payload = json.loads((out / "metrics.json").read_text())
    assert payload["time_on_task"]
    kinds = {row["kc"]: row["kc_type"] for row in payload["opportunity_allocation"]}
    assert kinds["sub"] == "NEW"
    assert (out / "time_on_task.csv").exists()
    assert (out / "allocation.csv").exists()


def test_config_file_overrides_flags(fixture_dir, tmp_path):
    out = tmp_path / "out"
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text("max_problems: 0\n")
    code = run([
        "simulate", "--pool", fixture_dir / "pool.csv",
        "--bkt-params", fixture_dir / "bkt_params.json",
        "--max-problems", 8, "--config", cfg, "-o", out,
    ])
    assert code == 0
    report = json.loads((out / "sim_report.json").read_text())
    assert report["completed_steps"] == 0  # config file wins over the flag


def _run_pipeline(fixture_dir, out):
    assert run([
        "ingest", "--input", fixture_dir / "transactions.tsv",
        "--kc-model", fixture_dir / "model.csv", "-o", out,
    ]) == 0
    assert run([
        "curves", "--input", fixture_dir / "transactions.tsv",
        "--kc-model", fixture_dir / "model.csv", "--min-n", 5, "--tol", "1e-3", "-o", out,
    ]) == 0
    assert run([
        "fit-afm", "--input", fixture_dir / "transactions.tsv",
        "--kc-model", fixture_dir / "model.csv", "--tol", "1e-3", "-o", out,
    ]) == 0
    assert run([
        "fit-bkt", "--input", fixture_dir / "transactions.tsv",
        "--kc-model", fixture_dir / "model.csv", "--grid-step", 0.1, "-o", out,
    ]) == 0
    assert run([
        "simulate", "--pool", fixture_dir / "pool.csv",
        "--bkt-params", fixture_dir / "bkt_params.json",
        "--max-problems", 8, "--seed", 3, "-o", out,
    ]) == 0
    assert run([
        "metrics", "--input", fixture_dir / "transactions.tsv",
        "--kc-model", fixture_dir / "model.csv", "-o", out,
    ]) == 0
    assert run(["report", "--run-dir", out]) == 0


def _hash_outputs(out):
    hashes = {}
    for root, _, files in os.walk(out):
        for name in sorted(files):
            if name.startswith("manifest_"):
                continue  # manifests carry timestamps
            path = os.path.join(root, name)
            rel = os.path.relpath(path, out)
            with open(path, "rb") as fh:
                hashes[rel] = hashlib.sha256(fh.read()).hexdigest()
    return hashes


def test_report_consolidates_sections(fixture_dir, tmp_path):
    out = tmp_path / "run"
    _run_pipeline(fixture_dir, out)
    payload = json.loads((out / "report.json").read_text())
    for section in ("diagnostics", "curves", "afm_fit", "bkt_params", "simulation", "metrics"):
        assert section in payload["sections"], section
    assert (out / "report.txt").read_text().startswith("run report")
    assert (out / "figures" / "learning_curves.svg").exists()


def test_full_pipeline_deterministic(fixture_dir, tmp_path):
    out1 = tmp_path / "run1"
    out2 = tmp_path / "run2"
    _run_pipeline(fixture_dir, out1)
    _run_pipeline(fixture_dir, out2)
    h1 = _hash_outputs(out1)
    h2 = _hash_outputs(out2)
    assert h1.keys() == h2.keys()
    diffs = [k for k in h1 if h1[k] != h2[k]]
    assert diffs == []
