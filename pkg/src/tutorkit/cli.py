"""Command-line pipeline: ingest, model fitting, curves, simulation,
metrics, and consolidated reports.

Every command writes its artifacts to an output directory together with a
run manifest (inputs, config hash, seed, package version, timestamp).
Outputs are deterministic given the same inputs and config; the manifest
timestamp is the only volatile byte.
"""

from __future__ import annotations

import datetime as _dt
import hashlib
import json
import os
import sys
import click
import yaml

from . import __version__
from .afm import (
    AFMFitConfig,
    afm_condition_effect,
    fit_afm,
    knowledge_estimates,
    predict_table,
)
from .bkt import BKTFitConfig, fit_bkt_per_kc, load_bkt_params, save_bkt_params
from .errors import TutorkitError
from .kcmodel import compare_models, load_kc_model
from .learncurve import FlagConfig, curves_to_csv, flag_kcs, learning_curve
from .logstore import (
    diagnostics_json,
    ingest_transactions,
    rollup_student_steps,
    serialize_transactions,
)
from .plotting import plot_learning_curves, plot_policy_comparison
from .policysim import (
    Generator,
    PolicyConfig,
    Selection,
    SyntheticStudent,
    compare_policies,
    load_pool,
    simulate_practice,
)
from .procmetrics import (
    knowledge_summary,
    metrics_to_json,
    opportunity_allocation,
    productivity,
    time_on_task,
)
from .report import build_report


def _load_config_file(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, dict):
        raise click.UsageError(f"config file must be a mapping: {path}")
    return {str(k).replace("-", "_"): v for k, v in data.items()}


def _apply_config(ctx: click.Context, params: dict) -> dict:
    """Values from --config override flag values."""
    config_path = params.pop("config", None)
    if config_path:
        overrides = _load_config_file(config_path)
        unknown = set(overrides) - set(params)
        if unknown:
            raise click.UsageError(f"unknown config keys: {sorted(unknown)}")
        params.update(overrides)
    return params


def _config_hash(params: dict) -> str:
    canon = json.dumps(
        {k: v for k, v in sorted(params.items())}, sort_keys=True, default=str
    )
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]


def _write_manifest(out_dir, command: str, params: dict, inputs: list, outputs: list):
    manifest = {
        "command": command,
        "config": {k: v for k, v in sorted(params.items()) if k != "output_dir"},
        "config_hash": _config_hash(params),
        "inputs": [os.path.abspath(str(p)) for p in inputs if p],
        "outputs": sorted(outputs),
        "seed": params.get("seed"),
        "version": __version__,
        "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(),
    }
    path = os.path.join(out_dir, f"manifest_{command.replace('-', '_')}.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")


def _write_json(out_dir, name: str, payload) -> str:
    path = os.path.join(out_dir, name)
    with open(path, "w", encoding="utf-8") as fh:
        if isinstance(payload, str):
            fh.write(payload)
            if not payload.endswith("\n"):
                fh.write("\n")
        else:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return name


def _out_dir(params) -> str:
    out = params["output_dir"]
    os.makedirs(out, exist_ok=True)
    return out


common_options = [
    click.option("--output-dir", "-o", default=".", show_default=True, help="Directory for artifacts."),
    click.option("--config", type=click.Path(exists=True), default=None, help="Key-value config file; its values override flags."),
]


def _with_common(func):
    for opt in reversed(common_options):
        func = opt(func)
    return func


@click.group()
@click.version_option(version=__version__)
def cli():
    """Tutor-log analytics: student models, curves, policy simulation."""


@cli.command()
@click.option("--input", "input_path", required=True, type=click.Path(exists=True), help="Tab-separated transaction log.")
@click.option("--kc-model", "kc_model_path", type=click.Path(exists=True), default=None, help="Optional KC model CSV; enables roll-up diagnostics.")
@click.option("--columns", default=None, help="JSON object remapping logical field names to file column names.")
@_with_common
@click.pass_context
def ingest(ctx, **params):
    """Parse a transaction log; write canonical TSV and diagnostics."""
    params = _apply_config(ctx, params)
    out = _out_dir(params)
    colmap = json.loads(params["columns"]) if params["columns"] else None
    transactions = ingest_transactions(params["input_path"], columns=colmap)
    serialize_transactions(transactions, os.path.join(out, "transactions.tsv"))
    outputs = ["transactions.tsv"]
    diag = {"n_transactions": len(transactions)}
    if params["kc_model_path"]:
        model = load_kc_model(params["kc_model_path"])
        table = rollup_student_steps(transactions, model)
        diag = json.loads(diagnostics_json(table))
    outputs.append(_write_json(out, "ingest_diagnostics.json", diag))
    _write_manifest(out, "ingest", params, [params["input_path"], params["kc_model_path"]], outputs)
    click.echo(f"ingested {len(transactions)} transactions -> {out}")


def _rollup_from_options(params):
    transactions = ingest_transactions(params["input_path"])
    model = load_kc_model(params["kc_model_path"])
    return rollup_student_steps(transactions, model), transactions


@cli.command()
@click.option("--input", "input_path", required=True, type=click.Path(exists=True))
@click.option("--kc-model", "kc_model_path", required=True, type=click.Path(exists=True))
@click.option("--min-n", default=10, show_default=True, help="Minimum students per curve point.")
@click.option("--high-error", default=0.4, show_default=True)
@click.option("--flat-slope", default=0.01, show_default=True)
@click.option("--l2-theta", default=0.5, show_default=True)
@click.option("--tol", default=1e-6, show_default=True)
@click.option("--max-iter", default=500, show_default=True)
@_with_common
@click.pass_context
def curves(ctx, **params):
    """Per-KC learning curves with model predictions, flags, and figures."""
    params = _apply_config(ctx, params)
    out = _out_dir(params)
    table, _ = _rollup_from_options(params)
    fit = fit_afm(
        table,
        AFMFitConfig(l2_theta=params["l2_theta"], tol=params["tol"], max_iter=params["max_iter"]),
    )
    all_curves = {
        kc: learning_curve(table, kc, fit=fit, min_n=params["min_n"])
        for kc in sorted(table.kcs)
    }
    curves_to_csv(all_curves, os.path.join(out, "curves.csv"))
    flags = flag_kcs(
        all_curves,
        fit,
        FlagConfig(high_error=params["high_error"], flat_slope=params["flat_slope"], min_n=params["min_n"]),
    )
    outputs = ["curves.csv", _write_json(out, "kc_flags.json", {kc: flag.value for kc, flag in flags})]
    plot_learning_curves(all_curves, os.path.join(out, "curves.svg"))
    outputs.append("curves.svg")
    _write_manifest(out, "curves", params, [params["input_path"], params["kc_model_path"]], outputs)
    click.echo(f"wrote curves for {len(all_curves)} KCs -> {out}")


@cli.command("fit-afm")
@click.option("--input", "input_path", required=True, type=click.Path(exists=True))
@click.option("--kc-model", "kc_model_path", required=True, type=click.Path(exists=True))
@click.option("--l2-theta", default=0.5, show_default=True)
@click.option("--tol", default=1e-6, show_default=True, help="Max projected-gradient component at convergence.")
@click.option("--max-iter", default=500, show_default=True)
@click.option("--with-condition", is_flag=True, default=False, help="Estimate a condition effect jointly.")
@click.option("--mastery-threshold", default=0.95, show_default=True)
@_with_common
@click.pass_context
def fit_afm_cmd(ctx, **params):
    """Fit the opportunity model; write parameters, predictions, and
    per-student knowledge estimates."""
    params = _apply_config(ctx, params)
    out = _out_dir(params)
    table, _ = _rollup_from_options(params)
    config = AFMFitConfig(
        l2_theta=params["l2_theta"], tol=params["tol"], max_iter=params["max_iter"]
    )
    fit = fit_afm(table, config)
    outputs = [_write_json(out, "afm_fit.json", fit.to_json())]
    if params["with_condition"]:
        effect = afm_condition_effect(table, config)
        outputs.append(
            _write_json(
                out,
                "condition_effect.json",
                {
                    "delta": effect.delta,
                    "std_error_approx": effect.std_error_approx,
                    "condition_levels": list(effect.condition_levels),
                },
            )
        )
    estimates = knowledge_estimates(fit, table, mastery_threshold=params["mastery_threshold"])
    outputs.append(
        _write_json(
            out,
            "knowledge_estimates.json",
            {
                e.student: {
                    "total": e.total,
                    "average": e.average,
                    "mastered_count": e.mastered_count,
                    "condition": e.condition_tag,
                    "per_kc_final": dict(sorted(e.per_kc_final.items())),
                }
                for e in estimates
            },
        )
    )
    predictions = predict_table(fit, table)
    pred_path = os.path.join(out, "predictions.csv")
    with open(pred_path, "w", encoding="utf-8", newline="") as fh:
        fh.write("student,problem,step,first_attempt_correct,predicted_p\n")
        for rec, p in zip(table.records, predictions):
            fh.write(
                f"{rec.student_id},{rec.problem_id},{rec.step_id},"
                f"{int(rec.first_attempt_correct)},{p!r}\n"
            )
    outputs.append("predictions.csv")
    _write_manifest(out, "fit-afm", params, [params["input_path"], params["kc_model_path"]], outputs)
    click.echo(
        f"fit: logLik={fit.log_lik:.2f} AIC={fit.aic:.2f} converged={fit.converged} -> {out}"
    )


@cli.command("fit-bkt")
@click.option("--input", "input_path", required=True, type=click.Path(exists=True))
@click.option("--kc-model", "kc_model_path", required=True, type=click.Path(exists=True))
@click.option("--grid-step", default=0.05, show_default=True)
@click.option("--guess-cap", default=0.3, show_default=True)
@click.option("--slip-cap", default=0.3, show_default=True)
@_with_common
@click.pass_context
def fit_bkt_cmd(ctx, **params):
    """Fit per-KC tracing parameters by deterministic grid search."""
    params = _apply_config(ctx, params)
    out = _out_dir(params)
    table, _ = _rollup_from_options(params)
    fitted = fit_bkt_per_kc(
        table,
        BKTFitConfig(
            grid_step=params["grid_step"],
            guess_cap=params["guess_cap"],
            slip_cap=params["slip_cap"],
        ),
    )
    save_bkt_params(fitted, os.path.join(out, "bkt_params.json"))
    _write_manifest(out, "fit-bkt", params, [params["input_path"], params["kc_model_path"]], ["bkt_params.json"])
    click.echo(f"fit tracing parameters for {len(fitted)} KCs -> {out}")


@cli.command("compare-models")
@click.option("--input", "input_path", required=True, type=click.Path(exists=True))
@click.option("--kc-model", "kc_model_paths", required=True, multiple=True, type=click.Path(exists=True), help="Candidate KC model CSV (repeat >= 2 times).")
@click.option("--l2-theta", default=0.5, show_default=True)
@click.option("--tol", default=1e-6, show_default=True)
@click.option("--max-iter", default=500, show_default=True)
@_with_common
@click.pass_context
def compare_models_cmd(ctx, **params):
    """Rank candidate KC models by AIC after refitting each."""
    params = _apply_config(ctx, params)
    out = _out_dir(params)
    transactions = ingest_transactions(params["input_path"])
    candidates = [load_kc_model(p) for p in params["kc_model_paths"]]
    comparison = compare_models(
        transactions,
        candidates,
        AFMFitConfig(l2_theta=params["l2_theta"], tol=params["tol"], max_iter=params["max_iter"]),
    )
    payload = {
        "ranked": [
            {
                "name": r.name,
                "log_lik": r.log_lik,
                "aic": r.aic,
                "bic": r.bic,
                "n_params": r.n_params,
                "n_kcs": r.n_kcs,
                "gamma": dict(sorted(r.gamma.items())),
            }
            for r in comparison.ranked
        ],
        "failed": [{"name": r.name, "reason": r.failure} for r in comparison.failed],
    }
    outputs = [_write_json(out, "model_comparison.json", payload)]
    lines = [f"{'model':30s} {'AIC':>12s} {'BIC':>12s} {'logLik':>12s} {'params':>7s}"]
    for r in comparison.ranked:
        lines.append(f"{r.name:30s} {r.aic:12.2f} {r.bic:12.2f} {r.log_lik:12.2f} {r.n_params:7d}")
    for r in comparison.failed:
        lines.append(f"{r.name:30s} EXCLUDED: {r.failure}")
    table_text = "\n".join(lines) + "\n"
    with open(os.path.join(out, "model_comparison.txt"), "w", encoding="utf-8") as fh:
        fh.write(table_text)
    outputs.append("model_comparison.txt")
    _write_manifest(out, "compare-models", params, [params["input_path"], *params["kc_model_paths"]], outputs)
    click.echo(table_text)


def _policy_config_from(params, seed: int) -> PolicyConfig:
    return PolicyConfig(
        mastery_threshold=params["mastery_threshold"],
        overpractice_threshold=params["overpractice_threshold"],
        skip_enabled=params["skip"],
        selection=Selection(params["selection"]),
        max_problems=params["max_problems"],
        rng_seed=seed,
    )


@cli.command()
@click.option("--pool", "pool_path", required=True, type=click.Path(exists=True), help="Problem pool CSV.")
@click.option("--bkt-params", "bkt_params_path", required=True, type=click.Path(exists=True), help="Tracker parameters JSON.")
@click.option("--student-params", "student_params_path", type=click.Path(exists=True), default=None, help="Ground-truth parameters JSON; defaults to the tracker's.")
@click.option("--selection", type=click.Choice([s.value for s in Selection]), default=Selection.ADAPTIVE.value, show_default=True)
@click.option("--skip/--no-skip", default=False, show_default=True, help="Enable mastered-step skipping.")
@click.option("--mastery-threshold", default=0.95, show_default=True)
@click.option("--overpractice-threshold", default=0.80, show_default=True)
@click.option("--max-problems", default=100, show_default=True)
@click.option("--seed", default=0, show_default=True)
@_with_common
@click.pass_context
def simulate(ctx, **params):
    """Simulate one synthetic student through the pool under a policy."""
    params = _apply_config(ctx, params)
    out = _out_dir(params)
    pool = load_pool(params["pool_path"])
    tracker = load_bkt_params(params["bkt_params_path"])
    truth = (
        load_bkt_params(params["student_params_path"])
        if params["student_params_path"]
        else tracker
    )
    student = SyntheticStudent(generator=Generator.BKT_TRUTH, bkt_truth=truth)
    config = _policy_config_from(params, params["seed"])
    report = simulate_practice(pool, student, tracker, config)
    outputs = [_write_json(out, "sim_report.json", report.to_dict())]
    _write_manifest(out, "simulate", params, [params["pool_path"], params["bkt_params_path"], params["student_params_path"]], outputs)
    click.echo(
        f"simulated: {report.completed_steps} steps, {report.skipped_steps} skipped -> {out}"
    )


@cli.command("compare-policies")
@click.option("--pool", "pool_path", required=True, type=click.Path(exists=True))
@click.option("--bkt-params", "bkt_params_path", required=True, type=click.Path(exists=True))
@click.option("--student-params", "student_params_path", type=click.Path(exists=True), default=None)
@click.option("--policy", "policy_paths", multiple=True, type=click.Path(exists=True), help="Policy config file (repeatable); default compares ADAPTIVE vs FIXED_SEQUENCE.")
@click.option("--n-students", default=100, show_default=True)
@click.option("--mastery-threshold", default=0.95, show_default=True)
@click.option("--overpractice-threshold", default=0.80, show_default=True)
@click.option("--max-problems", default=100, show_default=True)
@click.option("--seed", default=0, show_default=True)
@_with_common
@click.pass_context
def compare_policies_cmd(ctx, **params):
    """Compare policy configs over a shared synthetic population."""
    params = _apply_config(ctx, params)
    out = _out_dir(params)
    pool = load_pool(params["pool_path"])
    tracker = load_bkt_params(params["bkt_params_path"])
    truth = (
        load_bkt_params(params["student_params_path"])
        if params["student_params_path"]
        else tracker
    )
    if params["policy_paths"]:
        configs = []
        for path in params["policy_paths"]:
            raw = _load_config_file(path)
            configs.append(
                PolicyConfig(
                    mastery_threshold=raw.get("mastery_threshold", params["mastery_threshold"]),
                    overpractice_threshold=raw.get("overpractice_threshold", params["overpractice_threshold"]),
                    skip_enabled=raw.get("skip_enabled", False),
                    selection=Selection(raw.get("selection", "ADAPTIVE")),
                    max_problems=raw.get("max_problems", params["max_problems"]),
                    rng_seed=raw.get("rng_seed", params["seed"]),
                )
            )
    else:
        base = dict(
            mastery_threshold=params["mastery_threshold"],
            overpractice_threshold=params["overpractice_threshold"],
            max_problems=params["max_problems"],
            rng_seed=params["seed"],
        )
        configs = [
            PolicyConfig(selection=Selection.ADAPTIVE, **base),
            PolicyConfig(selection=Selection.FIXED_SEQUENCE, **base),
        ]
    population = [
        SyntheticStudent(generator=Generator.BKT_TRUTH, bkt_truth=truth)
        for _ in range(params["n_students"])
    ]
    aggregates, paired = compare_policies(pool, population, tracker, configs)
    payload = {
        "aggregates": [a.to_dict() for a in aggregates],
        "paired_mean_differences": paired,
    }
    outputs = [_write_json(out, "policy_comparison.json", payload)]
    plot_policy_comparison(aggregates, os.path.join(out, "policy_comparison.svg"))
    outputs.append("policy_comparison.svg")
    _write_manifest(out, "compare-policies", params, [params["pool_path"], params["bkt_params_path"]], outputs)
    click.echo(f"compared {len(configs)} policy configs over {len(population)} students -> {out}")


@cli.command()
@click.option("--input", "input_path", required=True, type=click.Path(exists=True))
@click.option("--kc-model", "kc_model_path", required=True, type=click.Path(exists=True))
@click.option("--bkt-params", "bkt_params_path", type=click.Path(exists=True), default=None, help="Tracing parameters; fitted from the data when omitted.")
@click.option("--idle-threshold", default=120.0, show_default=True, help="Idle gap threshold, seconds (strict).")
@click.option("--overpractice-threshold", default=0.80, show_default=True)
@click.option("--new-kcs", "new_kcs_path", type=click.Path(exists=True), default=None, help="File with one new-KC label per line.")
@click.option("--with-knowledge/--no-knowledge", default=True, show_default=True, help="Fit the opportunity model and summarize knowledge by condition.")
@click.option("--mastery-threshold", default=0.95, show_default=True)
@_with_common
@click.pass_context
def metrics(ctx, **params):
    """Time-on-task, productivity, allocation, and knowledge summaries."""
    params = _apply_config(ctx, params)
    out = _out_dir(params)
    table, transactions = _rollup_from_options(params)
    breakdowns = time_on_task(transactions, idle_threshold_seconds=params["idle_threshold"])
    prod = productivity(table)
    new_kcs: list[str] = []
    if params["new_kcs_path"]:
        with open(params["new_kcs_path"], "r", encoding="utf-8") as fh:
            new_kcs = [line.strip() for line in fh if line.strip()]
    bkt_params = (
        load_bkt_params(params["bkt_params_path"])
        if params["bkt_params_path"]
        else fit_bkt_per_kc(table)
    )
    allocation = opportunity_allocation(
        table, new_kcs, bkt_params, overpractice_threshold=params["overpractice_threshold"]
    )
    summary = None
    if params["with_knowledge"]:
        fit = fit_afm(table)
        estimates = knowledge_estimates(fit, table, mastery_threshold=params["mastery_threshold"])
        summary = knowledge_summary([(e.condition_tag, e) for e in estimates])
    outputs = [
        _write_json(out, "metrics.json", metrics_to_json(breakdowns, prod, allocation, summary))
    ]
    with open(os.path.join(out, "time_on_task.csv"), "w", encoding="utf-8", newline="") as fh:
        fh.write("student,session,logged_in_seconds,idle_seconds,active_seconds\n")
        for b in breakdowns:
            fh.write(
                f"{b.student},{b.session},{b.logged_in_seconds!r},{b.idle_seconds!r},{b.active_seconds!r}\n"
            )
    outputs.append("time_on_task.csv")
    with open(os.path.join(out, "allocation.csv"), "w", encoding="utf-8", newline="") as fh:
        fh.write("condition,kc,kc_type,opportunities,opportunities_after_overpractice\n")
        for r in allocation:
            fh.write(
                f"{r.condition or ''},{r.kc},{r.kc_type},{r.opportunities},{r.opportunities_after_overpractice}\n"
            )
    outputs.append("allocation.csv")
    _write_manifest(out, "metrics", params, [params["input_path"], params["kc_model_path"]], outputs)
    click.echo(f"wrote metrics for {len(breakdowns)} sessions -> {out}")


@cli.command()
@click.option("--run-dir", required=True, type=click.Path(exists=True), help="Directory holding earlier command outputs.")
@_with_common
@click.pass_context
def report(ctx, **params):
    """Consolidate a run directory into report.json, report.txt, figures."""
    params = _apply_config(ctx, params)
    out = params["output_dir"] if params["output_dir"] != "." else params["run_dir"]
    os.makedirs(out, exist_ok=True)
    payload = build_report(params["run_dir"], out_dir=out)
    _write_manifest(out, "report", params, [params["run_dir"]], ["report.json", "report.txt"])
    click.echo(f"report with {len(payload['sections'])} sections -> {out}")


def main(argv=None) -> int:
    """Entry point with documented exit codes: 0 ok, 1 usage, 2 data."""
    try:
        cli.main(args=argv, standalone_mode=False)
    except click.exceptions.Exit as exc:
        return int(exc.exit_code)
    except click.UsageError as exc:
        exc.show(file=sys.stderr)
        return 1
    except click.ClickException as exc:
        exc.show(file=sys.stderr)
        return 1
    except click.Abort:
        return 1
    except TutorkitError as exc:
        click.echo(f"error: {exc}", err=True)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
