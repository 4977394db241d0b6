"""Consolidated run report: one JSON, one readable summary, figures.

Reads whatever artifacts earlier pipeline commands left in a run
directory (curves, fits, tracing parameters, metrics, simulation
aggregates) and renders them into report.json, report.txt, and figures/.
"""

from __future__ import annotations

import csv
import json
import os
from typing import Optional

from .learncurve import CurvePoint
from .plotting import plot_learning_curves

#: Artifact filenames the pipeline commands write and the report consumes.
ARTIFACTS = {
    "diagnostics": "ingest_diagnostics.json",
    "curves": "curves.csv",
    "flags": "kc_flags.json",
    "afm_fit": "afm_fit.json",
    "condition_effect": "condition_effect.json",
    "knowledge": "knowledge_estimates.json",
    "bkt_params": "bkt_params.json",
    "comparison": "model_comparison.json",
    "simulation": "sim_report.json",
    "policy_comparison": "policy_comparison.json",
    "metrics": "metrics.json",
}


def _load_json(path) -> Optional[dict]:
    if not os.path.exists(path):
        return None
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def _load_curves_csv(path) -> Optional[dict[str, list[CurvePoint]]]:
    if not os.path.exists(path):
        return None
    curves: dict[str, list[CurvePoint]] = {}
    with open(path, "r", encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            predicted = row.get("predicted_error") or ""
            curves.setdefault(row["kc"], []).append(
                CurvePoint(
                    opportunity=int(row["opportunity"]),
                    n_students=int(row["n"]),
                    error_rate=float(row["error_rate"]),
                    predicted_error=float(predicted) if predicted else None,
                )
            )
    return curves


def build_report(run_dir, out_dir: Optional[str] = None) -> dict:
    """Consolidate artifacts under ``run_dir``; write report files there
    (or under ``out_dir``). Returns the consolidated payload."""
    out_dir = out_dir or run_dir
    os.makedirs(out_dir, exist_ok=True)

    # No paths in the payload: identical inputs must give identical bytes
    # regardless of where the run directory lives.
    payload: dict = {"sections": {}}
    curves = _load_curves_csv(os.path.join(run_dir, ARTIFACTS["curves"]))
    if curves is not None:
        payload["sections"]["curves"] = {
            kc: [
                {
                    "opportunity": p.opportunity,
                    "n": p.n_students,
                    "error_rate": p.error_rate,
                    "predicted_error": p.predicted_error,
                }
                for p in points
            ]
            for kc, points in sorted(curves.items())
        }
    for key in (
        "diagnostics",
        "flags",
        "afm_fit",
        "condition_effect",
        "knowledge",
        "bkt_params",
        "comparison",
        "simulation",
        "policy_comparison",
        "metrics",
    ):
        data = _load_json(os.path.join(run_dir, ARTIFACTS[key]))
        if data is not None:
            payload["sections"][key] = data

    report_path = os.path.join(out_dir, "report.json")
    with open(report_path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")

    if curves:
        figures_dir = os.path.join(out_dir, "figures")
        os.makedirs(figures_dir, exist_ok=True)
        plot_learning_curves(curves, os.path.join(figures_dir, "learning_curves.svg"))

    with open(os.path.join(out_dir, "report.txt"), "w", encoding="utf-8") as fh:
        fh.write(_summary_text(payload))
    return payload


def _summary_text(payload: dict) -> str:
    lines = ["run report", "=" * 40]
    sections = payload["sections"]
    if "diagnostics" in sections:
        d = sections["diagnostics"]
        lines.append(
            f"ingest: {d.get('n_transactions', '?')} transactions -> "
            f"{d.get('n_records', '?')} step records "
            f"({d.get('n_dropped_instances', 0)} dropped)"
        )
    if "curves" in sections:
        lines.append(f"curves: {len(sections['curves'])} KCs")
    if "flags" in sections:
        flagged = [kc for kc, flag in sections["flags"].items() if flag != "OK"]
        lines.append(f"flagged KCs: {', '.join(sorted(flagged)) or 'none'}")
    if "afm_fit" in sections:
        fit = sections["afm_fit"]
        lines.append(
            f"opportunity-model fit: logLik={fit['log_lik']:.2f} AIC={fit['aic']:.2f} "
            f"params={fit['n_params']} converged={fit['converged']}"
        )
    if "condition_effect" in sections:
        eff = sections["condition_effect"]
        lines.append(
            f"condition effect: delta={eff['delta']:+.4f} "
            f"(approx SE {eff['std_error_approx']:.4f}; levels {eff['condition_levels']})"
        )
    if "bkt_params" in sections:
        lines.append(f"tracing parameters: {len(sections['bkt_params'])} KCs")
    if "comparison" in sections:
        ranked = sections["comparison"].get("ranked", [])
        if ranked:
            best = ranked[0]
            lines.append(f"best KC model: {best['name']} (AIC {best['aic']:.2f})")
    if "simulation" in sections:
        sim = sections["simulation"]
        lines.append(
            f"simulation: {sim['completed_steps']} steps done, "
            f"{sim['skipped_steps']} skipped, {sim['simulated_seconds']:.0f}s simulated"
        )
    if "policy_comparison" in sections:
        lines.append(f"policy configs compared: {len(sections['policy_comparison'].get('aggregates', []))}")
    if "metrics" in sections:
        m = sections["metrics"]
        lines.append(
            f"metrics: {len(m.get('time_on_task', []))} session breakdowns, "
            f"{len(m.get('opportunity_allocation', []))} allocation rows"
        )
    lines.append("")
    return "\n".join(lines)
