"""Figure rendering for learning curves and simulation summaries.

All figures render headless to files; nothing here opens a window.
"""

from __future__ import annotations

from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

# SVG element ids are salted with the object id by default, which makes
# otherwise-identical renders differ byte-for-byte; pin the salt.
matplotlib.rcParams["svg.hashsalt"] = "tutorkit"

from .learncurve import CurvePoint


def plot_learning_curves(
    curves: Mapping[str, Sequence[CurvePoint]],
    path,
    title: str = "Learning curves",
) -> None:
    """One panel per KC: empirical error rate by opportunity, with the
    model-predicted curve overlaid when available."""
    kcs = sorted(kc for kc in curves if curves[kc])
    if not kcs:
        kcs = sorted(curves)
    n = max(len(kcs), 1)
    ncols = min(3, n)
    nrows = (n + ncols - 1) // ncols
    fig, axes = plt.subplots(
        nrows, ncols, figsize=(4.0 * ncols, 3.0 * nrows), squeeze=False
    )
    for ax in axes.ravel()[n:]:
        ax.set_visible(False)
    for i, kc in enumerate(kcs):
        ax = axes.ravel()[i]
        points = curves[kc]
        opps = [p.opportunity for p in points]
        ax.plot(opps, [p.error_rate for p in points], "o-", label="empirical")
        if points and points[0].predicted_error is not None:
            ax.plot(opps, [p.predicted_error for p in points], "s--", label="model")
        ax.set_title(kc)
        ax.set_xlabel("opportunity")
        ax.set_ylabel("error rate")
        ax.set_ylim(-0.02, 1.02)
        ax.legend(fontsize=8)
    fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, metadata=_stable_metadata(path))
    plt.close(fig)


def plot_policy_comparison(aggregates, path) -> None:
    """Grouped bars of mean per-KC opportunities under each policy config."""
    fig, ax = plt.subplots(figsize=(7, 4))
    kcs = sorted(aggregates[0].per_kc_mean_opportunities)
    width = 0.8 / max(len(aggregates), 1)
    for j, agg in enumerate(aggregates):
        xs = [i + j * width for i in range(len(kcs))]
        label = f"{agg.config.selection.value}" + (" +skip" if agg.config.skip_enabled else "")
        ax.bar(xs, [agg.per_kc_mean_opportunities[kc] for kc in kcs], width=width, label=label)
    ax.set_xticks([i + 0.4 - width / 2 for i in range(len(kcs))])
    ax.set_xticklabels(kcs, rotation=45, ha="right")
    ax.set_ylabel("mean opportunities")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, metadata=_stable_metadata(path))
    plt.close(fig)


def _stable_metadata(path) -> dict:
    """Strip volatile metadata so identical runs render identical bytes."""
    name = str(path).lower()
    if name.endswith(".svg"):
        return {"Date": None, "Creator": None}
    if name.endswith(".png"):
        return {"Software": None, "Creation Time": None}
    if name.endswith(".pdf"):
        return {"CreationDate": None, "Producer": None, "Creator": None}
    return {}
