"""Report figures rendered to PNG next to the CSV output.

Every function takes plain report rows (dicts with ``rho``, ``K``,
``variant``, ``seed``, ``recall``, ``ndcg`` and optional grid columns) and
writes one file. The Agg backend is forced so no display is needed.
"""

from __future__ import annotations

import math
from collections import defaultdict

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "figure.figsize": (5.0, 3.4),
    "figure.dpi": 100,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.frameon": False,
    "font.size": 9,
}
COLORS = {"backbone": "#4d4d4d", "rdiffbr": "#1f77b4", "rdiffbr_wo_r": "#ff7f0e"}
LABELS = {"backbone": "backbone", "rdiffbr": "+RDiffBR", "rdiffbr_wo_r": "+RDiffBR w/o R"}
# no version or date stamps, so reruns give identical bytes
_PNG_META = {"Software": None}


def _mean_by(rows, keys, metric):
    acc = defaultdict(list)
    for r in rows:
        acc[tuple(r[k] for k in keys)].append(r[metric])
    return {k: math.fsum(v) / len(v) for k, v in acc.items()}


def _save(fig, path) -> None:
    fig.tight_layout()
    fig.savefig(path, format="png", metadata=_PNG_META)
    plt.close(fig)


def plot_rho_curves(rows, path, metric: str = "recall", K: int = 20, title: str | None = None) -> None:
    """Seed-averaged ``metric@K`` against rho, one line per variant."""
    rows = [r for r in rows if r["K"] == K]
    if not rows:
        raise ValueError(f"no rows with K={K}")
    means = _mean_by(rows, ("variant", "rho"), metric)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for variant in [v for v in COLORS if any(k[0] == v for k in means)]:
            pts = sorted((rho, m) for (v, rho), m in means.items() if v == variant)
            ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", ms=3,
                    color=COLORS[variant], label=LABELS[variant])
        ax.axvline(0, color="k", lw=0.6, alpha=0.5)
        ax.set_xlabel(r"variation level $\rho$")
        ax.set_ylabel(f"{metric.capitalize()}@{K}")
        if title:
            ax.set_title(title)
        ax.legend()
        _save(fig, path)


def plot_sensitivity(rows, key: str, path, metric: str = "recall", K: int = 20) -> None:
    """Seed-averaged ``metric@K`` of the full model against one grid key,
    one line per rho."""
    rows = [r for r in rows if r["K"] == K and r["variant"] == "rdiffbr" and key in r]
    if not rows:
        raise ValueError(f"no rdiffbr rows carrying grid key {key!r}")
    means = _mean_by(rows, ("rho", key), metric)
    rhos = sorted({k[0] for k in means})
    cmap = plt.get_cmap("coolwarm")
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for j, rho in enumerate(rhos):
            pts = sorted((x, m) for (r, x), m in means.items() if r == rho)
            xs = [p[0] for p in pts]
            ax.plot(range(len(xs)), [p[1] for p in pts], marker="o", ms=3,
                    color=cmap(j / max(len(rhos) - 1, 1)), label=rf"$\rho$={rho}")
            ax.set_xticks(range(len(xs)), [str(x) for x in xs])
        ax.set_xlabel(key)
        ax.set_ylabel(f"{metric.capitalize()}@{K}")
        ax.legend(ncol=2, fontsize=7)
        _save(fig, path)


def plot_ablation(rows, path, metric: str = "recall", K: int = 20) -> None:
    """Grouped bars: one group per rho, one bar per variant."""
    rows = [r for r in rows if r["K"] == K]
    if not rows:
        raise ValueError(f"no rows with K={K}")
    means = _mean_by(rows, ("rho", "variant"), metric)
    rhos = sorted({k[0] for k in means})
    variants = [v for v in COLORS if any(k[1] == v for k in means)]
    width = 0.8 / len(variants)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for j, v in enumerate(variants):
            xs = [i + (j - (len(variants) - 1) / 2) * width for i in range(len(rhos))]
            ax.bar(xs, [means.get((rho, v), float("nan")) for rho in rhos], width,
                   color=COLORS[v], label=LABELS[v])
        ax.set_xticks(range(len(rhos)), [rf"$\rho$={r}" for r in rhos])
        ax.set_ylabel(f"{metric.capitalize()}@{K}")
        lo = min(means.values())
        ax.set_ylim(max(0.0, lo - 0.05), None)
        ax.legend()
        _save(fig, path)


def plot_loss_curve(history, path) -> None:
    """Per-epoch BR, diffusion and total loss."""
    if not history:
        raise ValueError("empty training history")
    ep = [h.epoch for h in history]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(ep, [h.loss_total for h in history], label="total")
        ax.plot(ep, [h.loss_br for h in history], label="BR", ls="--")
        if any(h.loss_diff for h in history):
            ax.plot(ep, [h.loss_diff for h in history], label="diffusion", ls=":")
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        ax.legend()
        _save(fig, path)
