"""PNG figures written next to the CSV / JSONL outputs.

Everything renders through the non-interactive Agg backend; callers pass the
same arrays that go into the delimited files, so a figure never shows data
the text output does not contain.
"""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import matplotlib.tri as mtri  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.dpi": 100,
    "savefig.dpi": 120,
    "font.size": 9,
    "axes.titlesize": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
}

# no version stamp, so re-rendered files stay byte-identical
_PNG_META = {"Software": None}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, metadata=_PNG_META)
    plt.close(fig)
    return path


def training_curves(records, path, title=None):
    """Total loss and per-channel beta against step for one seed."""
    steps = np.array([r["step"] for r in records])
    with plt.rc_context(STYLE):
        fig, (ax_l, ax_b) = plt.subplots(1, 2, figsize=(8, 3))
        ax_l.plot(steps, [r["total"] for r in records], lw=1, label="total")
        ax_l.plot(steps, [r["ce"] for r in records], lw=1, label="ce")
        ax_l.set_xlabel("step")
        ax_l.set_ylabel("loss")
        ax_l.legend(frameon=False)
        names = list(records[0]["beta"]) if records else []
        for name in names:
            ax_b.plot(steps, [r["beta"][name] for r in records], lw=1, label=name)
        ax_b.set_xlabel("step")
        ax_b.set_ylabel("beta")
        if names:
            ax_b.set_yscale("log")
            ax_b.legend(frameon=False)
        if title:
            fig.suptitle(title)
        return _save(fig, path)


def entropy_vs_beta(records, path, channel=None):
    """Student entropy and channel beta on twin axes."""
    steps = np.array([r["step"] for r in records])
    name = channel or (next(iter(records[0]["beta"])) if records else None)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3))
        ax.plot(steps, [r["student_entropy"] for r in records], lw=1, color="C0")
        ax.set_xlabel("step")
        ax.set_ylabel("student entropy", color="C0")
        if name is not None:
            ax2 = ax.twinx()
            ax2.plot(steps, [r["beta"][name] for r in records], lw=1, color="C3")
            ax2.set_ylabel(f"beta ({name})", color="C3")
        return _save(fig, path)


def simplex_triangle(points, values, anchor, path, title=None):
    """Filled contour of an energy over the 2-simplex."""
    points = np.asarray(points)
    # barycentric -> cartesian on an equilateral triangle
    x = points[:, 1] + 0.5 * points[:, 2]
    y = (np.sqrt(3.0) / 2.0) * points[:, 2]
    vals = np.asarray(values, dtype=np.float64)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4, 3.6))
        tri = mtri.Triangulation(x, y)
        # the clamped edges of the simplex would otherwise flatten the interior
        top = float(np.quantile(vals, 0.95))
        levels = np.linspace(float(vals.min()), top if top > vals.min() else vals.max() + 1e-12, 24)
        cs = ax.tricontourf(tri, np.minimum(vals, levels[-1]), levels=levels, cmap="viridis", extend="max")
        fig.colorbar(cs, ax=ax, shrink=0.8)
        ax.plot([0, 1, 0.5, 0], [0, 0, np.sqrt(3.0) / 2.0, 0], color="k", lw=0.8)
        ax.plot(anchor[1] + 0.5 * anchor[2], (np.sqrt(3.0) / 2.0) * anchor[2], "r*", ms=9)
        ax.set_aspect("equal")
        ax.axis("off")
        if title:
            ax.set_title(title)
        return _save(fig, path)


def sweep_bars(rows, path, value="eval_ce_mean", error="eval_ce_std"):
    """Grouped bars: one group per method, one bar per strategy."""
    methods = list(dict.fromkeys(r["method"] for r in rows))
    strategies = list(dict.fromkeys(r["strategy"] for r in rows))
    width = 0.8 / max(len(strategies), 1)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(6, 0.9 * len(methods)), 3.2))
        base = np.arange(len(methods))
        for j, strat in enumerate(strategies):
            vals, errs = [], []
            for m in methods:
                row = next((r for r in rows if r["method"] == m and r["strategy"] == strat), None)
                ok = row is not None and row.get(value) not in (None, "")
                vals.append(float(row[value]) if ok else np.nan)
                errs.append(float(row[error]) if ok else 0.0)
            ax.bar(base + (j - (len(strategies) - 1) / 2) * width, vals, width, yerr=errs, label=strat,
                   capsize=1.5)
        ax.set_xticks(base)
        ax.set_xticklabels(methods, rotation=30, ha="right")
        ax.set_ylabel(value)
        finite = [float(r[value]) for r in rows if r.get(value) not in (None, "")]
        if finite:
            lo, hi = min(finite), max(finite)
            pad = 0.1 * (hi - lo) + 1e-3
            ax.set_ylim(lo - pad, hi + pad)
        ax.legend(frameon=False, ncol=len(strategies))
        return _save(fig, path)
