"""Log-log gap plots written as SVG files."""

from __future__ import annotations

import math

import numpy as np
from matplotlib.figure import Figure

from .bounds import apg_ergodic_bounds, apg_last_bound, pg_ergodic_bounds
from .solvers import SolverTrace

# fixed ids and no timestamp so reruns produce identical files
SVG_RC = {"svg.hashsalt": "irebilevel", "svg.fonttype": "none"}


def _positive(ks, vals):
    ks = np.asarray(ks, dtype=float)
    vals = np.abs(np.asarray(vals, dtype=float))
    keep = np.isfinite(vals) & (vals > 0)
    return ks[keep], vals[keep]


def plot_trace(trace: SolverTrace, path, title: str = "") -> None:
    """Absolute raw and ergodic gaps with the matching bounds dashed."""
    import matplotlib

    recs = trace.records
    ks = [r.k for r in recs]
    cfg, ref = trace.config, trace.reference
    with matplotlib.rc_context(SVG_RC):
        fig = Figure(figsize=(9, 4))
        axes = fig.subplots(1, 2)
        series = [
            (axes[0], "raw", [r.phi_gap for r in recs], "C0", "-"),
            (axes[0], "ergodic", [r.erg_phi_gap for r in recs], "C1", "-"),
            (axes[1], "raw", [r.omega_gap for r in recs], "C0", "-"),
            (axes[1], "ergodic", [r.erg_omega_gap for r in recs], "C1", "-"),
        ]
        for ax, label, vals, color, ls in series:
            x, y = _positive(ks, vals)
            if len(x):
                ax.loglog(x, y, ls, color=color, label=label, lw=1.2)
        if ref is not None:
            r0sq = float(((trace.x0 - ref.x_star) ** 2).sum())
            args = (cfg.beta, r0sq, ref.delta_omega, trace.L1, trace.L2, cfg.step_rule)
            if cfg.algorithm == "ire-pg":
                b = np.array([pg_ergodic_bounds(k, *args) for k in ks])
                axes[0].loglog(ks, b[:, 1], "--", color="C1", lw=1, label="ergodic bound")
                axes[1].loglog(ks, b[:, 0], "--", color="C1", lw=1, label="ergodic bound")
            else:
                b = np.array([apg_ergodic_bounds(k, *args) for k in ks])
                last = [apg_last_bound(k, *args) for k in ks]
                axes[0].loglog(ks, last, "--", color="C0", lw=1, label="last-iterate bound")
                axes[0].loglog(ks, b[:, 1], "--", color="C1", lw=1, label="ergodic bound")
                axes[1].loglog(ks, b[:, 0], "--", color="C1", lw=1, label="ergodic bound")
        axes[0].set_title("|inner gap|")
        axes[1].set_title("|outer gap|")
        for ax in axes:
            ax.set_xlabel("k")
            ax.grid(True, which="major", alpha=0.3)
            if ax.lines:
                ax.legend(fontsize=7, frameon=False)
        if title:
            fig.suptitle(title, fontsize=10)
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})


def plot_sweep(rows, path, key: str, value: str, title: str = "") -> None:
    """One marker line per group: ``value`` against ``key`` on log axes.

    ``rows`` are dicts holding ``key``, ``value`` and ``group``.
    """
    import matplotlib

    groups = {}
    for r in rows:
        groups.setdefault(r["group"], []).append((r[key], r[value]))
    with matplotlib.rc_context(SVG_RC):
        fig = Figure(figsize=(5, 4))
        ax = fig.subplots()
        for i, (g, pts) in enumerate(sorted(groups.items())):
            pts = sorted(p for p in pts if math.isfinite(p[1]) and p[1] > 0)
            if pts:
                ax.semilogy([p[0] for p in pts], [p[1] for p in pts], "o-",
                            color=f"C{i % 10}", label=g, lw=1)
        ax.set_xlabel(key)
        ax.set_ylabel(value)
        if title:
            ax.set_title(title, fontsize=10)
        if ax.lines:
            ax.legend(fontsize=7, frameon=False)
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
