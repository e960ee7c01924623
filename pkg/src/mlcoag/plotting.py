"""Figures for the CLI report paths.  Agg backend; PNG metadata stripped so output is byte-stable."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_META = {"Software": None}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)


def plot_ng_scan(rows, path):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    keys = sorted({(r["N"], r["L"]) for r in rows})
    for N, L in keys:
        sel = sorted((r for r in rows if r["N"] == N and r["L"] == L), key=lambda r: r["T"])
        ax.errorbar([r["T"] for r in sel], [r["mean"] for r in sel], yerr=[r["std_err"] for r in sel],
                    marker="o", capsize=2, label=f"N={N:g}, L={L:g}")
    ax.set_xlabel("T")
    ax.set_ylabel("non-gel mass")
    ax.legend(fontsize=7)
    _save(fig, path)


def plot_size_table(n, values, bounds, path, ylabel="mass"):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.semilogy(n, np.maximum(values, 1e-300), "o-", ms=3, label="value")
    if bounds is not None:
        ax.semilogy(n, bounds, "--", label="bound")
    ax.set_xlabel("n")
    ax.set_ylabel(ylabel)
    ax.legend()
    _save(fig, path)


def plot_histogram(hist, path):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    sizes = [s for s, _ in hist]
    counts = [c for _, c in hist]
    ax.loglog(sizes, counts, "o", ms=3)
    ax.set_xlabel("tree size")
    ax.set_ylabel("count")
    _save(fig, path)


def plot_smol(snapshots, path):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for g in snapshots:
        for x in range(g.rho.shape[0]):
            ax.semilogy(g.masses, np.maximum(g.rho[x], 1e-300), label=f"t={g.T_current:g}, site {x}")
    ax.set_ylim(bottom=1e-12)
    ax.set_xlabel("mass")
    ax.set_ylabel("density")
    ax.legend(fontsize=6)
    _save(fig, path)


def plot_distances(rows, path):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    t = [r["t"] for r in rows]
    ax.plot(t, [r["distance"] for r in rows], "o-", label="with 1/2")
    ax.plot(t, [r["distance_no_half"] for r in rows], "s--", label="without 1/2")
    ax.plot(t, [r["mc_err"] for r in rows], ":", label="MC scale")
    ax.set_yscale("log")
    ax.set_xlabel("t")
    ax.set_ylabel("L1 distance")
    ax.legend()
    _save(fig, path)


def plot_i_lower(table, upper, path):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    T = np.array([a for a, _ in table])
    v = np.array([b for _, b in table])
    ax.semilogx(T, np.maximum(v, -5), label="lower bound on inf I")
    ax.axhline(0, color="k", lw=0.5)
    if upper is not None:
        ax.axvline(upper, ls="--", label=f"upper gel bound {upper:.4g}")
    ax.set_xlabel("T")
    ax.legend()
    _save(fig, path)
