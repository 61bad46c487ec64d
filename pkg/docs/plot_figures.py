"""Plot the CSV bundles written by ``raisor replicate-figure``.

Example::

    raisor replicate-figure fig1 --seed 1 --scale 0.2 --out figs/
    python docs/plot_figures.py figs/

Needs matplotlib, which the package itself does not depend on.
"""

import sys
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from raisor.io import read_table_csv  # noqa: E402


def _by(rows, key):
    groups = {}
    for r in rows:
        groups.setdefault(r[key], []).append(r)
    return groups


def plot_ress(path, ax, title):
    rows = read_table_csv(path)
    for rep in _by(rows, "replicate").values():
        ax.plot([r["n"] for r in rep], [r["ress"] for r in rep], color="0.4", lw=0.6, alpha=0.6)
    first = next(iter(_by(rows, "replicate").values()))
    ax.plot([r["n"] for r in first], [r["u1_bound"] for r in first], "r--", lw=1, label="u1 bound")
    ax.set(xscale="log", ylim=(0, 1.05), xlabel="n", ylabel="RESS", title=title)
    ax.legend()


def plot_fig3(path, ax):
    rows = read_table_csv(path)
    for method, recs in _by(rows, "method").items():
        ax.plot([r["n"] for r in recs], [r["n_evals"] for r in recs], "o-", label=method)
    ax.set(xscale="log", yscale="log", xlabel="n", ylabel="likelihood terms evaluated")
    ax.legend()


def plot_fig4(trace_path, phi_path, axes):
    trace = read_table_csv(trace_path)
    ax = axes[0]
    ax.plot([r["n"] for r in trace], [r["ress"] for r in trace], lw=0.8)
    rep = [r for r in trace if r["event"] == "replenish"]
    ax.plot([r["n"] for r in rep], [r["ress"] for r in rep], "k.", ms=3)
    ax.axhline(0.1, color="r", ls="--", lw=0.8)
    ax.set(xscale="log", ylim=(0, 1.05), xlabel="n", ylabel="RESS")
    phi = read_table_csv(phi_path)
    ax = axes[1]
    n = [r["n"] for r in phi]
    ax.fill_between(n, [r["phi_lower"] for r in phi], [r["phi_upper"] for r in phi], alpha=0.3)
    ax.plot(n, [r["phi_mean"] for r in phi])
    ax.axhline(phi[0]["phi_true"], color="r", ls="--", lw=0.8)
    ax.set(xscale="log", xlabel="n", ylabel="phi")


def main(folder):
    folder = Path(folder)
    done = []
    if (folder / "fig1_ress.csv").is_file():
        fig, ax = plt.subplots(figsize=(6, 4))
        plot_ress(folder / "fig1_ress.csv", ax, "no replenishment")
        done.append(("fig1.png", fig))
    if (folder / "fig2_ress.csv").is_file():
        fig, ax = plt.subplots(figsize=(6, 4))
        plot_ress(folder / "fig2_ress.csv", ax, "replenished at n^{0, 1/3, 2/3}")
        done.append(("fig2.png", fig))
    if (folder / "fig3_quality.csv").is_file():
        fig, ax = plt.subplots(figsize=(6, 4))
        plot_fig3(folder / "fig3_quality.csv", ax)
        done.append(("fig3.png", fig))
    if (folder / "fig4_trace.csv").is_file():
        fig, axes = plt.subplots(1, 2, figsize=(10, 4))
        plot_fig4(folder / "fig4_trace.csv", folder / "fig4_phi.csv", axes)
        done.append(("fig4.png", fig))
    for name, fig in done:
        fig.tight_layout()
        fig.savefig(folder / name, dpi=150)
        print(folder / name)


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else ".")
