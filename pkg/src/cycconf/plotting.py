"""PNG figures written next to the CSV/JSON outputs of the CLI."""

from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# no software/version stamp, so identical inputs give identical bytes
_META = {"Software": None}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)


def plot_loss_trace(rows, path):
    """``rows`` as returned by ``trainer.read_trace``."""
    it = [r["iteration"] for r in rows]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(it, [r["det_total"] for r in rows], lw=0.8, label="detection")
    ax.plot(it, [r["total"] for r in rows], lw=0.8, label="total")
    if any(r["ssl"] for r in rows):
        ax.plot(it, [r["ssl"] for r in rows], lw=0.8, label="auxiliary")
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(frameon=False)
    _save(fig, path)


def plot_ood_report(report, metrics, path):
    """Grouped bars: in-domain vs out-of-domain for each metric (undefined metrics omitted)."""
    ind = report["in_domain"]["metrics"]
    ood = report["out_of_domain"]["metrics"]
    names = [m for m in metrics if ind[m] is not None and ood[m] is not None]
    x = np.arange(len(names))
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.bar(x - 0.2, [100 * ind[m] for m in names], 0.4, label="in-domain")
    ax.bar(x + 0.2, [100 * ood[m] for m in names], 0.4, label="out-of-domain")
    ax.set_xticks(x, names)
    ax.set_ylabel("AP (x100)")
    ax.legend(frameon=False)
    _save(fig, path)


def plot_match_heatmap(alpha, path, title=""):
    alpha = np.asarray(alpha)
    fig, ax = plt.subplots(figsize=(1.5 + 0.35 * alpha.shape[1], 1.2 + 0.35 * alpha.shape[0]))
    im = ax.imshow(alpha, vmin=0.0, vmax=1.0, cmap="viridis")
    ax.set_xlabel("t1 instance")
    ax.set_ylabel("t0 instance")
    if title:
        ax.set_title(title, fontsize=9)
    fig.colorbar(im, ax=ax, fraction=0.05)
    _save(fig, path)


def plot_entropy_summary(entropies, path):
    vals = [e for e in entropies if not math.isnan(e)]
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.hist(vals, bins=max(5, min(30, len(vals))), color="tab:purple")
    ax.set_xlabel("forward matching entropy")
    ax.set_ylabel("pairs")
    _save(fig, path)
