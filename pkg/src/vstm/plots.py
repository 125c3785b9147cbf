"""Figure rendering for the CLI report paths.

Every function takes prepared data plus an output path and writes one PNG;
nothing here computes statistics. Headless backend, no display required.
"""

from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

_DPI = 130


def _save(fig, path):
    fig.savefig(path, dpi=_DPI, bbox_inches="tight")
    plt.close(fig)


def elbo_trace(trace, every: int, path) -> None:
    trace = np.asarray(trace, dtype=float)
    fig, ax = plt.subplots(figsize=(6.5, 3.5))
    steps = (np.arange(len(trace)) + 1) * every
    ax.plot(steps, trace, lw=1.0, color="#1f5fa8")
    ax.set_xlabel("step")
    ax.set_ylabel("ELBO (minibatch estimate)")
    ax.grid(alpha=0.3)
    _save(fig, path)


def model_selection(rows: list[dict], path) -> None:
    """One panel per criterion over the K sweep: held-out perplexity, and the
    coherence/exclusivity trade-off with one point per K."""
    ks = [r["k"] for r in rows]
    fig, axes = plt.subplots(1, 2, figsize=(9.5, 3.8))
    perp = [r["perplexity_mean"] for r in rows]
    sd = [r.get("perplexity_sd", 0.0) for r in rows]
    axes[0].errorbar(ks, perp, yerr=sd, marker="o", color="#1f5fa8", capsize=3)
    axes[0].set_xlabel("K")
    axes[0].set_ylabel("held-out perplexity")
    axes[0].set_xticks(ks)
    axes[0].grid(alpha=0.3)
    for r in rows:
        if r.get("coherence_mean") is None or r.get("exclusivity_mean") is None:
            continue
        axes[1].scatter(r["exclusivity_mean"], r["coherence_mean"], s=40, color="#b0413e")
        axes[1].annotate(f"K={r['k']}", (r["exclusivity_mean"], r["coherence_mean"]),
                         textcoords="offset points", xytext=(6, 4), fontsize=9)
    axes[1].set_xlabel("mean exclusivity")
    axes[1].set_ylabel("mean coherence")
    axes[1].grid(alpha=0.3)
    _save(fig, path)


def predicted_proportions(predictions, path) -> None:
    """Grouped bars, one group per profile, error bars at 2 MC standard
    errors."""
    k = len(predictions[0].mean)
    width = 0.8 / max(len(predictions), 1)
    fig, ax = plt.subplots(figsize=(1.2 + 0.9 * k, 3.8))
    xs = np.arange(k)
    for i, p in enumerate(predictions):
        ax.bar(xs + i * width, p.mean, width=width, yerr=2 * np.asarray(p.mc_se),
               label=p.profile, capsize=2)
    ax.set_xticks(xs + width * (len(predictions) - 1) / 2)
    ax.set_xticklabels([f"topic {j}" for j in range(k)], rotation=45, ha="right")
    ax.set_ylabel("expected proportion")
    ax.legend(fontsize=8)
    _save(fig, path)


def topic_graph(graph, path) -> None:
    """Nodes on a circle, edge width proportional to correlation, color by
    community."""
    m = len(graph.nodes)
    fig, ax = plt.subplots(figsize=(5.5, 5.5))
    if m:
        ang = 2 * math.pi * np.arange(m) / m
        xy = np.column_stack([np.cos(ang), np.sin(ang)])
        wmax = max((w for _, _, w in graph.edges), default=1.0)
        for i, j, w in graph.edges:
            ax.plot(xy[[i, j], 0], xy[[i, j], 1], color="#777777",
                    lw=0.5 + 2.5 * w / wmax, alpha=0.7, zorder=1)
        cmap = plt.get_cmap("tab10")
        colors = [cmap(c % 10) for c in graph.communities]
        ax.scatter(xy[:, 0], xy[:, 1], s=350, c=colors, zorder=2, edgecolors="black")
        for i, label in enumerate(graph.labels):
            ax.annotate(label.replace("topic_", ""), xy[i], ha="center", va="center",
                        fontsize=9, zorder=3)
    ax.set_aspect("equal")
    ax.axis("off")
    _save(fig, path)


def pca_scores(scores, share: float, path) -> None:
    scores = np.asarray(scores, dtype=float)
    fig, ax = plt.subplots(figsize=(6.5, 3.2))
    ax.hist(scores, bins=min(40, max(10, scores.size // 20)), color="#1f5fa8", alpha=0.85)
    ax.set_xlabel(f"first principal score ({100 * share:.1f}% of membership variance)")
    ax.set_ylabel("images")
    ax.grid(alpha=0.3)
    _save(fig, path)


def intrusion_summary(predictions, path) -> None:
    """Posterior mean correctness per model with 95% intervals; chance rate
    marked at 0.25."""
    fig, ax = plt.subplots(figsize=(1.0 + 1.3 * len(predictions), 3.8))
    for i, p in enumerate(predictions):
        ax.errorbar([i], [p.mean],
                    yerr=[[p.mean - p.interval95[0]], [p.interval95[1] - p.mean]],
                    fmt="o", color="#1f5fa8", capsize=4)
    ax.axhline(0.25, color="#b0413e", ls="--", lw=1, label="chance")
    ax.set_xticks(range(len(predictions)))
    ax.set_xticklabels([p.model for p in predictions], rotation=30, ha="right")
    ax.set_ylabel("P(correct)")
    ax.set_ylim(0, 1)
    ax.legend(fontsize=8)
    _save(fig, path)
