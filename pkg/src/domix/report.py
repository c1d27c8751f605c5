"""Matplotlib figure rendering for training and inspection outputs."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def save_loss_curve(metrics: list[dict], path):
    steps = [m["step"] for m in metrics]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(steps, [m["L_total"] for m in metrics], label="total", lw=1.2)
    ax.plot(steps, [m["L_gen"] for m in metrics], label="generation", lw=0.9)
    if any(m["L_mix"] for m in metrics):
        ax.plot(steps, [m["L_mix"] for m in metrics], label="domain", lw=0.9)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_proportion_heatmap(layer_rows: np.ndarray, tokens: list[str], path,
                            title: str = ""):
    """Grid of per-layer, per-token values in [0, 1].

    For two domains the cell value is the second domain's proportion
    (light = first domain, dark = second); otherwise it is the max entry.
    """
    n_layers, n_tokens = layer_rows.shape
    fig, ax = plt.subplots(figsize=(max(4, 0.6 * n_tokens), 1.0 + 0.5 * n_layers))
    im = ax.imshow(layer_rows, cmap="gray_r", vmin=0.0, vmax=1.0, aspect="auto")
    ax.set_xticks(range(n_tokens))
    ax.set_xticklabels(tokens, rotation=45, ha="right", fontsize=8)
    ax.set_yticks(range(n_layers))
    ax.set_yticklabels([f"layer {i}" for i in range(n_layers)], fontsize=8)
    if title:
        ax.set_title(title, fontsize=9)
    fig.colorbar(im, ax=ax, fraction=0.03)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_histograms(per_layer: dict[int, np.ndarray], edges: np.ndarray, path,
                    title: str = ""):
    """One histogram panel per layer of max-proportion values."""
    layers = sorted(per_layer)
    fig, axes = plt.subplots(1, len(layers), figsize=(2.4 * len(layers), 2.4),
                             squeeze=False, sharey=True)
    for ax, layer in zip(axes[0], layers):
        counts = per_layer[layer]
        ax.bar(edges[:-1], counts, width=np.diff(edges), align="edge")
        ax.set_title(f"layer {layer}", fontsize=9)
        ax.set_xlabel("max proportion", fontsize=8)
    axes[0][0].set_ylabel("count", fontsize=8)
    if title:
        fig.suptitle(title, fontsize=10)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_score_bars(report: dict, path):
    domains = [str(row["domain"]) for row in report["per_domain"]]
    bleu = [row["bleu"] for row in report["per_domain"]]
    fig, ax = plt.subplots(figsize=(1.2 + 0.8 * len(domains), 3.5))
    ax.bar(domains, bleu)
    ax.axhline(report["overall"]["bleu"], color="k", ls="--", lw=0.8, label="overall")
    ax.set_xlabel("domain")
    ax.set_ylabel("BLEU")
    ax.set_ylim(0, 105)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
