"""Figure rendering for experiment outputs.

Renders accuracy/loss curves and the prototype cosine-similarity heatmap
(the structure picture the broadcast bank is supposed to preserve) as PNGs
next to metrics.csv. Uses the Agg backend; safe headless.
"""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .metrics import RunResult, semantic_structure_score


def render_figures(result: RunResult, out_dir: str | Path) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    rounds = [m.round_index for m in result.history]
    method = result.config_dict.get("method", "run")

    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(rounds, [m.mean_local_top1 for m in result.history], label="mean local top-1")
    ax.plot(rounds, [m.mean_local_top5 for m in result.history], label="mean local top-5")
    if not all(math.isnan(m.global_top1) for m in result.history):
        ax.plot(rounds, [m.global_top1 for m in result.history], label="global top-1")
    ax.set_xlabel("round")
    ax.set_ylabel("accuracy")
    ax.set_ylim(0.0, 1.02)
    ax.set_title(f"{method}: accuracy per round")
    ax.legend()
    fig.tight_layout()
    path = out / "accuracy.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    written.append(path)

    server = [m.server_loss for m in result.history]
    client = [m.mean_client_loss for m in result.history]
    if not (all(math.isnan(v) for v in server) and all(math.isnan(v) for v in client)):
        fig, ax = plt.subplots(figsize=(6, 4))
        if not all(math.isnan(v) for v in client):
            ax.plot(rounds, client, label="mean client loss")
        if not all(math.isnan(v) for v in server):
            ax.plot(rounds, server, label="server loss")
        ax.set_xlabel("round")
        ax.set_ylabel("loss")
        ax.set_title(f"{method}: losses per round")
        ax.legend()
        fig.tight_layout()
        path = out / "losses.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)

    if result.broadcast_prototypes is not None and result.hierarchy is not None:
        report = semantic_structure_score(result.broadcast_prototypes, result.hierarchy)
        order = np.argsort(np.asarray(result.hierarchy), kind="stable")
        sim = report.matrix[np.ix_(order, order)]
        names = [result.class_names[i] for i in order]
        fig, ax = plt.subplots(figsize=(5.5, 4.5))
        im = ax.imshow(sim, vmin=-1.0, vmax=1.0, cmap="RdBu_r")
        ax.set_xticks(range(len(names)), names, rotation=45, ha="right", fontsize=7)
        ax.set_yticks(range(len(names)), names, fontsize=7)
        ax.set_title(
            f"{method}: prototype cosines (gap {report.gap:+.3f})", fontsize=10
        )
        fig.colorbar(im, ax=ax, shrink=0.85)
        fig.tight_layout()
        path = out / f"similarity_{method}.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)
    return written
