"""Evaluation, semantic-structure scoring, and machine-readable outputs.

metrics.csv carries one row per round (round 0 is the pre-training
evaluation), all reals printed with 17 significant digits so reruns are
byte-comparable. summary.json reports the highest mean local accuracy over
all rounds, matching how results are quoted.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import MetricError
from .models import ModelParams, classifier_logits, forward_features
from .numerics import cosine_similarity_matrix


@dataclass
class RoundMetrics:
    round_index: int
    per_client_top1: list[float]
    per_client_top5: list[float]
    mean_local_top1: float
    mean_local_top5: float
    global_top1: float
    server_loss: float
    mean_client_loss: float
    uplink_floats: int
    downlink_floats: int


@dataclass
class SimilarityReport:
    matrix: np.ndarray
    within_mean: float
    across_mean: float
    gap: float


@dataclass
class RunResult:
    config_dict: dict
    history: list[RoundMetrics]
    models: list[ModelParams]
    class_names: list[str]
    hierarchy: list[int] | None
    broadcast_prototypes: np.ndarray | None = None
    image_prototypes: np.ndarray | None = None
    image_mask: np.ndarray | None = None
    personalization: dict | None = None
    extras: dict = field(default_factory=dict)

    @property
    def best_mean_local_top1(self) -> float:
        return max(m.mean_local_top1 for m in self.history)

    @property
    def best_round(self) -> int:
        best = self.best_mean_local_top1
        for m in self.history:
            if m.mean_local_top1 == best:
                return m.round_index
        return 0


def top_k_accuracy(logits: np.ndarray, labels: np.ndarray, k: int) -> float:
    """Fraction of rows whose label is among the k largest logits.

    Ties break toward the lower class index (stable sort on descending logit).
    """
    if logits.shape[0] == 0:
        raise MetricError("cannot evaluate an empty batch")
    k = min(k, logits.shape[1])
    order = np.argsort(-logits, axis=1, kind="stable")
    hits = (order[:, :k] == labels[:, None]).any(axis=1)
    return float(hits.mean())


def evaluate_client(
    model: ModelParams, inputs: np.ndarray, labels: np.ndarray, k: int = 5
) -> tuple[float, float]:
    """(top-1, top-k) accuracy of one model on one labeled set."""
    if inputs.shape[0] == 0:
        raise MetricError("cannot evaluate an empty test split")
    feats = forward_features(model, inputs)
    model._cache = None
    logits = classifier_logits(model, feats)
    return top_k_accuracy(logits, labels, 1), top_k_accuracy(logits, labels, k)


def semantic_structure_score(
    prototypes: np.ndarray, hierarchy: list[int] | None
) -> SimilarityReport:
    """Cosine matrix plus the within-vs-across supercluster similarity gap."""
    if hierarchy is None:
        raise MetricError("semantic structure score needs a class hierarchy")
    groups = np.asarray(hierarchy)
    if len(set(hierarchy)) < 2:
        raise MetricError("semantic structure score needs >= 2 superclusters")
    sim = cosine_similarity_matrix(prototypes)
    c = sim.shape[0]
    within, across = [], []
    for i in range(c):
        for j in range(i + 1, c):
            (within if groups[i] == groups[j] else across).append(sim[i, j])
    within_mean = float(np.mean(within)) if within else float("nan")
    across_mean = float(np.mean(across)) if across else float("nan")
    return SimilarityReport(sim, within_mean, across_mean, within_mean - across_mean)


# --- file outputs ------------------------------------------------------------


def _fmt(x: float) -> str:
    return f"{x:.17g}"


def metrics_csv_text(history: list[RoundMetrics]) -> str:
    num_clients = len(history[0].per_client_top1)
    columns = [
        "round",
        "mean_local_top1",
        "mean_local_top5",
        "global_top1",
        "server_loss",
        "mean_client_loss",
        "uplink_floats",
        "downlink_floats",
        *[f"client{i}_top1" for i in range(num_clients)],
    ]
    lines = [",".join(columns)]
    for m in history:
        row = [
            str(m.round_index),
            _fmt(m.mean_local_top1),
            _fmt(m.mean_local_top5),
            _fmt(m.global_top1),
            _fmt(m.server_loss),
            _fmt(m.mean_client_loss),
            str(m.uplink_floats),
            str(m.downlink_floats),
            *[_fmt(v) for v in m.per_client_top1],
        ]
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"


def _json_safe(x):
    if isinstance(x, float) and math.isnan(x):
        return None
    return x


def write_outputs(result: RunResult, out_dir: str | Path) -> dict[str, Path]:
    """Emit metrics.csv, summary.json, similarity_{method}.json, config_echo.json."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise MetricError(f"cannot create output directory {out}: {exc}") from exc
    written: dict[str, Path] = {}

    csv_path = out / "metrics.csv"
    csv_path.write_text(metrics_csv_text(result.history), encoding="utf-8")
    written["metrics"] = csv_path

    method = result.config_dict.get("method", "unknown")
    gaps: dict[str, float | None] = {}
    sim_payload = None
    if result.broadcast_prototypes is not None and result.hierarchy is not None:
        report = semantic_structure_score(result.broadcast_prototypes, result.hierarchy)
        gaps["broadcast_gap"] = report.gap
        sim_payload = {
            "method": method,
            "class_names": result.class_names,
            "matrix": report.matrix.tolist(),
            "within_mean": report.within_mean,
            "across_mean": report.across_mean,
            "gap": report.gap,
        }
    if (
        result.image_prototypes is not None
        and result.hierarchy is not None
        and result.image_mask is not None
        and bool(result.image_mask.all())
    ):
        gaps["image_gap"] = semantic_structure_score(
            result.image_prototypes, result.hierarchy
        ).gap

    summary = {
        "method": method,
        "mode": result.config_dict.get("mode"),
        "rounds": len(result.history) - 1,
        "best_mean_local_top1": result.best_mean_local_top1,
        "best_round": result.best_round,
        "final_gaps": {k: _json_safe(v) for k, v in gaps.items()} or None,
        "uplink_floats_total": int(sum(m.uplink_floats for m in result.history)),
        "downlink_floats_total": int(sum(m.downlink_floats for m in result.history)),
        "personalization": result.personalization,
    }
    summary_path = out / "summary.json"
    summary_path.write_text(json.dumps(summary, indent=2), encoding="utf-8")
    written["summary"] = summary_path

    if sim_payload is not None:
        sim_path = out / f"similarity_{method}.json"
        sim_path.write_text(json.dumps(sim_payload, indent=2), encoding="utf-8")
        written["similarity"] = sim_path

    echo_path = out / "config_echo.json"
    echo_path.write_text(json.dumps(result.config_dict, indent=2), encoding="utf-8")
    written["config_echo"] = echo_path
    return written
