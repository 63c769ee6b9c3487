"""Prototype-baseline methods sharing the protocol round loop.

These are lite reconstructions: FedTGP's adaptive-margin contrastive
training is simplified to a pull-plus-hinge objective, and AlignFed's decay
schedule is linear between its published endpoints. Both keep the property
the comparisons need -- baselines separate classes pairwise, the text-prompt
method preserves semantic structure. FedProto, FedTGP, and AlignFed align
clients with squared distance; only the text-prompt method uses the
contrastive term.
"""

from __future__ import annotations

import numpy as np

from .config import ExperimentConfig
from .data import ClientDataset, Dataset
from .errors import ConfigError
from .metrics import RunResult
from .models import ModelParams
from .protocol import LocalOnlyStrategy, PrototypeBank, run_protocol
from .rng import RngStream


def run_local_only(
    config: ExperimentConfig,
    clients: list[ClientDataset],
    models: list[ModelParams],
    holdout: Dataset | None,
    hierarchy: list[int] | None = None,
    class_names: list[str] | None = None,
) -> RunResult:
    """T * E_c epochs of isolated cross-entropy training; zero communication."""
    return run_protocol(
        config, clients, models, holdout, LocalOnlyStrategy(config), hierarchy, class_names
    )


class FedProtoStrategy:
    """Broadcast the aggregated image prototypes themselves; L2 client pull."""

    alignment = "l2"
    needs_uplink = True

    def __init__(self, config: ExperimentConfig):
        self.config = config
        self.final_matrix: np.ndarray | None = None

    def round_update(self, bank: PrototypeBank, round_index: int):
        self.final_matrix = bank.matrix.copy()
        return bank.matrix.copy(), bank.mask.copy(), float("nan")

    def lambda_at(self, round_index: int) -> float:
        return self.config.resolved_lambda

    def finalize(self, result: RunResult) -> None:
        result.broadcast_prototypes = self.final_matrix


def fedtgp_objective(
    prototypes: np.ndarray,
    targets: np.ndarray,
    present: np.ndarray,
    margin: float,
) -> tuple[float, np.ndarray]:
    """Pull-to-center plus hinge separation, with its exact gradient.

    J = sum_{c in present} ||T_c - target_c||^2
        + sum_{c != j in present} max(0, margin - ||T_c - T_j||)^2

    Pairs farther apart than the margin contribute nothing.
    """
    grad = np.zeros_like(prototypes)
    loss = 0.0
    for c in present:
        diff = prototypes[c] - targets[c]
        loss += float(diff @ diff)
        grad[c] += 2.0 * diff
    for c in present:
        for j in present:
            if c == j:
                continue
            gap = prototypes[c] - prototypes[j]
            dist = float(np.linalg.norm(gap))
            slack = margin - dist
            if slack <= 0.0 or dist == 0.0:
                continue
            loss += slack * slack
            grad[c] += -2.0 * slack * gap / dist
            grad[j] += 2.0 * slack * gap / dist
    return loss, grad


class FedTgpStrategy:
    """Server-trained prototypes: pulled to client centers, pushed apart to a margin."""

    alignment = "l2"
    needs_uplink = True

    def __init__(self, config: ExperimentConfig, num_classes: int):
        if config.margin <= 0.0:
            raise ConfigError(f"margin must be positive, got {config.margin}")
        self.config = config
        self.prototypes = RngStream(config.seed, "fedtgp-init").matrix(
            num_classes, config.feature_dim, scale=1.0 / np.sqrt(config.feature_dim)
        )

    def round_update(self, bank: PrototypeBank, round_index: int):
        present = np.flatnonzero(bank.mask)
        loss = float("nan")
        if present.size >= 1:
            for _ in range(max(1, self.config.server_epochs)):
                loss, grad = fedtgp_objective(
                    self.prototypes, bank.matrix, present, self.config.margin
                )
                self.prototypes = self.prototypes - self.config.prompt_lr * grad
        return self.prototypes.copy(), bank.mask.copy(), loss

    def lambda_at(self, round_index: int) -> float:
        return self.config.resolved_lambda

    def finalize(self, result: RunResult) -> None:
        result.broadcast_prototypes = self.prototypes.copy()


def _spread_once(x: np.ndarray, iterations: int) -> np.ndarray:
    """Projected gradient descent on a softmax smoothing of the max cosine.

    Step size and temperature decay together: early iterations explore,
    late iterations polish near the equilibrium where all worst pairs
    balance. Rows are re-normalized after every step.
    """
    for it in range(iterations):
        frac = it / iterations
        temp = 0.2 * (1.0 - frac) + 0.02 * frac
        lr = 0.3 * (1.0 - frac) + 0.02 * frac
        sims = x @ x.T
        off = sims.copy()
        np.fill_diagonal(off, -np.inf)
        w = np.exp((off - off.max()) / temp)  # exp(-inf) zeroes the diagonal
        w /= w.sum()
        # d cos(x_a, x_b) / d x_a = x_b - cos * x_a for unit rows
        grad = w @ x - (w * sims).sum(axis=1, keepdims=True) * x
        grad += w.T @ x - (w * sims).sum(axis=0)[:, None] * x
        x = x - lr * grad
        x /= np.linalg.norm(x, axis=1, keepdims=True)
    return x


def generate_hypersphere_prototypes(
    num_classes: int, dim: int, rng: RngStream, iterations: int = 500, starts: int = 4
) -> np.ndarray:
    """Unit-norm rows spread to minimize the max pairwise cosine.

    Runs the projected descent from several seeded random starts and keeps
    the best code, since a single start can settle in a non-simplex
    equilibrium. For C <= d + 1 the optimum is the simplex code with all
    pairwise cosines at -1/(C-1); deterministic per rng stream.
    """
    if num_classes < 2 or dim < 2:
        raise ConfigError(f"need C >= 2 and d >= 2, got C={num_classes}, d={dim}")
    best: np.ndarray | None = None
    best_val = np.inf
    for _ in range(starts):
        x = rng.matrix(num_classes, dim)
        x /= np.linalg.norm(x, axis=1, keepdims=True)
        x = _spread_once(x, iterations)
        sims = x @ x.T
        np.fill_diagonal(sims, -2.0)
        val = sims.max()
        if val < best_val:
            best_val, best = val, x
    return best


class AlignFedStrategy:
    """Fixed hypersphere prototypes; lambda decays linearly between endpoints."""

    alignment = "l2"
    needs_uplink = False

    def __init__(self, config: ExperimentConfig, num_classes: int):
        self.config = config
        self.prototypes = generate_hypersphere_prototypes(
            num_classes,
            config.feature_dim,
            RngStream(config.seed, "alignfed-bank"),
        )
        self.mask = np.ones(num_classes, dtype=bool)

    def round_update(self, bank: PrototypeBank, round_index: int):
        return self.prototypes.copy(), self.mask.copy(), float("nan")

    def lambda_at(self, round_index: int) -> float:
        start = self.config.alignfed_lambda_start
        end = self.config.alignfed_lambda_end
        if self.config.rounds <= 1:
            return start
        frac = round_index / (self.config.rounds - 1)
        return start + (end - start) * frac

    def finalize(self, result: RunResult) -> None:
        result.broadcast_prototypes = self.prototypes.copy()


def run_fedproto(config, clients, models, holdout, hierarchy=None, class_names=None) -> RunResult:
    return run_protocol(
        config, clients, models, holdout, FedProtoStrategy(config), hierarchy, class_names
    )


def run_fedtgp_lite(config, clients, models, holdout, hierarchy=None, class_names=None) -> RunResult:
    num_classes = clients[0].train_class_counts.shape[0]
    return run_protocol(
        config, clients, models, holdout, FedTgpStrategy(config, num_classes),
        hierarchy, class_names,
    )


def run_alignfed_lite(config, clients, models, holdout, hierarchy=None, class_names=None) -> RunResult:
    num_classes = clients[0].train_class_counts.shape[0]
    return run_protocol(
        config, clients, models, holdout, AlignFedStrategy(config, num_classes),
        hierarchy, class_names,
    )
