"""The federated round loop: local training, prototype exchange, aggregation.

One runner drives every method. Per round: aggregate the previous round's
uplinked class prototypes into the global image bank, let the server
strategy produce broadcast prototypes (training trainable prompts or server
prototypes where the method has them), sample participants, run local
training, collect fresh uplinks, and evaluate. Clients never transmit raw
samples or feature matrices -- uplinks carry only per-class mean vectors
with sample counts.

Determinism: every random decision draws from a stream keyed by
(seed, purpose, client, round), so client training may run in parallel
threads without changing any result.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from math import ceil
from typing import Protocol

import numpy as np

from .config import ExperimentConfig
from .data import ClientDataset, Dataset
from .errors import ConfigError, ProtocolError
from .metrics import RoundMetrics, RunResult, evaluate_client
from .models import (
    ModelParams,
    average_models,
    backward_and_step,
    classifier_logits,
    forward_features,
)
from .numerics import contrastive_alignment, softmax_cross_entropy
from .rng import RngStream
from .text import FrozenEncoder, PromptBank, encode_text_prototypes, train_prompts


@dataclass
class PrototypeBank:
    """Global image prototypes with presence mask and last-updated round."""

    matrix: np.ndarray
    mask: np.ndarray
    last_updated: np.ndarray

    @classmethod
    def empty(cls, num_classes: int, dim: int) -> "PrototypeBank":
        return cls(
            np.zeros((num_classes, dim)),
            np.zeros(num_classes, dtype=bool),
            np.full(num_classes, -1, dtype=np.int64),
        )


UplinkEntry = tuple[int, np.ndarray, int]  # (class id, prototype vector, sample count)


def compute_local_prototypes(model: ModelParams, data: ClientDataset) -> list[UplinkEntry]:
    """Per-class mean of the extractor's features over the train split."""
    feats = forward_features(model, data.train_inputs)
    model._cache = None  # analysis pass, not a training forward
    entries: list[UplinkEntry] = []
    for c in data.present_classes():
        rows = feats[data.train_labels == c]
        entries.append((int(c), rows.mean(axis=0), int(rows.shape[0])))
    return entries


def aggregate_global_prototypes(
    uplinks: list[list[UplinkEntry]],
    bank: PrototypeBank,
    round_index: int,
) -> PrototypeBank:
    """Sample-count-weighted mean per class; unreported classes keep prior values.

    Weights are |D_ic| / M_c and sum to 1 over the reporting clients, making
    the result equal to the pooled per-sample feature mean.
    """
    if not uplinks:
        raise ProtocolError("aggregation needs at least one uplink")
    num_classes = bank.matrix.shape[0]
    sums = np.zeros_like(bank.matrix)
    totals = np.zeros(num_classes, dtype=np.int64)
    reported = np.zeros(num_classes, dtype=bool)
    for entries in uplinks:
        for c, vec, count in entries:
            if count <= 0:
                raise ProtocolError(f"class {c} reported with non-positive count {count}")
            sums[c] += count * vec
            totals[c] += count
            reported[c] = True
    for c in np.flatnonzero(reported):
        if totals[c] == 0:
            raise ProtocolError(f"class {c} reported with zero total count")
        bank.matrix[c] = sums[c] / totals[c]
        bank.mask[c] = True
        bank.last_updated[c] = round_index
    return bank


def client_local_train(
    model: ModelParams,
    data: ClientDataset,
    prototypes: np.ndarray | None,
    mask: np.ndarray | None,
    lam: float,
    tau: float,
    epochs: int,
    batch_size: int,
    lr: float,
    rng: RngStream,
    alignment: str = "contrastive",
) -> tuple[ModelParams, float]:
    """Mini-batch descent on cross-entropy plus the weighted alignment term.

    The alignment gradient enters only through the features (broadcast
    prototypes are constants here). Samples whose class has no broadcast
    prototype contribute only cross-entropy. Returns (model, mean loss per
    sample over the whole call); epochs = 0 leaves the model untouched.
    """
    if lam < 0.0:
        raise ConfigError(f"alignment weight must be >= 0, got {lam}")
    if alignment not in ("contrastive", "l2"):
        raise ConfigError(f"unknown alignment kind {alignment!r}")
    n = data.num_train
    if epochs == 0 or n == 0:
        return model, float("nan")
    align = lam > 0.0 and prototypes is not None
    if align:
        present = np.flatnonzero(mask) if mask is not None else np.arange(prototypes.shape[0])
        position = np.full(prototypes.shape[0], -1, dtype=np.int64)
        position[present] = np.arange(present.size)
        targets = prototypes[present]
    loss_sum = 0.0
    seen = 0
    for _ in range(epochs):
        order = rng.shuffle(np.arange(n))
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            x = data.train_inputs[idx]
            y = data.train_labels[idx]
            feats = forward_features(model, x)
            logits = classifier_logits(model, feats)
            ce, grad_logits = softmax_cross_entropy(logits, y)
            grad_feats = np.zeros_like(feats)
            batch_loss = ce
            if align:
                b = len(idx)
                for s in range(b):
                    pos = position[y[s]]
                    if pos < 0:
                        continue
                    if alignment == "contrastive":
                        term, g_anchor, _ = contrastive_alignment(
                            feats[s], targets, int(pos), tau
                        )
                    else:
                        diff = feats[s] - targets[pos]
                        term = float(diff @ diff)
                        g_anchor = 2.0 * diff
                    batch_loss += lam * term / b
                    grad_feats[s] += lam * g_anchor / b
            backward_and_step(model, grad_feats, grad_logits, lr)
            loss_sum += batch_loss * len(idx)
            seen += len(idx)
    return model, loss_sum / seen


def sample_participants(
    num_clients: int, rate: float, round_index: int, rng: RngStream
) -> np.ndarray:
    """ceil(rate * N) distinct clients, uniform without replacement, sorted."""
    if not 0.0 < rate <= 1.0:
        raise ConfigError(f"participation rate must lie in (0, 1], got {rate}")
    count = ceil(rate * num_clients)
    if rate >= 1.0:
        return np.arange(num_clients)
    return np.sort(rng.choice_without_replacement(num_clients, count))


class ServerStrategy(Protocol):
    alignment: str | None  # "contrastive", "l2", or None (no alignment term)
    needs_uplink: bool

    def round_update(
        self, bank: PrototypeBank, round_index: int
    ) -> tuple[np.ndarray | None, np.ndarray | None, float]:
        """(broadcast prototypes, mask, server loss) for this round."""

    def lambda_at(self, round_index: int) -> float: ...

    def finalize(self, result: RunResult) -> None:
        """Attach final strategy state (broadcast bank etc.) to the result."""


class FedTspStrategy:
    """Trainable-prompt text prototypes aligned to the global image bank."""

    alignment = "contrastive"
    needs_uplink = True

    def __init__(self, config: ExperimentConfig, bank: PromptBank, encoder: FrozenEncoder):
        self.config = config
        self.bank = bank
        self.encoder = encoder
        self.text_matrix: np.ndarray | None = None

    def round_update(self, bank, round_index):
        server_loss = float("nan")
        if self.config.server_epochs >= 1 and int(bank.mask.sum()) >= 2:
            self.bank, history = train_prompts(
                self.bank,
                self.encoder,
                bank.matrix,
                bank.mask,
                self.config.tau,
                self.config.prompt_lr,
                self.config.server_epochs,
            )
            server_loss = history[-1]
        protos = encode_text_prototypes(self.bank, self.encoder)
        self.text_matrix = protos.matrix
        return protos.matrix, bank.mask.copy(), server_loss

    def lambda_at(self, round_index):
        return self.config.resolved_lambda

    def finalize(self, result):
        if self.text_matrix is None:
            protos = encode_text_prototypes(self.bank, self.encoder)
            self.text_matrix = protos.matrix
        result.broadcast_prototypes = self.text_matrix
        result.extras["prompt_bank"] = self.bank


class LocalOnlyStrategy:
    """Isolated training: no communication, no alignment."""

    alignment = None
    needs_uplink = False

    def __init__(self, config: ExperimentConfig):
        self.config = config

    def round_update(self, bank, round_index):
        return None, None, float("nan")

    def lambda_at(self, round_index):
        return 0.0

    def finalize(self, result):
        pass


def _evaluate_round(
    round_index: int,
    models: list[ModelParams],
    clients: list[ClientDataset],
    holdout: Dataset | None,
    server_loss: float,
    mean_client_loss: float,
    uplink_floats: int,
    downlink_floats: int,
) -> RoundMetrics:
    top1, top5, global_accs = [], [], []
    for model, client in zip(models, clients):
        if client.num_test == 0:
            top1.append(float("nan"))
            top5.append(float("nan"))
        else:
            t1, t5 = evaluate_client(model, client.test_inputs, client.test_labels)
            top1.append(t1)
            top5.append(t5)
        if holdout is not None:
            g1, _ = evaluate_client(model, holdout.inputs, holdout.labels)
            global_accs.append(g1)
    return RoundMetrics(
        round_index=round_index,
        per_client_top1=top1,
        per_client_top5=top5,
        mean_local_top1=float(np.nanmean(top1)),
        mean_local_top5=float(np.nanmean(top5)),
        global_top1=float(np.mean(global_accs)) if global_accs else float("nan"),
        server_loss=server_loss,
        mean_client_loss=mean_client_loss,
        uplink_floats=uplink_floats,
        downlink_floats=downlink_floats,
    )


def run_protocol(
    config: ExperimentConfig,
    clients: list[ClientDataset],
    models: list[ModelParams],
    holdout: Dataset | None,
    strategy: ServerStrategy,
    hierarchy: list[int] | None = None,
    class_names: list[str] | None = None,
) -> RunResult:
    """T rounds of the shared loop; round 0 of the history is the initial evaluation."""
    num_classes = clients[0].train_class_counts.shape[0]
    d = config.feature_dim
    image_bank = PrototypeBank.empty(num_classes, d)
    aggregate_model = config.mode in ("gfl", "pfl")
    if aggregate_model and len(config.architectures) != 1:
        raise ConfigError("model aggregation requires homogeneous architectures")

    pending_uplinks: list[list[UplinkEntry]] = []
    initial_uplink = 0
    if strategy.needs_uplink:
        pending_uplinks = [compute_local_prototypes(m, c) for m, c in zip(models, clients)]
        initial_uplink = sum(len(u) * d for u in pending_uplinks)

    history = [
        _evaluate_round(
            0, models, clients, holdout, float("nan"), float("nan"), initial_uplink, 0
        )
    ]

    pool = ThreadPoolExecutor(max_workers=config.threads) if config.threads > 1 else None
    try:
        for t in range(config.rounds):
            if strategy.needs_uplink and pending_uplinks:
                aggregate_global_prototypes(pending_uplinks, image_bank, t)
            broadcast, mask, server_loss = strategy.round_update(image_bank, t)

            part_rng = RngStream(config.seed, "participation", round_index=t)
            participants = sample_participants(
                config.num_clients, config.participation_rate, t, part_rng
            )
            downlink = 0 if broadcast is None else broadcast.size * len(participants)
            lam = strategy.lambda_at(t)

            def train_one(i: int) -> tuple[int, float]:
                rng = RngStream(config.seed, "client-train", client=i, round_index=t)
                _, loss = client_local_train(
                    models[i],
                    clients[i],
                    broadcast,
                    mask,
                    lam,
                    config.tau,
                    config.local_epochs,
                    config.batch_size,
                    config.client_lr,
                    rng,
                    strategy.alignment or "contrastive",
                )
                return i, loss

            if pool is not None:
                losses = dict(pool.map(train_one, participants))
            else:
                losses = dict(train_one(i) for i in participants)

            if aggregate_model:
                weights = np.array([clients[i].num_train for i in participants], dtype=np.float64)
                global_model = average_models([models[i] for i in participants], weights)
                for i in range(config.num_clients):
                    models[i] = global_model.clone()

            uplink = 0
            if strategy.needs_uplink:
                pending_uplinks = [
                    compute_local_prototypes(models[i], clients[i]) for i in participants
                ]
                uplink = sum(len(u) * d for u in pending_uplinks)

            mean_loss = float(np.mean([losses[i] for i in sorted(losses)]))
            history.append(
                _evaluate_round(
                    t + 1, models, clients, holdout, server_loss, mean_loss, uplink, downlink
                )
            )
    finally:
        if pool is not None:
            pool.shutdown()

    result = RunResult(
        config_dict=config.to_dict(),
        history=history,
        models=models,
        class_names=class_names or [str(c) for c in range(num_classes)],
        hierarchy=hierarchy,
        image_prototypes=image_bank.matrix.copy(),
        image_mask=image_bank.mask.copy(),
    )
    strategy.finalize(result)
    return result


def run_fedtsp(
    config: ExperimentConfig,
    clients: list[ClientDataset],
    models: list[ModelParams],
    holdout: Dataset | None,
    bank: PromptBank,
    encoder: FrozenEncoder,
    hierarchy: list[int] | None = None,
    class_names: list[str] | None = None,
) -> RunResult:
    strategy = FedTspStrategy(config, bank, encoder)
    return run_protocol(config, clients, models, holdout, strategy, hierarchy, class_names)


def run_pfl_finetune(
    result: RunResult,
    clients: list[ClientDataset],
    finetune_epochs: int,
    lr: float,
) -> dict:
    """Classifier-only fine-tuning of the final global model, per client.

    The extractor stays frozen (its features are computed once), so only the
    classifier weights move. Reports the best local test accuracy across
    epochs, including the pre-finetune epoch 0.
    """
    per_client_best = []
    for model, client in zip(result.models, clients):
        tuned = model.clone()
        if client.num_test == 0:
            per_client_best.append(float("nan"))
            continue
        train_feats = forward_features(tuned, client.train_inputs)
        test_feats = forward_features(tuned, client.test_inputs)
        tuned._cache = None

        def test_top1() -> float:
            logits = test_feats @ tuned.clf_weight + tuned.clf_bias
            order = np.argsort(-logits, axis=1, kind="stable")
            return float((order[:, 0] == client.test_labels).mean())

        best = test_top1()
        for _ in range(finetune_epochs):
            logits = train_feats @ tuned.clf_weight + tuned.clf_bias
            _, grad_logits = softmax_cross_entropy(logits, client.train_labels)
            tuned.clf_weight = tuned.clf_weight - lr * (train_feats.T @ grad_logits)
            tuned.clf_bias = tuned.clf_bias - lr * grad_logits.sum(axis=0)
            best = max(best, test_top1())
        per_client_best.append(best)
    return {
        "per_client_top1": per_client_best,
        "mean_top1": float(np.nanmean(per_client_best)),
        "finetune_epochs": finetune_epochs,
        "finetune_lr": lr,
    }
