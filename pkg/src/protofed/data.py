"""Synthetic hierarchical benchmark, Dirichlet partitioning, and dataset I/O.

The benchmark plants a two-level structure: supercluster means are drawn
with a wide spread, class means sit near their supercluster mean, and
samples add unit-variance noise. Class descriptions share supercluster
vocabulary so the text pipeline sees the same hierarchy the features do.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    DataFormatError,
    EmptyClientError,
    InvalidGeometryError,
    InvalidLabelError,
    NumericError,
)
from .rng import RngStream

DESCRIPTIONS_PER_CLASS = 3
_SUPER_TOKENS = 6
_CLASS_TOKENS = 2
_ASPECTS = ["form", "texture", "outline"]


@dataclass
class Dataset:
    """Full dataset: S x D_in features, integer labels, optional hierarchy."""

    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int
    class_names: list[str]
    hierarchy: list[int] | None = None
    descriptions: dict[str, list[str]] | None = None

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2 or self.inputs.shape[0] != self.labels.shape[0]:
            raise DataFormatError("inputs must be S x D_in aligned with labels")
        if len(self.class_names) != self.num_classes:
            raise DataFormatError("class_names length must equal num_classes")
        if self.labels.size == 0:
            raise DataFormatError("dataset has no samples")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise InvalidLabelError(
                f"labels must lie in [0, {self.num_classes}), got "
                f"[{self.labels.min()}, {self.labels.max()}]"
            )
        counts = np.bincount(self.labels, minlength=self.num_classes)
        if counts.min() < 1:
            missing = int(np.argmin(counts))
            raise DataFormatError(f"class {missing} has no samples")
        if self.hierarchy is not None and len(self.hierarchy) != self.num_classes:
            raise DataFormatError("hierarchy must list one supercluster per class")
        if not np.all(np.isfinite(self.inputs)):
            raise NumericError("dataset features contain non-finite values")

    @property
    def num_samples(self) -> int:
        return int(self.labels.shape[0])

    @property
    def input_dim(self) -> int:
        return int(self.inputs.shape[1])


@dataclass
class ClientDataset:
    """One client's shard, already split 75/25 into train and test."""

    client_id: int
    train_inputs: np.ndarray
    train_labels: np.ndarray
    test_inputs: np.ndarray
    test_labels: np.ndarray
    train_class_counts: np.ndarray
    train_indices: np.ndarray = field(default_factory=lambda: np.array([], dtype=np.int64))
    test_indices: np.ndarray = field(default_factory=lambda: np.array([], dtype=np.int64))

    @property
    def num_train(self) -> int:
        return int(self.train_labels.shape[0])

    @property
    def num_test(self) -> int:
        return int(self.test_labels.shape[0])

    def present_classes(self) -> np.ndarray:
        return np.flatnonzero(self.train_class_counts > 0)


@dataclass
class PartitionSpec:
    alpha: float
    num_clients: int
    seed: int

    def __post_init__(self):
        if self.alpha <= 0.0:
            raise DataFormatError(f"Dirichlet concentration must be positive, got {self.alpha}")
        if self.num_clients < 1:
            raise DataFormatError(f"need at least one client, got {self.num_clients}")


def _class_token(super_idx: int, class_idx: int) -> str:
    return f"kin{super_idx}spec{class_idx}"


def _make_descriptions(super_idx: int, class_idx: int) -> list[str]:
    """Toy descriptions: a fixed supercluster vocabulary plus class-only tokens.

    All descriptions of a supercluster share its six trait tokens, which is
    the mechanism that gives same-supercluster prompts higher cosine after
    embedding.
    """
    super_words = " ".join(f"kin{super_idx}trait{t}" for t in range(_SUPER_TOKENS))
    out = []
    for j in range(DESCRIPTIONS_PER_CLASS):
        class_words = " ".join(
            f"mark{super_idx}x{class_idx}v{j * _CLASS_TOKENS + t}" for t in range(_CLASS_TOKENS)
        )
        out.append(f"{super_words} with {class_words} {_ASPECTS[j % len(_ASPECTS)]}")
    return out


def generate_hierarchical_dataset(
    superclusters: int,
    classes_per_super: int,
    samples_per_class: int,
    input_dim: int,
    sigma_class: float,
    sigma_super: float,
    seed: int,
) -> Dataset:
    """Two-level Gaussian benchmark with supercluster ground truth.

    class_mean = supercluster_mean (spread sigma_super) + offset (spread
    sigma_class); samples add isotropic unit-variance noise. Requires
    sigma_super > sigma_class > 0 so the hierarchy is geometrically real.
    """
    if min(superclusters, classes_per_super, samples_per_class) < 1:
        raise DataFormatError("all benchmark counts must be >= 1")
    if input_dim < 2:
        raise DataFormatError(f"input_dim must be >= 2, got {input_dim}")
    if not (sigma_super > sigma_class > 0.0):
        raise InvalidGeometryError(
            f"need sigma_super > sigma_class > 0 for a separable hierarchy, "
            f"got sigma_super={sigma_super}, sigma_class={sigma_class}"
        )

    num_classes = superclusters * classes_per_super
    means_rng = RngStream(seed, "benchmark-means")
    super_means = means_rng.matrix(superclusters, input_dim, scale=sigma_super)

    inputs = np.empty((num_classes * samples_per_class, input_dim))
    labels = np.empty(num_classes * samples_per_class, dtype=np.int64)
    class_names: list[str] = []
    hierarchy: list[int] = []
    descriptions: dict[str, list[str]] = {}
    row = 0
    for s in range(superclusters):
        for j in range(classes_per_super):
            c = s * classes_per_super + j
            offset = RngStream(seed, "benchmark-class-mean", client=c).matrix(
                1, input_dim, scale=sigma_class
            )[0]
            mean = super_means[s] + offset
            noise = RngStream(seed, "benchmark-samples", client=c).matrix(
                samples_per_class, input_dim
            )
            inputs[row : row + samples_per_class] = mean + noise
            labels[row : row + samples_per_class] = c
            row += samples_per_class
            name = _class_token(s, j)
            class_names.append(name)
            hierarchy.append(s)
            descriptions[name] = _make_descriptions(s, j)

    return Dataset(inputs, labels, num_classes, class_names, hierarchy, descriptions)


def largest_remainder(proportions: np.ndarray, total: int) -> np.ndarray:
    """Integer counts summing to ``total`` matching ``proportions`` (largest remainder)."""
    scaled = proportions * total
    base = np.floor(scaled).astype(np.int64)
    remainder = total - int(base.sum())
    # ties broken toward the lower index via stable sort
    order = np.argsort(-(scaled - base), kind="stable")
    base[order[:remainder]] += 1
    return base


def _split_client(
    client_id: int,
    indices_per_class: dict[int, np.ndarray],
    dataset: Dataset,
) -> ClientDataset:
    """Stratified 75/25 split; a single-sample class goes entirely to train."""
    train_idx: list[np.ndarray] = []
    test_idx: list[np.ndarray] = []
    counts = np.zeros(dataset.num_classes, dtype=np.int64)
    for c, idx in sorted(indices_per_class.items()):
        n = len(idx)
        if n == 0:
            continue
        n_test = 0 if n == 1 else max(1, int(n * 0.25 + 0.5))
        counts[c] = n - n_test
        train_idx.append(idx[: n - n_test])
        if n_test:
            test_idx.append(idx[n - n_test :])
    train = np.concatenate(train_idx) if train_idx else np.array([], dtype=np.int64)
    test = np.concatenate(test_idx) if test_idx else np.array([], dtype=np.int64)
    return ClientDataset(
        client_id=client_id,
        train_inputs=dataset.inputs[train],
        train_labels=dataset.labels[train],
        test_inputs=dataset.inputs[test],
        test_labels=dataset.labels[test],
        train_class_counts=counts,
        train_indices=train,
        test_indices=test,
    )


def dirichlet_partition(dataset: Dataset, spec: PartitionSpec) -> list[ClientDataset]:
    """Assign samples to clients with per-class Dir(alpha) proportions.

    Samples are pre-sorted by (label, original index); each class's sorted
    run is sliced contiguously by largest-remainder counts, so per-client
    class histograms depend only on (seed, alpha, class sizes). Clients may
    lack classes entirely. If any client ends up with zero samples the whole
    partition is redrawn, up to 10 times.
    """
    n = spec.num_clients
    class_indices = [
        np.flatnonzero(dataset.labels == c) for c in range(dataset.num_classes)
    ]
    for attempt in range(10):
        assignment: list[dict[int, np.ndarray]] = [dict() for _ in range(n)]
        totals = np.zeros(n, dtype=np.int64)
        for c, idx in enumerate(class_indices):
            stream = RngStream(spec.seed, "partition-class", client=c, round_index=attempt)
            props = stream.dirichlet(spec.alpha, n) if n > 1 else np.array([1.0])
            counts = largest_remainder(props, len(idx))
            start = 0
            for i in range(n):
                if counts[i] > 0:
                    assignment[i][c] = idx[start : start + counts[i]]
                    start += counts[i]
                    totals[i] += counts[i]
        if totals.min() > 0:
            return [_split_client(i, assignment[i], dataset) for i in range(n)]
    raise EmptyClientError(
        f"client with zero samples after 10 Dirichlet redraws "
        f"(alpha={spec.alpha}, clients={n}, samples={dataset.num_samples})"
    )


def carve_balanced_holdout(
    dataset: Dataset, per_class: int, seed: int
) -> tuple[Dataset, Dataset]:
    """Remove ``per_class`` samples of every class into a balanced global test set."""
    if per_class < 1:
        raise DataFormatError(f"holdout per_class must be >= 1, got {per_class}")
    held = np.zeros(dataset.num_samples, dtype=bool)
    for c in range(dataset.num_classes):
        idx = np.flatnonzero(dataset.labels == c)
        if len(idx) <= per_class:
            raise DataFormatError(
                f"class {c} has {len(idx)} samples; cannot hold out {per_class} "
                "and still train on it"
            )
        stream = RngStream(seed, "holdout", client=c)
        chosen = stream.choice_without_replacement(len(idx), per_class)
        held[idx[chosen]] = True

    def subset(mask: np.ndarray) -> Dataset:
        return Dataset(
            dataset.inputs[mask],
            dataset.labels[mask],
            dataset.num_classes,
            dataset.class_names,
            dataset.hierarchy,
            dataset.descriptions,
        )

    return subset(held), subset(~held)


def label_entropy(counts: np.ndarray) -> float:
    """Shannon entropy (nats) of a label histogram."""
    total = counts.sum()
    if total == 0:
        return 0.0
    p = counts[counts > 0] / total
    return float(-(p * np.log(p)).sum())


# --- dataset file schema ---------------------------------------------------


def save_dataset(dataset: Dataset, path: str | Path) -> None:
    """Write the JSON schema; floats use repr so values round-trip exactly."""
    payload = {
        "num_classes": dataset.num_classes,
        "input_dim": dataset.input_dim,
        "class_names": dataset.class_names,
        "hierarchy": dataset.hierarchy,
        "samples": [
            {"x": [float(v) for v in x], "y": int(y)}
            for x, y in zip(dataset.inputs, dataset.labels)
        ],
        "descriptions": dataset.descriptions,
    }
    Path(path).write_text(json.dumps(payload), encoding="utf-8")


def load_dataset(path: str | Path) -> Dataset:
    """Parse and validate the dataset JSON schema, naming the offending field."""
    path = Path(path)
    if not path.exists():
        raise DataFormatError(f"dataset file not found: {path}")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{path}: not valid JSON ({exc})") from exc

    def need(key: str):
        if key not in raw:
            raise DataFormatError(f"{path}: missing field '{key}'")
        return raw[key]

    num_classes = need("num_classes")
    input_dim = need("input_dim")
    class_names = need("class_names")
    samples = need("samples")
    if not isinstance(num_classes, int) or num_classes < 1:
        raise DataFormatError(f"{path}: field 'num_classes' must be a positive integer")
    if not isinstance(input_dim, int) or input_dim < 1:
        raise DataFormatError(f"{path}: field 'input_dim' must be a positive integer")
    if not isinstance(class_names, list) or len(class_names) != num_classes:
        raise DataFormatError(f"{path}: field 'class_names' must list {num_classes} names")
    if not isinstance(samples, list) or not samples:
        raise DataFormatError(f"{path}: field 'samples' must be a nonempty list")

    inputs = np.empty((len(samples), input_dim))
    labels = np.empty(len(samples), dtype=np.int64)
    for i, s in enumerate(samples):
        x = s.get("x")
        if not isinstance(x, list) or len(x) != input_dim:
            raise DataFormatError(
                f"{path}: samples[{i}].x must be a list of {input_dim} reals"
            )
        y = s.get("y")
        if not isinstance(y, int):
            raise DataFormatError(f"{path}: samples[{i}].y must be an integer")
        if not 0 <= y < num_classes:
            raise InvalidLabelError(
                f"{path}: samples[{i}].y = {y} outside [0, {num_classes})"
            )
        inputs[i] = x
        labels[i] = y

    hierarchy = raw.get("hierarchy")
    if hierarchy is not None:
        if not isinstance(hierarchy, list) or len(hierarchy) != num_classes:
            raise DataFormatError(
                f"{path}: field 'hierarchy' must be null or list {num_classes} entries"
            )
        hierarchy = [int(h) for h in hierarchy]

    descriptions = raw.get("descriptions")
    if descriptions is not None:
        if not isinstance(descriptions, dict):
            raise DataFormatError(f"{path}: field 'descriptions' must be null or an object")
        for name in class_names:
            if name not in descriptions:
                raise DataFormatError(f"{path}: descriptions missing class '{name}'")
            if not all(isinstance(d, str) for d in descriptions[name]):
                raise DataFormatError(f"{path}: descriptions['{name}'] must be strings")

    return Dataset(inputs, labels, num_classes, list(class_names), hierarchy, descriptions)
