"""Per-client MLP feature extractors and linear classifiers.

MLPs stand in for full-scale CNN families: what the protocol needs is
heterogeneous extractor parameters with a shared output dimension d, and an
exact forward/backward pair. Hidden layers use the configured activation;
the final feature map and the classifier are linear. Updates are vanilla
gradient descent.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, NumericError, ProtocolError, ShapeError
from .rng import RngStream

_ACTIVATIONS = ("relu", "tanh")


@dataclass(frozen=True)
class ArchitectureSpec:
    hidden_widths: tuple[int, ...]
    activation: str
    output_dim: int

    def __post_init__(self):
        if self.activation not in _ACTIVATIONS:
            raise ConfigError(f"activation must be one of {_ACTIVATIONS}, got {self.activation!r}")
        if self.output_dim < 1:
            raise ConfigError(f"output_dim must be positive, got {self.output_dim}")
        if any(w < 1 for w in self.hidden_widths):
            raise ConfigError(f"hidden widths must be positive, got {self.hidden_widths}")


@dataclass
class ModelParams:
    """Extractor weight/bias stacks plus the d x C classifier. Single-owner."""

    spec: ArchitectureSpec
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    clf_weight: np.ndarray
    clf_bias: np.ndarray
    _cache: dict | None = field(default=None, repr=False, compare=False)

    def clone(self) -> "ModelParams":
        return ModelParams(
            self.spec,
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.clf_weight.copy(),
            self.clf_bias.copy(),
        )

    def flatten(self) -> np.ndarray:
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.extend([w.ravel(), b.ravel()])
        parts.extend([self.clf_weight.ravel(), self.clf_bias.ravel()])
        return np.concatenate(parts)

    def load_flat(self, flat: np.ndarray) -> None:
        pos = 0
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            self.weights[i] = flat[pos : pos + w.size].reshape(w.shape).copy()
            pos += w.size
            self.biases[i] = flat[pos : pos + b.size].reshape(b.shape).copy()
            pos += b.size
        self.clf_weight = flat[pos : pos + self.clf_weight.size].reshape(self.clf_weight.shape).copy()
        pos += self.clf_weight.size
        self.clf_bias = flat[pos : pos + self.clf_bias.size].reshape(self.clf_bias.shape).copy()


def assign_architectures(
    num_clients: int, family: list[ArchitectureSpec]
) -> list[ArchitectureSpec]:
    """Client i gets family[i mod X]."""
    if not family:
        raise ConfigError("architecture family is empty")
    dims = {spec.output_dim for spec in family}
    if len(dims) != 1:
        raise ConfigError(f"all architectures must share output_dim, got {sorted(dims)}")
    return [family[i % len(family)] for i in range(num_clients)]


def init_model(
    spec: ArchitectureSpec, input_dim: int, num_classes: int, rng: RngStream
) -> ModelParams:
    """Gaussian weights scaled by 1/sqrt(fan_in); zero biases."""
    dims = [input_dim, *spec.hidden_widths, spec.output_dim]
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        weights.append(rng.matrix(fan_in, fan_out, scale=1.0 / np.sqrt(fan_in)))
        biases.append(np.zeros(fan_out))
    clf_weight = rng.matrix(spec.output_dim, num_classes, scale=1.0 / np.sqrt(spec.output_dim))
    clf_bias = np.zeros(num_classes)
    return ModelParams(spec, weights, biases, clf_weight, clf_bias)


def _activate(z: np.ndarray, kind: str) -> np.ndarray:
    return np.maximum(z, 0.0) if kind == "relu" else np.tanh(z)


def _activate_grad(z: np.ndarray, activated: np.ndarray, kind: str) -> np.ndarray:
    return (z > 0.0).astype(np.float64) if kind == "relu" else 1.0 - activated**2


def forward_features(params: ModelParams, x: np.ndarray) -> np.ndarray:
    """B x d features; caches layer activations on the model for backward."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.weights[0].shape[0]:
        raise ShapeError(
            f"input must be B x {params.weights[0].shape[0]}, got {x.shape}"
        )
    h = x
    layer_inputs = []
    pre_activations = []
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        layer_inputs.append(h)
        z = h @ w + b
        if i < last:
            pre_activations.append(z)
            h = _activate(z, params.spec.activation)
        else:
            h = z
    params._cache = {
        "layer_inputs": layer_inputs,
        "pre_activations": pre_activations,
        "features": h,
    }
    return h


def classifier_logits(params: ModelParams, features: np.ndarray) -> np.ndarray:
    return features @ params.clf_weight + params.clf_bias


def backward_and_step(
    params: ModelParams,
    grad_features: np.ndarray,
    grad_logits: np.ndarray,
    lr: float,
) -> ModelParams:
    """One gradient-descent step from the cached forward pass.

    grad_logits flows through the classifier into the features; grad_features
    carries any loss applied directly to the features (the alignment path).
    Raises on a missing forward cache and on post-step non-finite parameters.
    """
    if params._cache is None:
        raise ProtocolError("backward_and_step called without a cached forward pass")
    if lr <= 0.0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    cache = params._cache
    params._cache = None
    features = cache["features"]

    grad_clf_w = features.T @ grad_logits
    grad_clf_b = grad_logits.sum(axis=0)
    d_h = grad_features + grad_logits @ params.clf_weight.T

    grad_w = [np.empty(0)] * len(params.weights)
    grad_b = [np.empty(0)] * len(params.biases)
    last = len(params.weights) - 1
    for i in range(last, -1, -1):
        if i < last:
            z = cache["pre_activations"][i]
            activated = _activate(z, params.spec.activation)
            d_h = d_h * _activate_grad(z, activated, params.spec.activation)
        grad_w[i] = cache["layer_inputs"][i].T @ d_h
        grad_b[i] = d_h.sum(axis=0)
        if i > 0:
            d_h = d_h @ params.weights[i].T

    for i in range(len(params.weights)):
        params.weights[i] = params.weights[i] - lr * grad_w[i]
        params.biases[i] = params.biases[i] - lr * grad_b[i]
    params.clf_weight = params.clf_weight - lr * grad_clf_w
    params.clf_bias = params.clf_bias - lr * grad_clf_b

    for arr in (*params.weights, *params.biases, params.clf_weight, params.clf_bias):
        if not np.all(np.isfinite(arr)):
            raise NumericError("model parameters diverged to non-finite values")
    return params


def average_models(models: list[ModelParams], weights: np.ndarray) -> ModelParams:
    """Weighted parameter average; requires homogeneous architectures."""
    if len(models) != len(weights) or not models:
        raise ShapeError("need one weight per model")
    specs = {m.spec for m in models}
    if len(specs) != 1:
        raise ConfigError("cannot average heterogeneous architectures")
    w = np.asarray(weights, dtype=np.float64)
    w = w / w.sum()
    out = models[0].clone()
    for i in range(len(out.weights)):
        out.weights[i] = sum(wi * m.weights[i] for wi, m in zip(w, models))
        out.biases[i] = sum(wi * m.biases[i] for wi, m in zip(w, models))
    out.clf_weight = sum(wi * m.clf_weight for wi, m in zip(w, models))
    out.clf_bias = sum(wi * m.clf_bias for wi, m in zip(w, models))
    return out


# --- checkpoint schema -------------------------------------------------------


def save_model(params: ModelParams, path: str | Path) -> None:
    payload = {
        "hidden_widths": list(params.spec.hidden_widths),
        "activation": params.spec.activation,
        "output_dim": params.spec.output_dim,
        "weights": [w.tolist() for w in params.weights],
        "biases": [b.tolist() for b in params.biases],
        "clf_weight": params.clf_weight.tolist(),
        "clf_bias": params.clf_bias.tolist(),
    }
    Path(path).write_text(json.dumps(payload), encoding="utf-8")


def load_model(path: str | Path) -> ModelParams:
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    spec = ArchitectureSpec(
        tuple(raw["hidden_widths"]), raw["activation"], raw["output_dim"]
    )
    return ModelParams(
        spec,
        [np.asarray(w, dtype=np.float64) for w in raw["weights"]],
        [np.asarray(b, dtype=np.float64) for b in raw["biases"]],
        np.asarray(raw["clf_weight"], dtype=np.float64),
        np.asarray(raw["clf_bias"], dtype=np.float64),
    )
