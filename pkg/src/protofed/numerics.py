"""Differentiable loss primitives with hand-derived gradients.

All matrices are 2-D float64 numpy arrays in row-major order. Every softmax
here is log-sum-exp stabilized (row max subtracted) because temperatures as
sharp as 0.07 push cosine logits to +-14.3. There is no autodiff tape: each
operation returns its exact analytic gradient, and ``finite_difference_check``
is the independent oracle used to validate all of them.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import DegenerateInputError, InvalidLabelError, NumericError, ShapeError


def require_finite(name: str, arr: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{name} contains non-finite values")
    return arr


def stable_softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax with the row max subtracted before exponentiation."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over a batch and its gradient w.r.t. the logits.

    loss = mean_b [ -log softmax(logits_b)[y_b] ]
    grad = (softmax - onehot) / B, the exact gradient of that mean.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    if logits.ndim != 2 or logits.shape[0] < 1:
        raise ShapeError(f"logits must be B x C with B >= 1, got shape {logits.shape}")
    require_finite("logits", logits)
    batch, num_classes = logits.shape
    if labels.shape != (batch,):
        raise ShapeError(f"labels must have shape ({batch},), got {labels.shape}")
    if labels.min() < 0 or labels.max() >= num_classes:
        raise InvalidLabelError(
            f"labels must lie in [0, {num_classes}), got range "
            f"[{labels.min()}, {labels.max()}]"
        )
    rows = np.arange(batch)
    loss = -log_softmax(logits)[rows, labels].mean()
    grad = stable_softmax(logits)
    grad[rows, labels] -= 1.0
    grad /= batch
    return float(loss), grad


def _checked_norm(name: str, v: np.ndarray) -> float:
    n = float(np.linalg.norm(v))
    if n == 0.0:
        raise DegenerateInputError(f"{name} is a zero vector; cosine undefined")
    return n


def contrastive_alignment(
    anchor: np.ndarray,
    targets: np.ndarray,
    positive: int,
    tau: float,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Temperature-scaled cosine contrastive loss of one anchor against C targets.

    loss = -log [ exp(cos(a, t_pos)/tau) / sum_c exp(cos(a, t_c)/tau) ]

    Returns (loss, grad_anchor, grad_targets); both gradients are exact,
    including the norm terms of the cosine.
    """
    anchor = np.asarray(anchor, dtype=np.float64).reshape(-1)
    targets = np.asarray(targets, dtype=np.float64)
    if targets.ndim != 2 or targets.shape[1] != anchor.shape[0]:
        raise ShapeError(
            f"targets must be C x d with d = {anchor.shape[0]}, got {targets.shape}"
        )
    if not 0 <= positive < targets.shape[0]:
        raise InvalidLabelError(f"positive index {positive} outside [0, {targets.shape[0]})")
    if tau <= 0.0:
        raise NumericError(f"temperature must be positive, got {tau}")
    require_finite("anchor", anchor)
    require_finite("targets", targets)

    a_norm = _checked_norm("anchor", anchor)
    t_norms = np.linalg.norm(targets, axis=1)
    if np.any(t_norms == 0.0):
        raise DegenerateInputError("a target row is a zero vector; cosine undefined")

    cos = targets @ anchor / (t_norms * a_norm)
    logits = cos / tau
    shifted = logits - logits.max()
    p = np.exp(shifted)
    p /= p.sum()
    loss = float(np.log(np.exp(shifted).sum()) - shifted[positive])

    # dL/dcos_c = (p_c - [c == positive]) / tau
    dcos = p.copy()
    dcos[positive] -= 1.0
    dcos /= tau

    # cosine gradients: dcos/da = t/(|a||t|) - cos * a/|a|^2,
    #                   dcos/dt = a/(|a||t|) - cos * t/|t|^2
    grad_anchor = (
        targets / (t_norms * a_norm)[:, None] - np.outer(cos / a_norm**2, anchor)
    ).T @ dcos
    grad_targets = (
        dcos[:, None] * (anchor[None, :] / (t_norms * a_norm)[:, None]
                         - (cos / t_norms**2)[:, None] * targets)
    )
    return loss, grad_anchor, grad_targets


def cosine_similarity_matrix(a: np.ndarray) -> np.ndarray:
    """C x C matrix of pairwise row cosines; symmetric, unit diagonal."""
    a = np.asarray(a, dtype=np.float64)
    require_finite("matrix", a)
    norms = np.linalg.norm(a, axis=1)
    if np.any(norms == 0.0):
        raise DegenerateInputError("zero row; cosine similarity undefined")
    unit = a / norms[:, None]
    sim = unit @ unit.T
    sim = 0.5 * (sim + sim.T)
    np.clip(sim, -1.0, 1.0, out=sim)
    np.fill_diagonal(sim, 1.0)
    return sim


def finite_difference_check(
    f: Callable[[np.ndarray], float],
    x: np.ndarray,
    analytic_grad: np.ndarray,
    step: float = 1e-4,
) -> float:
    """Max relative error between central differences of ``f`` and ``analytic_grad``.

    error_i = |cd_i - g_i| / max(|g_i|, 1e-8), maximized over coordinates.
    The probe leaves ``x`` unchanged.
    """
    if step <= 0.0:
        raise NumericError(f"step must be positive, got {step}")
    x = np.asarray(x, dtype=np.float64)
    analytic_grad = np.asarray(analytic_grad, dtype=np.float64)
    if analytic_grad.shape != x.shape:
        raise ShapeError(
            f"gradient shape {analytic_grad.shape} does not match x shape {x.shape}"
        )
    flat = x.ravel().copy()
    worst = 0.0
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        f_plus = float(f(flat.reshape(x.shape)))
        flat[i] = orig - step
        f_minus = float(f(flat.reshape(x.shape)))
        flat[i] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NumericError("objective returned a non-finite value during probing")
        central = (f_plus - f_minus) / (2.0 * step)
        g = analytic_grad.ravel()[i]
        worst = max(worst, abs(central - g) / max(abs(g), 1e-8))
    return worst
