"""Pointwise and per-capsule nonlinearities, the margin loss, and class scores.

Everything here comes in forward/backward pairs. Backward functions take the
original forward *input* plus the upstream gradient and return the gradient
with respect to that input; nothing is cached between calls, which keeps the
training loop free to recompute or checkpoint as it likes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor_core import CAPSULE_AXES, frobenius_norm

LEAKY_SLOPE = 0.1

# Floor for capsule norms used as divisors. Capsules this small are
# indistinguishable from the zero capsule, which maps to zero with zero
# gradient by convention.
NORM_FLOOR = 1e-12


def leaky_relu(x: np.ndarray, slope: float = LEAKY_SLOPE) -> np.ndarray:
    return np.where(x >= 0, x, slope * x)


def leaky_relu_backward(x, grad, slope: float = LEAKY_SLOPE):
    # subgradient 1 at exactly 0
    return grad * np.where(x >= 0, 1.0, slope)


def squash(v: np.ndarray) -> np.ndarray:
    """Shrink each rank-3 capsule onto the open unit ball, keeping direction.

    out = (1 - exp(-r)) * v / r with r the capsule Frobenius norm, so the
    output norm is exactly 1 - exp(-r): near-linear for small capsules,
    saturating toward (but never reaching) 1 for large ones. The zero capsule
    maps to itself.
    """
    r = frobenius_norm(v, keepdims=True)
    # -expm1(-r) = 1 - exp(-r) without cancellation for small r
    scale = -np.expm1(-r) / np.maximum(r, NORM_FLOOR)
    return scale * v


def squash_backward(v: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """Gradient of squash with respect to its input capsule tensor.

    With f(r) = (1 - exp(-r))/r the Jacobian of one capsule is
    f * I + (f'(r)/r) * v v^T (symmetric, rank-1 correction), and
    f'(r) = exp(-r)/r - f(r)/r. The zero capsule gets zero gradient.
    """
    r = frobenius_norm(v, keepdims=True)
    r_safe = np.maximum(r, NORM_FLOOR)
    f = -np.expm1(-r) / r_safe
    fprime = np.exp(-r) / r_safe - f / r_safe
    dot = np.sum(grad * v, axis=CAPSULE_AXES, keepdims=True)
    return f * grad + (fprime / r_safe) * dot * v


@dataclass(frozen=True)
class MarginLossConfig:
    """Two-sided margin on class scores; lam downweights the absent classes."""

    m_pos: float = 0.5
    m_neg: float = 0.1
    lam: float = 0.5

    @classmethod
    def cifar(cls) -> "MarginLossConfig":
        return cls(m_pos=0.6, m_neg=0.1, lam=0.5)


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise ValueError(f"labels must be 1-D, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError("label out of range")
    t = np.zeros((labels.shape[0], num_classes))
    t[np.arange(labels.shape[0]), labels] = 1.0
    return t


def margin_loss(scores, labels, cfg: MarginLossConfig = MarginLossConfig()) -> float:
    """Mean over the batch of the summed per-class margin penalties.

    Present classes pay max(0, m_pos - s)^2, absent ones lam * max(0, s - m_neg)^2.
    """
    t = one_hot(labels, scores.shape[1])
    pos = np.maximum(0.0, cfg.m_pos - scores)
    neg = np.maximum(0.0, scores - cfg.m_neg)
    per_class = t * pos ** 2 + cfg.lam * (1.0 - t) * neg ** 2
    return float(per_class.sum(axis=1).mean())


def margin_loss_backward(scores, labels, cfg: MarginLossConfig = MarginLossConfig()):
    """d(mean batch loss)/d(scores), shape (B, K)."""
    t = one_hot(labels, scores.shape[1])
    b = scores.shape[0]
    pos = np.maximum(0.0, cfg.m_pos - scores)
    neg = np.maximum(0.0, scores - cfg.m_neg)
    return (-2.0 * t * pos + 2.0 * cfg.lam * (1.0 - t) * neg) / b


def class_scores(fmap: np.ndarray) -> np.ndarray:
    """Per-channel capsule norms of a spatially collapsed map.

    Expects (B, K, 1, 1, g, m, n) - one channel per class after the last
    layer - and returns (B, K) nonnegative scores.
    """
    if fmap.ndim != 7 or fmap.shape[2] != 1 or fmap.shape[3] != 1:
        raise ValueError(f"expected (B, K, 1, 1, g, m, n), got {fmap.shape}")
    return frobenius_norm(fmap)[:, :, 0, 0]


def class_scores_backward(fmap: np.ndarray, grad_scores: np.ndarray) -> np.ndarray:
    """Push (B, K) score gradients back onto the (B, K, 1, 1, g, m, n) map."""
    r = frobenius_norm(fmap, keepdims=True)
    g = grad_scores[:, :, None, None, None, None, None]
    return g * fmap / np.maximum(r, NORM_FLOOR)


def predict(scores: np.ndarray) -> np.ndarray:
    # argmax resolves score ties toward the lower class index
    return np.argmax(scores, axis=1)
