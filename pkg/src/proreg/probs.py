"""Probability, logit and similarity primitives.

Vectors are plain float64 numpy arrays. Every function accepts a single
vector of shape ``(K,)`` or a batch of shape ``(N, K)``; the class axis is
always the last one.
"""

from __future__ import annotations

import numpy as np

EPS = 1e-7
DEFAULT_TEMPERATURE = 0.01


class InvalidInputError(ValueError):
    """Raised for malformed vectors: non-finite entries, bad shapes, zero norms."""


class InvalidParameterError(ValueError):
    """Raised for out-of-range scalar parameters (temperature, weights, ...)."""


def _as_float_array(values, name: str = "input") -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim == 0:
        raise InvalidInputError(f"{name} must be a vector, got a scalar")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} contains non-finite entries")
    return arr


def check_temperature(temperature: float) -> float:
    temperature = float(temperature)
    if not np.isfinite(temperature) or temperature <= 0:
        raise InvalidParameterError(f"temperature must be > 0, got {temperature}")
    return temperature


def softmax(logits, temperature: float = 1.0) -> np.ndarray:
    """Temperature-scaled softmax over the last axis.

    Uses max-subtraction, so arbitrarily large finite logits are safe.
    """
    z = _as_float_array(logits, "logits")
    if z.shape[-1] < 2:
        raise InvalidInputError("need at least two classes")
    temperature = check_temperature(temperature)
    z = z / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits, temperature: float = 1.0) -> np.ndarray:
    z = _as_float_array(logits, "logits")
    temperature = check_temperature(temperature)
    z = z / temperature
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def normalize(x, axis: int = -1) -> np.ndarray:
    """Scale to unit L2 norm along ``axis``; zero vectors are rejected."""
    x = _as_float_array(x, "embedding")
    norm = np.linalg.norm(x, axis=axis, keepdims=True)
    if np.any(norm == 0):
        raise InvalidInputError("cannot normalize a zero-norm vector")
    return x / norm


def cosine_scores(x, class_embeddings) -> np.ndarray:
    """Cosine similarity of ``x`` (one or many rows) against each class embedding.

    Both sides are normalized here, so callers may pass raw vectors.
    Returns shape ``(K,)`` for a single ``x`` and ``(N, K)`` for a batch.
    """
    x = _as_float_array(x, "x")
    w = _as_float_array(class_embeddings, "class_embeddings")
    if w.ndim != 2:
        raise InvalidInputError("class_embeddings must be a (K, D) matrix")
    if x.shape[-1] != w.shape[1]:
        raise InvalidInputError(
            f"dimension mismatch: x has {x.shape[-1]}, embeddings have {w.shape[1]}"
        )
    scores = normalize(x) @ normalize(w).T
    return np.clip(scores, -1.0, 1.0)


def clamp_to_simplex(p, eps: float = EPS) -> np.ndarray:
    """Floor entries at ``eps`` and renormalize onto the simplex."""
    p = _as_float_array(p, "p")
    if np.any(p < 0):
        raise InvalidInputError("probabilities must be non-negative")
    total = p.sum(axis=-1, keepdims=True)
    if np.any(total <= 0):
        raise InvalidInputError("cannot renormalize an all-zero vector")
    p = np.maximum(p / total, eps)
    return p / p.sum(axis=-1, keepdims=True)


def one_hot(labels, class_count: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if np.any(labels < 0) or np.any(labels >= class_count):
        raise InvalidInputError("label out of range")
    out = np.zeros(labels.shape + (class_count,))
    np.put_along_axis(out, labels[..., None], 1.0, axis=-1)
    return out


def true_class(y) -> np.ndarray:
    """Index of the hot entry of an exact one-hot vector (or batch of them)."""
    y = _as_float_array(y, "y")
    hot = y == 1.0
    if not (np.all((y == 0.0) | hot) and np.all(hot.sum(axis=-1) == 1)):
        raise InvalidInputError("y must be an exact one-hot vector")
    return hot.argmax(axis=-1)


def is_prob_vector(p, atol: float = 1e-9) -> bool:
    p = np.asarray(p, dtype=np.float64)
    return bool(
        np.all(np.isfinite(p))
        and np.all(p >= 0)
        and np.allclose(p.sum(axis=-1), 1.0, rtol=0, atol=atol)
    )
