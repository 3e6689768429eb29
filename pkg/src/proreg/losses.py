"""Training objectives and their logit gradients.

All objectives take probability vectors ``f`` (model), ``y`` (exact
one-hot label) and ``y_zs`` (zero-shot prediction of the frozen model).
Gradients are with respect to the softmax argument, i.e. for
``f = softmax(z)``.  A model that divides its logits by a temperature
must apply the extra ``1/temperature`` factor itself.

Shapes follow :mod:`proreg.probs`: a single ``(K,)`` vector or an
``(N, K)`` batch; per-sample scalars come back with shape ``()`` or ``(N,)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .probs import (
    EPS,
    InvalidInputError,
    InvalidParameterError,
    log_softmax,
    softmax,
    true_class,
)

DEFAULT_ALPHA = 2.0


@dataclass(frozen=True)
class LossMode:
    """Which objective to train with.

    ``kind`` is one of ``"ft"``, ``"kd"`` or ``"proreg"``; ``param`` holds
    the KD weight lambda or the ProReg strength alpha.
    """

    kind: str
    param: float = 0.0

    def __post_init__(self):
        if self.kind == "ft":
            return
        if self.kind == "kd":
            if not 0.0 <= self.param <= 1.0:
                raise InvalidParameterError(f"KD lambda must be in [0, 1], got {self.param}")
        elif self.kind == "proreg":
            if not self.param > 0:
                raise InvalidParameterError(f"alpha must be > 0, got {self.param}")
        else:
            raise InvalidParameterError(f"unknown loss mode {self.kind!r}")

    @classmethod
    def ft(cls) -> LossMode:
        return cls("ft")

    @classmethod
    def kd(cls, lam: float) -> LossMode:
        return cls("kd", float(lam))

    @classmethod
    def proreg(cls, alpha: float = DEFAULT_ALPHA) -> LossMode:
        return cls("proreg", float(alpha))

    def __str__(self) -> str:
        if self.kind == "ft":
            return "ft"
        return f"{self.kind}({self.param:g})"


@dataclass(frozen=True)
class LossBreakdown:
    """Components of a combined loss.

    Every mode is expressed as ``total = (1 - weight_w) * ce + alpha * weight_w * kl``:
    FT uses ``weight_w = 0``, KD uses ``weight_w = lambda`` with ``alpha = 1``.
    Fields are floats for one sample, or arrays for a batch.
    """

    ce: float
    kl: float
    weight_w: float
    alpha: float
    total: float

    def mean(self) -> LossBreakdown:
        """Field-wise batch mean (the identity above then holds only per sample)."""
        return LossBreakdown(*(float(np.mean(v)) for v in
                               (self.ce, self.kl, self.weight_w, self.alpha, self.total)))


def _pair(a, b, names=("f", "y")):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidInputError(f"length mismatch between {names[0]} {a.shape} and {names[1]} {b.shape}")
    return a, b


def _pick(p: np.ndarray, t: np.ndarray) -> np.ndarray:
    return np.take_along_axis(p, np.asarray(t)[..., None], axis=-1)[..., 0]


def cross_entropy(f, y):
    """``-log f_t`` for the hot class ``t`` of the exact one-hot ``y``."""
    f, y = _pair(f, y)
    t = true_class(y)
    return -np.log(np.maximum(_pick(f, t), EPS))


def kl_regularizer(f, y_zs):
    """``KL(y_zs || f) = -sum_i y_zs_i log(f_i / y_zs_i)`` with both sides floored at EPS."""
    f, y_zs = _pair(f, y_zs, ("f", "y_zs"))
    q = np.maximum(y_zs, EPS)
    p = np.maximum(f, EPS)
    return np.sum(q * (np.log(q) - np.log(p)), axis=-1)


def kd_loss(f, y, y_zs, lam: float) -> LossBreakdown:
    mode = LossMode.kd(lam)
    ce = cross_entropy(f, y)
    kl = kl_regularizer(f, y_zs)
    total = (1.0 - mode.param) * ce + mode.param * kl
    return LossBreakdown(ce, kl, _like(ce, mode.param), _like(ce, 1.0), total)


def proreg_weight(f, y, y_zs):
    """Sample-wise trade-off ``w = f_t / (f_t + y_zs_t)``.

    Returns 0.5 when both probabilities are below the floor. Callers treat
    ``w`` as a constant: no gradient flows through it.
    """
    f, y = _pair(f, y)
    _, y_zs = _pair(f, y_zs, ("f", "y_zs"))
    t = true_class(y)
    ft = _pick(f, t)
    zt = _pick(y_zs, t)
    denom = ft + zt
    degenerate = denom < 2 * EPS
    w = np.where(degenerate, 0.5, ft / np.where(degenerate, 1.0, denom))
    return np.clip(w, 0.0, 1.0)


def proreg_loss(f, y, y_zs, alpha: float = DEFAULT_ALPHA) -> LossBreakdown:
    mode = LossMode.proreg(alpha)
    ce = cross_entropy(f, y)
    kl = kl_regularizer(f, y_zs)
    w = proreg_weight(f, y, y_zs)
    total = (1.0 - w) * ce + mode.param * w * kl
    return LossBreakdown(ce, kl, w, _like(ce, mode.param), total)


def loss_breakdown(mode: LossMode, f, y, y_zs) -> LossBreakdown:
    if mode.kind == "ft":
        ce = cross_entropy(f, y)
        kl = kl_regularizer(f, y_zs)
        zero = _like(ce, 0.0)
        return LossBreakdown(ce, kl, zero, _like(ce, 1.0), ce)
    if mode.kind == "kd":
        return kd_loss(f, y, y_zs, mode.param)
    if mode.kind == "proreg":
        return proreg_loss(f, y, y_zs, mode.param)
    raise InvalidParameterError(f"unknown loss mode {mode.kind!r}")


def _like(ref, value: float):
    if np.ndim(ref) == 0:
        return float(value)
    return np.full(np.shape(ref), float(value))


def grad_ce_logits(f, y) -> np.ndarray:
    """Gradient of the cross-entropy w.r.t. the softmax argument: ``f - y``."""
    f, y = _pair(f, y)
    return f - y


def grad_supplementary_logits(y, y_zs) -> np.ndarray:
    """Gradient of ``kl - ce`` w.r.t. the softmax argument: ``y - y_zs``.

    Independent of the model prediction, hence constant over training.
    """
    y, y_zs = _pair(y, y_zs, ("y", "y_zs"))
    return y - y_zs


def grad_kl_logits(f, y_zs) -> np.ndarray:
    f, y_zs = _pair(f, y_zs, ("f", "y_zs"))
    return f - y_zs


def grad_total_logits(mode: LossMode, f, y, y_zs) -> np.ndarray:
    """Logit gradient of the selected objective, with ``w`` held constant."""
    g_ce = grad_ce_logits(f, y)
    if mode.kind == "ft":
        return g_ce
    g_kl = grad_kl_logits(f, y_zs)
    if mode.kind == "kd":
        lam = mode.param
        return (1.0 - lam) * g_ce + lam * g_kl
    if mode.kind == "proreg":
        w = np.asarray(proreg_weight(f, y, y_zs))[..., None]
        return (1.0 - w) * g_ce + mode.param * w * g_kl
    raise InvalidParameterError(f"unknown loss mode {mode.kind!r}")


# Scalar losses of raw logits, computed through log-softmax without the
# probability floor. These are what the analytic gradients differentiate.

def ce_of_logits(z, y) -> float:
    return float(-np.sum(np.asarray(y) * log_softmax(z)))


def kl_of_logits(z, y_zs) -> float:
    y_zs = np.asarray(y_zs, dtype=np.float64)
    return float(np.sum(y_zs * (np.log(y_zs) - log_softmax(z))))


def total_of_logits(mode: LossMode, z, y, y_zs, w: float | None = None) -> float:
    """Scalar objective as a function of logits.

    ``w`` defaults to its value at ``z``. Pass it explicitly when
    differencing, so it stays fixed as in :func:`grad_total_logits`.
    """
    ce = ce_of_logits(z, y)
    if mode.kind == "ft":
        return ce
    kl = kl_of_logits(z, y_zs)
    if mode.kind == "kd":
        return (1.0 - mode.param) * ce + mode.param * kl
    if w is None:
        w = float(proreg_weight(softmax(z), y, y_zs))
    return (1.0 - w) * ce + mode.param * w * kl


def numerical_gradient(fn: Callable[[np.ndarray], float], x, step: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function."""
    if not step > 0:
        raise InvalidParameterError("step must be > 0")
    x = np.array(x, dtype=np.float64)
    grad = np.empty_like(x)
    flat = x.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = fn(x)
        flat[i] = orig - step
        lo = fn(x)
        flat[i] = orig
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise InvalidInputError(f"non-finite loss while differencing coordinate {i}")
        out[i] = (hi - lo) / (2 * step)
    return grad


def finite_difference_check(loss_fn, grad_fn, x, step: float = 1e-5) -> float:
    """Max absolute gap between ``grad_fn(x)`` and central differences of ``loss_fn``."""
    analytic = np.asarray(grad_fn(np.array(x, dtype=np.float64)), dtype=np.float64)
    if not np.all(np.isfinite(analytic)):
        raise InvalidInputError("analytic gradient is non-finite")
    numeric = numerical_gradient(loss_fn, x, step)
    return float(np.max(np.abs(analytic - numeric)))
