"""Linear classification head trained over fixed features.

``probs = softmax((W x + b) / temperature)``. Only the head is trained.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .fileio import (
    CRC_SIZE,
    DIGEST_SIZE,
    FileFormatError,
    canonical_json,
    crc32_bytes,
    open_frame,
    read_checked,
    seal,
    verify_digest,
    write_atomic,
)
from .losses import LossBreakdown, LossMode, grad_total_logits, loss_breakdown
from .probs import (
    DEFAULT_TEMPERATURE,
    InvalidInputError,
    InvalidParameterError,
    check_temperature,
    normalize,
    softmax,
)

CHECKPOINT_MAGIC = b"PRCK"
CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class LinearModel:
    weights: np.ndarray   # (K, D)
    bias: np.ndarray      # (K,)
    temperature: float = DEFAULT_TEMPERATURE

    def __post_init__(self):
        check_temperature(self.temperature)
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise InvalidInputError("weights must be (K, D) and bias (K,)")
        if not (np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.bias))):
            raise InvalidInputError("model parameters must be finite")

    @property
    def class_count(self) -> int:
        return self.weights.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.weights.shape[1]

    def same_as(self, other: LinearModel) -> bool:
        return (self.temperature == other.temperature
                and self.weights.tobytes() == other.weights.tobytes()
                and self.bias.tobytes() == other.bias.tobytes())


def forward(model: LinearModel, x) -> tuple[np.ndarray, np.ndarray]:
    """Logits ``W x + b`` and their tempered softmax, for one row or a batch."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != model.feature_dim:
        raise InvalidInputError(f"expected {model.feature_dim}-dim input, got {x.shape[-1]}")
    logits = x @ model.weights.T + model.bias
    return logits, softmax(logits, model.temperature)


def predict(model: LinearModel, x) -> np.ndarray:
    return forward(model, x)[1]


def init_ft(feature_dim: int, class_count: int, seed: int,
            temperature: float = DEFAULT_TEMPERATURE) -> LinearModel:
    """Random head: weights uniform on ``[-1/sqrt(D), 1/sqrt(D)]``, zero bias."""
    if feature_dim <= 0 or class_count <= 0:
        raise InvalidParameterError("dimensions must be positive")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0x1417])))
    bound = 1.0 / np.sqrt(feature_dim)
    w = rng.uniform(-bound, bound, size=(class_count, feature_dim))
    return LinearModel(w, np.zeros(class_count), temperature)


def init_ft_plus(class_embeddings, temperature: float = DEFAULT_TEMPERATURE,
                 class_count: int | None = None) -> LinearModel:
    """Head whose rows are the (unit-normalized) zero-shot class embeddings."""
    emb = normalize(np.asarray(class_embeddings, dtype=np.float64))
    if emb.ndim != 2:
        raise InvalidInputError("class embeddings must be a (K, D) matrix")
    if class_count is not None and emb.shape[0] != class_count:
        raise InvalidParameterError(f"got {emb.shape[0]} embeddings for {class_count} classes")
    return LinearModel(emb.copy(), np.zeros(emb.shape[0]), temperature)


# --- optimization ----------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    mode: LossMode = field(default_factory=LossMode.ft)
    optimizer: str = "adamw"          # "adamw" or "momentum"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    momentum: float = 0.9
    epochs: int = 10
    batch_size: int = 64
    warmup: bool = False              # linear warmup over the first 10% of steps
    max_steps: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.optimizer not in ("adamw", "momentum"):
            raise InvalidParameterError(f"unknown optimizer {self.optimizer!r}")
        if self.lr < 0 or self.weight_decay < 0:
            raise InvalidParameterError("lr and weight_decay must be >= 0")
        if self.epochs < 0 or self.batch_size <= 0:
            raise InvalidParameterError("epochs must be >= 0 and batch_size > 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mode"] = {"kind": self.mode.kind, "param": self.mode.param}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        d = dict(d)
        if "mode" in d and isinstance(d["mode"], dict):
            d["mode"] = LossMode(d["mode"]["kind"], float(d["mode"].get("param", 0.0)))
        return cls(**d)


@dataclass(frozen=True, eq=False)
class OptimizerState:
    first_w: np.ndarray
    first_b: np.ndarray
    second_w: np.ndarray
    second_b: np.ndarray
    step: int = 0

    @classmethod
    def zeros_like(cls, model: LinearModel) -> OptimizerState:
        zw = np.zeros_like(model.weights)
        zb = np.zeros_like(model.bias)
        return cls(zw, zb, zw.copy(), zb.copy(), 0)


def parameter_gradients(model: LinearModel, x, y, y_zs, mode: LossMode):
    """Mean-over-batch gradients of the objective w.r.t. ``(W, b)``.

    Returns ``(grad_w, grad_b, breakdown)``; ``w`` is recomputed from the
    current forward pass and treated as a constant.
    """
    _, f = forward(model, x)
    g = grad_total_logits(mode, f, y, y_zs) / model.temperature
    n = x.shape[0]
    return g.T @ x / n, g.sum(axis=0) / n, loss_breakdown(mode, f, y, y_zs)


def _lr_at(config: TrainConfig, step: int, total_steps: int) -> float:
    if not config.warmup:
        return config.lr
    warm = max(1, int(0.1 * total_steps))
    return config.lr * min(1.0, step / warm)


def train_step(model: LinearModel, x, y, y_zs, config: TrainConfig,
               state: OptimizerState, total_steps: int | None = None):
    """One update on a batch. Returns ``(model, state, mean LossBreakdown)``."""
    if len(x) == 0:
        raise InvalidInputError("empty batch")
    gw, gb, parts = parameter_gradients(model, x, y, y_zs, config.mode)
    parts = parts.mean()
    if not np.isfinite(parts.total) or not (np.all(np.isfinite(gw)) and np.all(np.isfinite(gb))):
        raise TrainingError(
            f"non-finite loss at step {state.step + 1}: ce={parts.ce}, kl={parts.kl}, "
            f"w={parts.weight_w}, total={parts.total}"
        )
    step = state.step + 1
    lr = _lr_at(config, step, total_steps or step)
    w, b = model.weights, model.bias
    if config.optimizer == "adamw":
        b1, b2 = config.beta1, config.beta2
        m_w = b1 * state.first_w + (1 - b1) * gw
        m_b = b1 * state.first_b + (1 - b1) * gb
        v_w = b2 * state.second_w + (1 - b2) * gw * gw
        v_b = b2 * state.second_b + (1 - b2) * gb * gb
        c1 = 1 - b1 ** step
        c2 = 1 - b2 ** step
        # Decoupled decay on the weight matrix only.
        w = w * (1 - lr * config.weight_decay) - lr * (m_w / c1) / (np.sqrt(v_w / c2) + config.adam_eps)
        b = b - lr * (m_b / c1) / (np.sqrt(v_b / c2) + config.adam_eps)
        state = OptimizerState(m_w, m_b, v_w, v_b, step)
    else:
        mu = config.momentum
        m_w = mu * state.first_w + gw + config.weight_decay * w
        m_b = mu * state.first_b + gb
        w = w - lr * m_w
        b = b - lr * m_b
        state = OptimizerState(m_w, m_b, state.second_w, state.second_b, step)
    return LinearModel(w, b, model.temperature), state, parts


@dataclass
class TrainHistory:
    losses: list[LossBreakdown] = field(default_factory=list)

    @property
    def totals(self) -> list[float]:
        return [p.total for p in self.losses]


def train(model: LinearModel, x, labels, y_zs, config: TrainConfig):
    """Minibatch training with a per-epoch shuffle drawn from ``config.seed``.

    ``labels`` are integer class indices; ``y_zs`` are the cached zero-shot
    predictions (may be None for FT). Returns ``(model, history)``.
    """
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels)
    y = np.eye(model.class_count)[labels]
    if y_zs is None:
        if config.mode.kind != "ft":
            raise InvalidInputError(f"{config.mode} needs cached zero-shot labels")
        y_zs = y
    y_zs = np.asarray(y_zs, dtype=np.float64)
    n = len(labels)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([config.seed, 0x5EED])))
    per_epoch = -(-n // config.batch_size)
    total = per_epoch * config.epochs
    if config.max_steps is not None:
        total = min(total, config.max_steps)
    state = OptimizerState.zeros_like(model)
    history = TrainHistory()
    while state.step < total:
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            if state.step >= total:
                break
            idx = order[start:start + config.batch_size]
            model, state, parts = train_step(model, x[idx], y[idx], y_zs[idx], config, state, total)
            history.losses.append(parts)
    return model, history


# --- checkpoints -----------------------------------------------------------

def config_hash(config) -> bytes:
    payload = config if isinstance(config, (dict, list)) else config.to_dict()
    return hashlib.sha256(canonical_json(payload)).digest()


_CKPT_HEAD = struct.Struct("<4sHHId32s")


def checkpoint_bytes(model: LinearModel, config_digest: bytes = b"\0" * 32) -> bytes:
    if len(config_digest) != 32:
        raise ValueError("config digest must be 32 bytes")
    head = _CKPT_HEAD.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, model.class_count,
                           model.feature_dim, model.temperature, config_digest)
    head += crc32_bytes(head)
    body = (np.ascontiguousarray(model.weights, dtype="<f8").tobytes()
            + np.ascontiguousarray(model.bias, dtype="<f8").tobytes())
    return seal(head + body)


def model_from_checkpoint_bytes(data: bytes) -> tuple[LinearModel, bytes]:
    """Parse a checkpoint; returns the model and the producing config's hash."""
    open_frame(data, CHECKPOINT_MAGIC, (CHECKPOINT_VERSION,))
    _, _, k, d, temperature, digest = _CKPT_HEAD.unpack(read_checked(data, 0, _CKPT_HEAD.size))
    off = _CKPT_HEAD.size + CRC_SIZE
    verify_digest(data, off + 8 * (k * d + k) + DIGEST_SIZE)
    w = np.frombuffer(data, dtype="<f8", count=k * d, offset=off).reshape(k, d).astype(np.float64)
    b = np.frombuffer(data, dtype="<f8", count=k, offset=off + 8 * k * d).astype(np.float64)
    try:
        return LinearModel(w, b, temperature), digest
    except (InvalidInputError, InvalidParameterError) as exc:
        raise FileFormatError(f"invalid checkpoint contents: {exc}") from exc


def save_checkpoint(model: LinearModel, path, config=None) -> None:
    digest = config_hash(config) if config is not None else b"\0" * 32
    write_atomic(path, checkpoint_bytes(model, digest))


def load_checkpoint(path) -> tuple[LinearModel, bytes]:
    return model_from_checkpoint_bytes(Path(path).read_bytes())


def with_temperature(model: LinearModel, temperature: float) -> LinearModel:
    return replace(model, temperature=temperature)
