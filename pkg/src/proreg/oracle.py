"""Frozen zero-shot predictor standing in for a prompted pretrained model.

Class embeddings are the generator's planted semantic directions, padded
with zeros over the context block, so the prediction never depends on
context coordinates. ``sigma`` optionally blurs each embedding with a
seeded perturbation of that norm, which makes the oracle less accurate
in-domain while keeping it context-blind.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .datagen import BiasSpec, Dataset, planted_directions
from .fileio import write_atomic
from .probs import DEFAULT_TEMPERATURE, InvalidParameterError, check_temperature, cosine_scores, normalize, softmax

ORACLE_FORMAT = "proreg-oracle"
ORACLE_VERSION = 1


@dataclass(frozen=True, eq=False)
class ZeroShotOracle:
    class_embeddings: np.ndarray   # (K, D), unit rows, zero on context dims
    temperature: float
    semantic_dim: int
    sigma: float = 0.0
    seed: int = 0

    @property
    def class_count(self) -> int:
        return self.class_embeddings.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.class_embeddings.shape[1]

    def scores(self, x) -> np.ndarray:
        return cosine_scores(x, self.class_embeddings)

    def predict(self, x) -> np.ndarray:
        return softmax(self.scores(x), self.temperature)

    def to_dict(self) -> dict:
        return {
            "format": ORACLE_FORMAT,
            "version": ORACLE_VERSION,
            "temperature": self.temperature,
            "semantic_dim": self.semantic_dim,
            "sigma": self.sigma,
            "seed": self.seed,
            "class_embeddings": self.class_embeddings.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> ZeroShotOracle:
        if d.get("format") != ORACLE_FORMAT:
            raise ValueError(f"not an oracle description: format={d.get('format')!r}")
        if d.get("version") != ORACLE_VERSION:
            raise ValueError(f"unsupported oracle version {d.get('version')!r}")
        emb = np.array(d["class_embeddings"], dtype=np.float64)
        emb.setflags(write=False)
        return cls(emb, float(d["temperature"]), int(d["semantic_dim"]),
                   float(d["sigma"]), int(d["seed"]))


def zero_shot_predict(oracle: ZeroShotOracle, x) -> np.ndarray:
    return oracle.predict(x)


def build_oracle(spec: BiasSpec, sigma: float = 0.0, seed: int = 0,
                 temperature: float = DEFAULT_TEMPERATURE) -> ZeroShotOracle:
    """Oracle derived from ``spec`` alone; it never sees sampled data or labels."""
    if sigma < 0:
        raise InvalidParameterError(f"sigma must be >= 0, got {sigma}")
    temperature = check_temperature(temperature)
    semantic, _ = planted_directions(spec)
    if sigma > 0:
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0x0AC1E])))
        blur = normalize(rng.standard_normal(semantic.shape))
        semantic = normalize(semantic + sigma * blur)
    emb = np.zeros((spec.class_count, spec.feature_dim))
    emb[:, : spec.semantic_dim] = semantic
    emb.setflags(write=False)
    return ZeroShotOracle(emb, temperature, spec.semantic_dim, float(sigma), int(seed))


def cache_zero_shot_labels(oracle: ZeroShotOracle, dataset: Dataset) -> Dataset:
    """Attach the oracle's prediction for every sample, computed once up front."""
    if dataset.feature_dim != oracle.feature_dim:
        raise InvalidParameterError(
            f"oracle expects {oracle.feature_dim}-dim features, dataset has {dataset.feature_dim}"
        )
    return dataset.with_zero_shot(oracle.predict(dataset.x), oracle.to_dict())


def oracle_from_dataset(dataset: Dataset) -> ZeroShotOracle | None:
    if dataset.oracle_meta is None:
        return None
    return ZeroShotOracle.from_dict(dataset.oracle_meta)


def save_oracle(oracle: ZeroShotOracle, path) -> None:
    write_atomic(path, (json.dumps(oracle.to_dict(), indent=1) + "\n").encode("utf-8"))


def load_oracle(path) -> ZeroShotOracle:
    return ZeroShotOracle.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
