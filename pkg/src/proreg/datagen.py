"""Synthetic classification data with a planted contextual shortcut.

Each feature vector is ``[semantic block | context block]``, unit-normalized.
Class ``k`` owns a semantic direction ``s_k`` and a context direction
``c_k``. The semantic block is ``s_k`` plus Gaussian noise; the context
block is ``c_k`` with probability ``bias_strength`` (train and ID test) or
``ood_bias`` (OOD test), otherwise the context of a uniformly drawn other
class. The two blocks occupy disjoint coordinates, so every context
direction is orthogonal to every semantic direction.

Randomness comes from numpy's PCG64 generator. ``SeedSequence(seed)`` is
spawned into four independent streams: planted directions, train,
id_test and ood_test.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .fileio import (
    CRC_SIZE,
    DIGEST_SIZE,
    ChecksumError,
    FileFormatError,
    TruncatedFileError,
    canonical_json,
    crc32_bytes,
    digest_ok,
    open_frame,
    read_checked,
    seal,
    verify_digest,
    write_atomic,
)
from .probs import InvalidParameterError, normalize

SPLITS = ("train", "id_test", "ood_test")
SPLIT_CODES = {name: i for i, name in enumerate(SPLITS)}

DATASET_MAGIC = b"PRDS"
DATASET_VERSION = 2
READABLE_VERSIONS = (1, 2)
UNKNOWN_CONTEXT = 0xFFFF
_FLAG_HAS_ZERO_SHOT = 1


@dataclass(frozen=True)
class BiasSpec:
    class_count: int = 5
    semantic_dim: int = 10
    context_dim: int = 10
    train_size: int = 2000
    id_test_size: int = 1000
    ood_test_size: int = 1000
    bias_strength: float = 0.95
    # None means 1 / class_count, i.e. an uninformative context.
    ood_bias: float | None = None
    adversarial: bool = False
    noise_std: float = 0.4
    seed: int = 0

    def __post_init__(self):
        for name in ("class_count", "semantic_dim", "context_dim",
                     "train_size", "id_test_size", "ood_test_size"):
            if int(getattr(self, name)) <= 0:
                raise InvalidParameterError(f"{name} must be positive")
        if self.class_count < 2:
            raise InvalidParameterError("need at least two classes")
        if self.class_count >= UNKNOWN_CONTEXT:
            raise InvalidParameterError("too many classes for the file format")
        if not 0.0 <= self.bias_strength <= 1.0:
            raise InvalidParameterError("bias_strength must be in [0, 1]")
        if self.ood_bias is not None and not 0.0 <= self.ood_bias <= 1.0:
            raise InvalidParameterError("ood_bias must be in [0, 1]")
        if self.noise_std < 0:
            raise InvalidParameterError("noise_std must be >= 0")

    @property
    def feature_dim(self) -> int:
        return self.semantic_dim + self.context_dim

    @property
    def effective_ood_bias(self) -> float:
        if self.adversarial:
            return 0.0
        if self.ood_bias is None:
            return 1.0 / self.class_count
        return self.ood_bias

    def split_size(self, split: str) -> int:
        return getattr(self, f"{split}_size")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> BiasSpec:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidParameterError(f"unknown BiasSpec fields: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class SplitView:
    """Arrays for one split; rows align across fields."""

    x: np.ndarray
    labels: np.ndarray
    contexts: np.ndarray
    y_zs: np.ndarray | None

    def __len__(self) -> int:
        return len(self.labels)


@dataclass(frozen=True, eq=False)
class Dataset:
    spec: BiasSpec
    x: np.ndarray          # (N, D) float64, unit rows
    labels: np.ndarray     # (N,) int64
    contexts: np.ndarray   # (N,) int64, UNKNOWN_CONTEXT if not recorded
    splits: np.ndarray     # (N,) uint8 codes into SPLITS
    y_zs: np.ndarray | None = None
    oracle_meta: dict | None = None
    notes: tuple[str, ...] = field(default=())

    @property
    def class_count(self) -> int:
        return self.spec.class_count

    @property
    def feature_dim(self) -> int:
        return self.x.shape[1]

    def split(self, name: str) -> SplitView:
        mask = self.splits == SPLIT_CODES[name]
        return SplitView(
            self.x[mask],
            self.labels[mask],
            self.contexts[mask],
            None if self.y_zs is None else self.y_zs[mask],
        )

    def with_zero_shot(self, y_zs: np.ndarray, oracle_meta: dict | None) -> Dataset:
        y_zs = np.array(y_zs, dtype=np.float64)
        y_zs.setflags(write=False)
        return replace(self, y_zs=y_zs, oracle_meta=oracle_meta)

    def identical(self, other: Dataset) -> bool:
        """Bit-level equality of all arrays and metadata."""
        def same(a, b):
            if a is None or b is None:
                return a is None and b is None
            return a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes()

        return (
            self.spec == other.spec
            and same(self.x, other.x)
            and same(self.labels, other.labels)
            and same(self.contexts, other.contexts)
            and same(self.splits, other.splits)
            and same(self.y_zs, other.y_zs)
            and self.oracle_meta == other.oracle_meta
        )


def _unit_directions(rng: np.random.Generator, count: int, dim: int) -> np.ndarray:
    """``count`` unit vectors in R^dim, orthonormal whenever count <= dim."""
    g = rng.standard_normal((dim, count))
    if count <= dim:
        q, r = np.linalg.qr(g)
        q = q * np.sign(np.diag(r))
        return q.T.copy()
    return normalize(g.T)


def _streams(seed: int) -> list[np.random.Generator]:
    return [np.random.Generator(np.random.PCG64(s))
            for s in np.random.SeedSequence(seed).spawn(1 + len(SPLITS))]


def planted_directions(spec: BiasSpec) -> tuple[np.ndarray, np.ndarray]:
    """Semantic ``(K, semantic_dim)`` and context ``(K, context_dim)`` directions."""
    rng = _streams(spec.seed)[0]
    semantic = _unit_directions(rng, spec.class_count, spec.semantic_dim)
    context = _unit_directions(rng, spec.class_count, spec.context_dim)
    return semantic, context


def _draw_split(rng, spec: BiasSpec, n: int, agree: float, semantic, context):
    k = spec.class_count
    labels = rng.permutation(np.arange(n) % k)
    agrees = rng.random(n) < agree
    # Uniform over the other K - 1 classes.
    offset = rng.integers(1, k, size=n)
    contexts = np.where(agrees, labels, (labels + offset) % k)
    sem = semantic[labels] + spec.noise_std * rng.standard_normal((n, spec.semantic_dim))
    x = normalize(np.hstack([sem, context[contexts]]))
    return x, labels.astype(np.int64), contexts.astype(np.int64)


def generate(spec: BiasSpec) -> Dataset:
    streams = _streams(spec.seed)
    semantic, context = planted_directions(spec)
    agree = {"train": spec.bias_strength, "id_test": spec.bias_strength,
             "ood_test": spec.effective_ood_bias}
    xs, ys, cs, ss = [], [], [], []
    for code, name in enumerate(SPLITS):
        x, y, c = _draw_split(streams[1 + code], spec, spec.split_size(name),
                              agree[name], semantic, context)
        xs.append(x)
        ys.append(y)
        cs.append(c)
        ss.append(np.full(len(y), code, dtype=np.uint8))
    return _frozen(Dataset(spec, np.vstack(xs), np.concatenate(ys),
                           np.concatenate(cs), np.concatenate(ss)))


def _frozen(ds: Dataset) -> Dataset:
    for arr in (ds.x, ds.labels, ds.contexts, ds.splits, ds.y_zs):
        if arr is not None:
            arr.setflags(write=False)
    return ds


# --- persistence -----------------------------------------------------------

def _record_dtype(version: int, dim: int, k: int, with_zs: bool) -> np.dtype:
    if version == 1:
        return np.dtype([("index", "<u4"), ("split", "u1"), ("label", "<u2"),
                         ("x", "<f8", (dim,))])
    cols = [("index", "<u4"), ("split", "u1"), ("label", "<u2"),
            ("context", "<u2"), ("x", "<f8", (dim,))]
    if with_zs:
        cols.append(("y_zs", "<f8", (k,)))
    return np.dtype(cols)


def to_bytes(ds: Dataset) -> bytes:
    n, dim = ds.x.shape
    k = ds.class_count
    with_zs = ds.y_zs is not None
    header = canonical_json({
        "spec": ds.spec.to_dict(),
        "class_count": k,
        "feature_dim": dim,
        "n_samples": n,
        "oracle": ds.oracle_meta,
    })
    rec = np.zeros(n, dtype=_record_dtype(DATASET_VERSION, dim, k, with_zs))
    rec["index"] = np.arange(n)
    rec["split"] = ds.splits
    rec["label"] = ds.labels
    rec["context"] = ds.contexts
    rec["x"] = ds.x
    if with_zs:
        rec["y_zs"] = ds.y_zs
    flags = _FLAG_HAS_ZERO_SHOT if with_zs else 0
    prefix = DATASET_MAGIC + struct.pack("<HHI", DATASET_VERSION, flags, len(header))
    payload = (prefix + crc32_bytes(prefix) + header + crc32_bytes(header) + rec.tobytes())
    return seal(payload)


def from_bytes(data: bytes) -> Dataset:
    version = open_frame(data, DATASET_MAGIC, READABLE_VERSIONS)
    if version == 1:
        return _from_bytes_v1(data)
    prefix = read_checked(data, 0, 12)
    _, flags, hlen = struct.unpack_from("<HHI", prefix, 4)
    header = _parse_header(read_checked(data, 16, hlen))
    body_start = 16 + hlen + CRC_SIZE
    with_zs = bool(flags & _FLAG_HAS_ZERO_SHOT)
    dtype = _record_dtype(2, header["feature_dim"], header["class_count"], with_zs)
    n = header["n_samples"]
    verify_digest(data, body_start + n * dtype.itemsize + DIGEST_SIZE)
    rec = np.frombuffer(data, dtype=dtype, count=n, offset=body_start)
    _check_index(rec)
    ds = Dataset(
        BiasSpec.from_dict(header["spec"]),
        rec["x"].astype(np.float64),
        rec["label"].astype(np.int64),
        rec["context"].astype(np.int64),
        rec["split"].astype(np.uint8),
        rec["y_zs"].astype(np.float64) if with_zs else None,
        header.get("oracle"),
    )
    return _frozen(ds)


def _from_bytes_v1(data: bytes) -> Dataset:
    # v1: magic | u16 version | u32 header length | header | records | crc32
    if len(data) < 10:
        raise FileFormatError("file shorter than its header")
    (hlen,) = struct.unpack_from("<I", data, 6)
    header, body_start = _read_header(data, 10, hlen, digest_size=4, algorithm="crc32")
    dtype = _record_dtype(1, header["feature_dim"], header["class_count"], False)
    n = header["n_samples"]
    verify_digest(data, body_start + n * dtype.itemsize + 4, digest_size=4, algorithm="crc32")
    rec = np.frombuffer(data, dtype=dtype, count=n, offset=body_start)
    _check_index(rec)
    ds = Dataset(
        BiasSpec.from_dict(header["spec"]),
        rec["x"].astype(np.float64),
        rec["label"].astype(np.int64),
        np.full(n, UNKNOWN_CONTEXT, dtype=np.int64),
        rec["split"].astype(np.uint8),
        notes=("read from format v1: context tags were not recorded and no "
               "zero-shot labels are cached; re-saving writes format v2",),
    )
    return _frozen(ds)


def _parse_header(raw: bytes) -> dict:
    try:
        header = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FileFormatError(f"unreadable header ({exc})") from exc
    for key in ("class_count", "feature_dim", "n_samples"):
        if not isinstance(header.get(key), int) or header[key] < 0:
            raise FileFormatError(f"header field {key!r} missing or invalid")
    return header


def _read_header(data: bytes, start: int, hlen: int, **digest) -> tuple[dict, int]:
    # v1 headers have no CRC of their own; the whole-file digest decides.
    end = start + hlen
    if len(data) < end:
        raise TruncatedFileError("file ends inside the header")
    try:
        return _parse_header(bytes(data[start:end])), end
    except FileFormatError as exc:
        if not digest_ok(data, **digest):
            raise ChecksumError(f"checksum mismatch: unreadable header ({exc})") from exc
        raise


def _check_index(rec) -> None:
    if not np.array_equal(rec["index"], np.arange(len(rec))):
        raise FileFormatError("record indices are not 0..N-1")


def save(ds: Dataset, path) -> None:
    write_atomic(path, to_bytes(ds))


def load(path) -> Dataset:
    return from_bytes(Path(path).read_bytes())


def export_jsonl(ds: Dataset, path) -> None:
    """Human-readable dump, one JSON object per sample."""
    with open(path, "w", encoding="utf-8") as fh:
        for i in range(len(ds.labels)):
            row = {
                "index": i,
                "split": SPLITS[ds.splits[i]],
                "label": int(ds.labels[i]),
                "context": None if ds.contexts[i] == UNKNOWN_CONTEXT else int(ds.contexts[i]),
                "x": ds.x[i].tolist(),
                "y_zs": None if ds.y_zs is None else ds.y_zs[i].tolist(),
            }
            fh.write(json.dumps(row) + "\n")
