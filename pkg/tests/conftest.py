import json
import struct
import zlib

import numpy as np
import pytest

from proreg.datagen import BiasSpec, generate


@pytest.fixture
def small_spec():
    return BiasSpec(class_count=3, semantic_dim=4, context_dim=4,
                    train_size=60, id_test_size=30, ood_test_size=30, seed=7)


@pytest.fixture
def small_dataset(small_spec):
    return generate(small_spec)


def random_simplex(rng, k, size=None, interior=True):
    """Dirichlet draws, kept away from the simplex boundary when ``interior``."""
    shape = (k,) if size is None else (size, k)
    p = rng.dirichlet(np.ones(k), size=size)
    if interior:
        p = np.clip(p, 1e-3, None)
        p = p / p.sum(axis=-1, keepdims=True)
    return p.reshape(shape)


def legacy_v1_bytes(ds) -> bytes:
    """Encode ``ds`` the way the v1 writer did (no contexts, no y_zs, CRC32)."""
    n, dim = ds.x.shape
    header = json.dumps({"spec": ds.spec.to_dict(), "class_count": ds.class_count,
                         "feature_dim": dim, "n_samples": n},
                        sort_keys=True, separators=(",", ":")).encode()
    rec = np.zeros(n, dtype=[("index", "<u4"), ("split", "u1"), ("label", "<u2"),
                             ("x", "<f8", (dim,))])
    rec["index"] = np.arange(n)
    rec["split"] = ds.splits
    rec["label"] = ds.labels
    rec["x"] = ds.x
    payload = b"PRDS" + struct.pack("<HI", 1, len(header)) + header + rec.tobytes()
    return payload + struct.pack("<I", zlib.crc32(payload))


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
