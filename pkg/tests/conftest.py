import numpy as np
import pytest

from hmlstm.cells import CellFlags
from hmlstm.model import Model, ModelConfig


def central_diff(f, x, eps=1e-5):
    """Finite-difference gradient of scalar ``f(x)``; ``x`` is perturbed in place and restored."""
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + eps
        hi = f(x)
        x[i] = old - eps
        lo = f(x)
        x[i] = old
        g[i] = (hi - lo) / (2 * eps)
    return g


def rel_err(a, b, floor=1e-6):
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_config(arch="hmlstm", **kw):
    base = dict(arch=arch, units=8, embed_dim=5, output_dim=6, vocab_size=7, dtype="float64",
                flags=CellFlags(use_layer_norm=True))
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def tiny_model():
    return Model(tiny_config())
