import numpy as np
import pytest

from dfan.data import SynthSpec, generate_synthetic
from dfan.training import TrainConfig, train


def numeric_grad(f, x, step=1e-3):
    """Central differences of scalar ``f()`` with respect to array ``x`` (mutated in place)."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = f()
        flat[i] = orig - step
        down = f()
        flat[i] = orig
        g.flat[i] = (up - down) / (2 * step)
    return g


def rel_error(analytic, numeric):
    scale = max(np.abs(numeric).max(), 1e-8)
    return float(np.abs(analytic - numeric).max() / scale)


@pytest.fixture(scope="session")
def small_synth():
    return generate_synthetic(SynthSpec(n_seen=4, n_unseen=2, samples_per_class=10, M=6, N=4, D=8, seed=3))


@pytest.fixture(scope="session")
def reference_synth():
    return generate_synthetic(SynthSpec())


@pytest.fixture(scope="session")
def reference_model(reference_synth):
    d = reference_synth
    params, history = train(d.train, d.semantic, d.split, TrainConfig())
    return params, history
