import numpy as np
import pytest

from smvae.modality import ModalityBatch, ModalitySpec
from smvae.model import SmvaeModel
from smvae.rng import stream


def small_model(aggregator="smvae", precision="f64", seed=0, latent_dim=3, embed_dim=8, heads=2, modalities=None):
    modalities = modalities or [
        ModalitySpec("image", "binary-image", (2, 3)),
        ModalitySpec("label", "one-hot-label", (4,)),
        ModalitySpec("vec", "real-vector", (2,)),
    ]
    return SmvaeModel(modalities, latent_dim=latent_dim, embed_dim=embed_dim, heads=heads,
                      aggregator=aggregator, seed=seed, precision=precision)


def random_batch(model, n=5, seed=0, mask_rate=0.0):
    """Data matching every modality of ``model``; optional random missingness (never empty rows)."""
    rng = stream(seed, "data", 99)
    data = []
    for m in model.modalities:
        if m.likelihood == "bernoulli":
            data.append((rng.random((n,) + m.shape) < 0.5).astype(float))
        elif m.likelihood == "categorical":
            data.append(np.eye(m.flat_dim)[rng.integers(0, m.flat_dim, n)])
        else:
            data.append(rng.standard_normal((n,) + m.shape))
    mask = rng.random((n, model.n_modalities)) >= mask_rate
    empty = ~mask.any(axis=1)
    mask[empty, rng.integers(0, model.n_modalities, empty.sum())] = True
    return ModalityBatch(data, mask)


@pytest.fixture
def model64():
    return small_model()


@pytest.fixture
def batch64(model64):
    return random_batch(model64, n=6, mask_rate=0.3)


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
