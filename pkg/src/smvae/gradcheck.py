"""Central finite-difference gradient checking."""

import numpy as np

from . import autodiff as ad

DEFAULT_STEP = 1e-5
DEFAULT_TOL = 1e-4
# Denominator floor.  Central differences at step 1e-5 carry roughly
# 2e-16 * |loss| / 1e-5 of rounding noise (~4e-10 for a loss of 20), so
# gradient elements smaller than this are compared on absolute error / floor.
GRAD_FLOOR = 1e-5


def numeric_gradient(loss_fn, tensor, step=DEFAULT_STEP):
    """d loss / d tensor by central differences; ``loss_fn()`` must rebuild the graph."""
    grad = np.zeros_like(tensor.data)
    flat = tensor.data.reshape(-1)
    out = grad.reshape(-1)
    with ad.no_grad():
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            plus = float(loss_fn().data)
            flat[j] = orig - step
            minus = float(loss_fn().data)
            flat[j] = orig
            out[j] = (plus - minus) / (2.0 * step)
    return grad


def relative_error(analytic, numeric, floor=GRAD_FLOOR):
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``; returns the worst element."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor), initial=0.0))


def check_gradients(loss_fn, params, step=DEFAULT_STEP):
    """Worst relative error per named tensor.

    ``params`` maps name -> Tensor (requires_grad).  Run in float64: with a
    float32 graph the finite differences are dominated by rounding.
    """
    for p in params.values():
        p.grad = None
    loss_fn().backward()
    report = {}
    for name, p in params.items():
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        report[name] = relative_error(analytic, numeric_gradient(loss_fn, p, step))
    return report


def micro_model_report(seed=0, aggregator="smvae", precision="f64", batch_size=6, step=DEFAULT_STEP):
    """Check every parameter tensor of the full training loss on a tiny two-modality model.

    The model has L=4, d=16, h=2; the batch mixes full and partial presence
    masks so masked code paths are exercised.  Returns name -> worst error.
    """
    from .modality import ModalityBatch, ModalitySpec
    from .model import SmvaeModel, training_loss
    from .rng import stream

    mods = [ModalitySpec("image", "binary-image", (2, 2)), ModalitySpec("label", "one-hot-label", (3,))]
    model = SmvaeModel(mods, latent_dim=4, embed_dim=16, heads=2, aggregator=aggregator, seed=seed, precision=precision)
    rng = stream(seed, "data")
    images = (rng.random((batch_size, 2, 2)) < 0.5).astype(np.float64)
    labels = np.eye(3)[rng.integers(0, 3, batch_size)]
    mask = np.ones((batch_size, 2), dtype=bool)
    mask[0, 1] = mask[1, 0] = False
    batch = ModalityBatch([images, labels], mask)

    def loss_fn():
        return training_loss(model, batch, stream(seed, "train"), beta=0.7, gamma=1e-3)[0]

    return check_gradients(loss_fn, model.params, step)
