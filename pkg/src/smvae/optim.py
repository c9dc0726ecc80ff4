import numpy as np

from .errors import NumericError


def adam_step(param, grad, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update of ``param`` (in place).

    ``state`` is a dict holding ``m``, ``v`` and ``t``; it is created on the
    first call.
    """
    if grad.shape != param.shape:
        raise ValueError(f"gradient shape {grad.shape} does not match parameter shape {param.shape}")
    if not state:
        state["m"] = np.zeros_like(param)
        state["v"] = np.zeros_like(param)
        state["t"] = 0
    state["t"] += 1
    t = state["t"]
    m, v = state["m"], state["v"]
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    param -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(param.dtype, copy=False)
    return param


class Adam:
    """Adam over a dict of named parameter tensors."""

    def __init__(self, params, lr=5e-4, betas=(0.9, 0.999), eps=1e-8):
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.state = {name: {} for name in self.params}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        # Validate everything first so a bad gradient never leaves a half-updated model.
        for name, p in self.params.items():
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise NumericError(f"non-finite gradient for parameter {name!r}")
        for name, p in self.params.items():
            if p.grad is None:
                continue
            adam_step(p.data, p.grad, self.state[name], self.lr, self.beta1, self.beta2, self.eps)
