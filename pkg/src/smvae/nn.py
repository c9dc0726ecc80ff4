"""Parameter containers for the few layer types the model uses."""

import numpy as np

from . import autodiff as ad


class ParamStore:
    """Ordered name -> Tensor registry shared by every sub-network of a model."""

    def __init__(self, rng, dtype):
        self.rng = rng
        self.dtype = dtype
        self.params = {}

    def add(self, name, array):
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = ad.Tensor(np.asarray(array, dtype=self.dtype), requires_grad=True, name=name)
        self.params[name] = t
        return t

    def uniform(self, name, shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return self.add(name, self.rng.uniform(-bound, bound, size=shape))

    def zeros(self, name, shape):
        return self.add(name, np.zeros(shape))

    def ones(self, name, shape):
        return self.add(name, np.ones(shape))

    def normal(self, name, shape, std):
        return self.add(name, self.rng.normal(0.0, std, size=shape))


class Linear:
    def __init__(self, store, name, n_in, n_out, bias=True):
        self.weight = store.uniform(f"{name}.weight", (n_in, n_out), n_in)
        self.bias = store.zeros(f"{name}.bias", (n_out,)) if bias else None

    def __call__(self, x):
        return ad.linear(x, self.weight, self.bias)


class MLP:
    """Stack of ``Linear`` layers with Swish between them (none after the last)."""

    def __init__(self, store, name, sizes, final_activation=False):
        self.layers = [Linear(store, f"{name}.{i}", a, b) for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]))]
        self.final_activation = final_activation

    def __call__(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1 or self.final_activation:
                x = ad.swish(x)
        return x
