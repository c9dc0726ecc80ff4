from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, EmptySubsetError, ShapeError

KINDS = {
    "binary-image": "bernoulli",
    "one-hot-label": "categorical",
    "real-vector": "gaussian",
}

# Reconstruction weights used for the MNIST-scale setup: images 1.0, labels 10.0.
DEFAULT_WEIGHTS = {"binary-image": 1.0, "one-hot-label": 10.0, "real-vector": 1.0}


@dataclass(frozen=True)
class ModalitySpec:
    name: str
    kind: str
    shape: tuple
    weight: float = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"modality {self.name!r}: unknown kind {self.kind!r}; expected one of {sorted(KINDS)}")
        object.__setattr__(self, "shape", tuple(int(n) for n in self.shape))
        if any(n <= 0 for n in self.shape):
            raise ConfigError(f"modality {self.name!r}: shape {self.shape} must be positive")
        if self.weight is None:
            object.__setattr__(self, "weight", DEFAULT_WEIGHTS[self.kind])
        if not self.weight > 0:
            raise ConfigError(f"modality {self.name!r}: reconstruction weight must be positive, got {self.weight}")

    @property
    def likelihood(self):
        return KINDS[self.kind]

    @property
    def flat_dim(self):
        return int(np.prod(self.shape))

    def describe(self):
        return f"{self.name}:{self.kind}:{'x'.join(map(str, self.shape))}"

    @classmethod
    def parse(cls, text, weight=None):
        """Parse ``name:kind:AxB`` as written in config files."""
        try:
            name, kind, dims = (part.strip() for part in text.split(":"))
            shape = tuple(int(n) for n in dims.split("x"))
        except ValueError:
            raise ConfigError(f"cannot parse modality {text!r}; expected name:kind:dims (e.g. image:binary-image:28x28)")
        return cls(name, kind, shape, weight)


@dataclass
class ModalityBatch:
    """Batch-major data for every declared modality plus a (batch, M) presence mask.

    ``data[i]`` belongs to the model's i-th modality.  Entries for absent
    modalities may hold anything; they are never read by inference.
    """

    data: list
    mask: np.ndarray = None
    labels: np.ndarray = field(default=None)

    def __post_init__(self):
        self.data = [np.asarray(x) for x in self.data]
        n = len(self.data[0])
        if any(len(x) != n for x in self.data):
            raise ShapeError("all modalities in a batch must have the same number of samples")
        if self.mask is None:
            self.mask = np.ones((n, len(self.data)), dtype=bool)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.ndim == 1:
            self.mask = np.broadcast_to(self.mask, (n, len(self.data))).copy()
        if self.mask.shape != (n, len(self.data)):
            raise ShapeError(f"mask shape {self.mask.shape} != ({n}, {len(self.data)})")

    def __len__(self):
        return len(self.data[0])

    @property
    def n_modalities(self):
        return len(self.data)

    def require_nonempty(self):
        if not self.mask.any(axis=1).all():
            raise EmptySubsetError("empty modality subset: at least one sample has no present modality")

    def restrict(self, subset):
        """A copy whose mask is ANDed with ``subset`` ((M,) or (batch, M) booleans)."""
        subset = np.asarray(subset, dtype=bool)
        return ModalityBatch(self.data, self.mask & subset, self.labels)

    def take(self, index):
        labels = None if self.labels is None else self.labels[index]
        return ModalityBatch([x[index] for x in self.data], self.mask[index], labels)
