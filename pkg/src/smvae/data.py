"""Synthetic multimodal generators, IDX ingestion and dataset containers.

The linear-Gaussian generator has a closed-form marginal likelihood for any
subset of its modalities, which makes it the reference against which the
importance-sampled estimators are checked.  The cluster generator is a
small stand-in for image+label data: a Gaussian vector per cluster paired
with the one-hot cluster label.
"""

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import DATASET_MAGIC, decode, encode
from .errors import ConfigError, FormatError, PairingError
from .modality import ModalityBatch, ModalitySpec
from .rng import stream

SUBSET_POLICIES = ("uniform-proper", "uniform-nonempty", "none")


def sample_subset(n_modalities, rng, policy="uniform-proper"):
    """Random presence mask over ``n_modalities``; never empty.

    ``uniform-proper`` draws uniformly from the 2^M - 2 non-empty proper
    subsets, ``uniform-nonempty`` from all 2^M - 1 non-empty subsets.
    """
    m = int(n_modalities)
    if m < 1:
        raise ConfigError("need at least one modality")
    if policy == "uniform-proper":
        if m == 1:
            raise ConfigError("a single modality has no non-empty proper subset")
        code = int(rng.integers(1, 2**m - 1))
    elif policy == "uniform-nonempty":
        code = int(rng.integers(1, 2**m))
    else:
        raise ConfigError(f"unknown subset policy {policy!r}; expected uniform-proper or uniform-nonempty")
    return np.array([(code >> i) & 1 for i in range(m)], dtype=bool)


@dataclass
class MultimodalDataset:
    modalities: list
    arrays: list
    labels: np.ndarray = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.modalities) != len(self.arrays):
            raise ConfigError("one array per modality is required")
        n = len(self.arrays[0])
        for spec, arr in zip(self.modalities, self.arrays):
            if len(arr) != n:
                raise PairingError(f"modality {spec.name!r} has {len(arr)} samples, expected {n}")
            if arr.shape[1:] != spec.shape:
                raise FormatError(f"modality {spec.name!r} has per-sample shape {arr.shape[1:]}, declared {spec.shape}")

    def __len__(self):
        return len(self.arrays[0])

    @property
    def names(self):
        return [m.name for m in self.modalities]

    def batch(self, index=None):
        if index is None:
            index = slice(None)
        labels = None if self.labels is None else self.labels[index]
        return ModalityBatch([a[index] for a in self.arrays], None, labels)

    def subset(self, index):
        labels = None if self.labels is None else self.labels[index]
        return MultimodalDataset(self.modalities, [a[index] for a in self.arrays], labels, dict(self.meta))

    def split(self, seed, train_fraction=0.7):
        """Deterministic shuffled train/test split."""
        order = stream(seed, "split").permutation(len(self))
        cut = int(round(train_fraction * len(self)))
        return self.subset(np.sort(order[:cut])), self.subset(np.sort(order[cut:]))


# -- linear-Gaussian ------------------------------------------------------------

@dataclass
class LinearGaussianSpec:
    """x_i = W_i z + b_i + sigma_i * eps_i with z ~ N(0, I_L0)."""

    loadings: list
    offsets: list
    noise: list
    n: int = 1000
    seed: int = 0
    names: list = None

    def __post_init__(self):
        self.loadings = [np.atleast_2d(np.asarray(w, dtype=np.float64)) for w in self.loadings]
        self.offsets = [np.asarray(b, dtype=np.float64).reshape(-1) for b in self.offsets]
        self.noise = [float(s) for s in self.noise]
        latent = self.loadings[0].shape[1]
        if not (len(self.loadings) == len(self.offsets) == len(self.noise)):
            raise ConfigError("loadings, offsets and noise need one entry per modality")
        for i, (w, b) in enumerate(zip(self.loadings, self.offsets)):
            if w.shape[1] != latent:
                raise ConfigError(f"loading {i} has {w.shape[1]} columns, expected latent dim {latent}")
            if b.shape != (w.shape[0],):
                raise ConfigError(f"offset {i} has shape {b.shape}, expected ({w.shape[0]},)")
        if any(s < 0 for s in self.noise):
            raise ConfigError("noise scales must be non-negative")
        if self.names is None:
            self.names = [f"x{i + 1}" for i in range(len(self.loadings))]

    @property
    def latent_dim(self):
        return self.loadings[0].shape[1]

    @property
    def dims(self):
        return [w.shape[0] for w in self.loadings]

    @classmethod
    def random(cls, latent_dim=2, dims=(2, 2), noise=1.0, n=1000, seed=0, scale=1.0):
        """Loadings ~ N(0, scale^2), offsets ~ N(0, 1), drawn from the seed's data stream."""
        rng = stream(seed, "data", 1)
        loadings = [scale * rng.standard_normal((d, latent_dim)) for d in dims]
        offsets = [rng.standard_normal(d) for d in dims]
        noise = [noise] * len(dims) if np.isscalar(noise) else list(noise)
        return cls(loadings, offsets, noise, n, seed)

    def to_meta(self):
        return {
            "kind": "linear-gaussian",
            "loadings": [w.tolist() for w in self.loadings],
            "offsets": [b.tolist() for b in self.offsets],
            "noise": list(self.noise),
            "n": self.n,
            "seed": self.seed,
            "names": list(self.names),
        }

    @classmethod
    def from_meta(cls, meta):
        return cls(meta["loadings"], meta["offsets"], meta["noise"], meta["n"], meta["seed"], meta["names"])


def gen_linear_gaussian(spec):
    """Sample ``spec.n`` observations; modalities are conditionally independent given z."""
    if any(s <= 0 for s in spec.noise):
        raise ConfigError("dataset generation needs strictly positive noise scales")
    rng = stream(spec.seed, "data", 0)
    z = rng.standard_normal((spec.n, spec.latent_dim))
    arrays = [z @ w.T + b + s * rng.standard_normal((spec.n, w.shape[0]))
              for w, b, s in zip(spec.loadings, spec.offsets, spec.noise)]
    modalities = [ModalitySpec(name, "real-vector", (w.shape[0],)) for name, w in zip(spec.names, spec.loadings)]
    return MultimodalDataset(modalities, arrays, None, spec.to_meta())


def linear_gaussian_marginal(spec, subset):
    """Mean and covariance of the concatenation of the modalities in ``subset``."""
    subset = list(subset)
    w = np.vstack([spec.loadings[i] for i in subset])
    mean = np.concatenate([spec.offsets[i] for i in subset])
    noise = np.concatenate([np.full(spec.loadings[i].shape[0], spec.noise[i] ** 2) for i in subset])
    return mean, w @ w.T + np.diag(noise)


def closed_form_log_marginal(spec, xs):
    """Exact log density of observed modalities under the linear-Gaussian model.

    ``xs`` maps modality index -> array (n, D_i) (or (D_i,)).  Cross-covariances
    between modalities are W_i W_j^T.
    """
    if not xs:
        raise ConfigError("closed_form_log_marginal needs at least one modality")
    subset = sorted(xs)
    mean, cov = linear_gaussian_marginal(spec, subset)
    x = np.concatenate([np.atleast_2d(np.asarray(xs[i], dtype=np.float64)) for i in subset], axis=1)
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise np.linalg.LinAlgError("singular marginal covariance; noise scales must be positive")
    white = np.linalg.solve(chol, (x - mean).T)
    logdet = 2.0 * np.log(np.diag(chol)).sum()
    out = -0.5 * ((white**2).sum(axis=0) + logdet + len(mean) * np.log(2.0 * np.pi))
    return out if np.ndim(xs[subset[0]]) > 1 else float(out[0])


# -- clusters -------------------------------------------------------------------

@dataclass
class ClusterSpec:
    """Cluster-conditioned Gaussian vectors paired with (possibly noisy) one-hot labels."""

    n_clusters: int = 2
    dim: int = 2
    means: np.ndarray = None
    scale: float = 1.0
    label_noise: float = 0.0
    n: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.n_clusters < 2:
            raise ConfigError("need at least two clusters")
        if not 0.0 <= self.label_noise < 1.0:
            raise ConfigError("label noise must lie in [0, 1)")
        if self.means is None:
            if self.n_clusters == 2:
                self.means = np.array([np.full(self.dim, 3.0), np.full(self.dim, -3.0)])
            else:
                self.means = 3.0 * stream(self.seed, "data", 1).standard_normal((self.n_clusters, self.dim))
        self.means = np.asarray(self.means, dtype=np.float64)
        if self.means.shape != (self.n_clusters, self.dim):
            raise ConfigError(f"means must have shape ({self.n_clusters}, {self.dim})")

    def to_meta(self):
        return {"kind": "clusters", "n_clusters": self.n_clusters, "dim": self.dim, "means": self.means.tolist(),
                "scale": self.scale, "label_noise": self.label_noise, "n": self.n, "seed": self.seed}


def gen_clusters(spec):
    rng = stream(spec.seed, "data", 0)
    clusters = rng.integers(0, spec.n_clusters, size=spec.n)
    vectors = spec.means[clusters] + spec.scale * rng.standard_normal((spec.n, spec.dim))
    labels = clusters.copy()
    flip = rng.random(spec.n) < spec.label_noise
    # A flipped label moves uniformly to one of the other classes.
    shift = rng.integers(1, spec.n_clusters, size=spec.n)
    labels[flip] = (clusters[flip] + shift[flip]) % spec.n_clusters
    onehot = np.eye(spec.n_clusters)[labels]
    modalities = [ModalitySpec("vector", "real-vector", (spec.dim,)),
                  ModalitySpec("label", "one-hot-label", (spec.n_clusters,))]
    return MultimodalDataset(modalities, [vectors, onehot], clusters, spec.to_meta())


# -- IDX ------------------------------------------------------------------------

IDX_TYPES = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}
IDX_CODES = {np.dtype(v).newbyteorder("=").str.lstrip("<>|="): k for k, v in IDX_TYPES.items()}


def parse_idx(buf, path=None):
    if len(buf) < 4:
        raise FormatError("truncated IDX header", offset=len(buf), path=path)
    zero, code, rank = struct.unpack(">HBB", buf[:4])
    if zero != 0 or code not in IDX_TYPES:
        raise FormatError(f"bad IDX magic {buf[:4].hex()}", offset=0, path=path)
    header_end = 4 + 4 * rank
    if len(buf) < header_end:
        raise FormatError("truncated IDX dimension list", offset=len(buf), path=path)
    dims = struct.unpack(f">{rank}I", buf[4:header_end])
    dtype = np.dtype(IDX_TYPES[code])
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(buf) - header_end < expected:
        raise FormatError(f"truncated IDX payload: need {expected} bytes, found {len(buf) - header_end}",
                          offset=len(buf), path=path)
    if len(buf) - header_end > expected:
        raise FormatError("trailing bytes after IDX payload", offset=header_end + expected, path=path)
    return np.frombuffer(buf, dtype=dtype, count=int(np.prod(dims)), offset=header_end).reshape(dims)


def load_idx(path):
    """Read an IDX file (big-endian magic, u32 dims, raw payload) into a native-order array."""
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read IDX file: {exc.strerror}", path=str(path)) from exc
    arr = parse_idx(buf, str(path))
    return arr.astype(arr.dtype.newbyteorder("="))


def encode_idx(array):
    arr = np.asarray(array)
    key = arr.dtype.newbyteorder("=").str.lstrip("<>|=")
    if key not in IDX_CODES:
        raise FormatError(f"dtype {arr.dtype} has no IDX type code")
    code = IDX_CODES[key]
    header = struct.pack(">HBB", 0, code, arr.ndim) + struct.pack(f">{arr.ndim}I", *arr.shape)
    return header + arr.astype(IDX_TYPES[code]).tobytes()


def write_idx(path, array):
    Path(path).write_bytes(encode_idx(array))


def images_to_unit(images, binarize=True):
    """Scale u8 images to [0, 1]; threshold at 0.5 for Bernoulli likelihoods."""
    x = np.asarray(images, dtype=np.float64)
    if np.issubdtype(np.asarray(images).dtype, np.integer):
        x = x / 255.0
    return (x >= 0.5).astype(np.float64) if binarize else x


def load_mnist(images_path, labels_path, binarize=True, limit=None):
    """Image + one-hot label dataset from a pair of IDX files."""
    images = load_idx(images_path)
    labels = load_idx(labels_path)
    if images.ndim != 3:
        raise FormatError(f"expected rank-3 images, got rank {images.ndim}", path=str(images_path))
    if labels.ndim != 1:
        raise FormatError(f"expected rank-1 labels, got rank {labels.ndim}", path=str(labels_path))
    if len(images) != len(labels):
        raise PairingError(f"{len(images)} images but {len(labels)} labels", path=str(labels_path))
    if limit is not None:
        images, labels = images[:limit], labels[:limit]
    n_classes = int(max(10, labels.max() + 1))
    modalities = [ModalitySpec("image", "binary-image" if binarize else "real-vector", images.shape[1:]),
                  ModalitySpec("label", "one-hot-label", (n_classes,))]
    onehot = np.eye(n_classes)[labels.astype(int)]
    return MultimodalDataset(modalities, [images_to_unit(images, binarize), onehot], labels.astype(int),
                             {"kind": "mnist", "images": str(images_path), "labels": str(labels_path)})


# -- dataset container ------------------------------------------------------------

def save_dataset(dataset, path):
    tensors = {f"x.{spec.name}": arr for spec, arr in zip(dataset.modalities, dataset.arrays)}
    if dataset.labels is not None:
        tensors["labels"] = dataset.labels
    meta = {
        "modalities": [{"name": m.name, "kind": m.kind, "shape": list(m.shape), "weight": m.weight}
                       for m in dataset.modalities],
        "meta": dataset.meta,
    }
    Path(path).write_bytes(encode(tensors, DATASET_MAGIC, meta))


def load_dataset(path):
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read dataset: {exc.strerror}", path=str(path)) from exc
    tensors, meta = decode(buf, DATASET_MAGIC, str(path))
    modalities = [ModalitySpec(m["name"], m["kind"], tuple(m["shape"]), m["weight"]) for m in meta["modalities"]]
    arrays = [tensors[f"x.{m.name}"].astype(np.float64) for m in modalities]
    labels = tensors["labels"].astype(int) if "labels" in tensors else None
    return MultimodalDataset(modalities, arrays, labels, meta["meta"])
