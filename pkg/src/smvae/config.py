"""Flat ``key = value`` run configuration.

Keys carry a section prefix (``model.``, ``train.``, ``data.``, ``eval.``);
``#`` starts a comment.  Per-modality reconstruction weights are written as
``model.weight.<name> = value``.  Example::

    model.aggregator = smvae
    model.latent_dim = 8
    train.epochs = 30
    data.kind = clusters
"""

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .errors import ConfigError, FormatError

SECTIONS = ("model", "train", "data", "eval")


@dataclass
class TrainConfig:
    """Model, optimisation and evaluation settings (defaults are the full-scale MNIST setup)."""

    modalities: str = ""
    aggregator: str = "smvae"
    latent_dim: int = 64
    embed_dim: int = 512
    heads: int = 4
    decoder_hidden: int = 0
    precision: str = "f32"
    epochs: int = 200
    anneal_epochs: int = 100
    batch_size: int = 100
    lr: float = 5e-4
    gamma: float = 1e-3
    subset_policy: str = "uniform-proper"
    save_every: int = 10
    seed: int = 0
    K: int = 1000
    subsets: str = ""
    weights: dict = field(default_factory=dict)

    def validate(self):
        from .data import SUBSET_POLICIES
        from .model import AGGREGATORS

        for name in ("latent_dim", "embed_dim", "heads", "batch_size", "save_every", "K"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("epochs", "anneal_epochs", "decoder_hidden", "seed"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative, got {getattr(self, name)}")
        if self.embed_dim % self.heads:
            raise ConfigError(f"heads ({self.heads}) must divide embed_dim ({self.embed_dim})")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if self.gamma < 0:
            raise ConfigError("gamma must be non-negative")
        if self.aggregator not in AGGREGATORS:
            raise ConfigError(f"unknown aggregator {self.aggregator!r}; expected one of {AGGREGATORS}")
        if self.subset_policy not in SUBSET_POLICIES:
            raise ConfigError(f"unknown subset policy {self.subset_policy!r}; expected one of {SUBSET_POLICIES}")
        if self.precision not in ("f32", "f64"):
            raise ConfigError(f"precision must be f32 or f64, got {self.precision!r}")
        return self

    def modality_specs(self):
        from .modality import ModalitySpec

        specs = [ModalitySpec.parse(t) for t in self.modalities.split(",") if t.strip()]
        return [reweighted(s, self.weights.get(s.name)) for s in specs]

    def eval_subsets(self, names):
        """Requested conditioning subsets; defaults to the full set followed by each single modality."""
        if self.subsets.strip():
            return [s.strip() for s in self.subsets.split(";") if s.strip()]
        full = "+".join(names)
        return [full] + (list(names) if len(names) > 1 else [])


@dataclass
class DataConfig:
    """Synthetic data generation and MNIST ingestion settings."""

    kind: str = "clusters"
    n: int = 1000
    seed: int = 0
    n_clusters: int = 2
    dim: int = 2
    scale: float = 1.0
    label_noise: float = 0.0
    latent_dim: int = 2
    dims: str = "2,2"
    noise: float = 1.0
    loading_scale: float = 1.0
    images: str = ""
    labels: str = ""
    limit: int = 0
    binarize: bool = True


def reweighted(spec, weight):
    if weight is None:
        return spec
    from .modality import ModalitySpec

    return ModalitySpec(spec.name, spec.kind, spec.shape, weight)


def _coerce(value, kind, key):
    try:
        if kind is bool:
            low = value.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(value)
            return low in ("true", "1", "yes")
        return kind(value)
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot interpret {value!r} as {kind.__name__}")


_TRAIN_SECTIONS = {
    "model": ("modalities", "aggregator", "latent_dim", "embed_dim", "heads", "decoder_hidden", "precision"),
    "train": ("epochs", "anneal_epochs", "batch_size", "lr", "gamma", "subset_policy", "save_every", "seed"),
    "eval": ("K", "subsets"),
}
_SECTION_OF = {name: section for section, names in _TRAIN_SECTIONS.items() for name in names}


def parse_pairs(text, source="<config>"):
    """``key = value`` lines -> ordered list of (key, value) strings."""
    pairs = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        pairs.append((key, value))
    return pairs


def apply_pairs(pairs, train=None, data=None):
    """Fold (key, value) pairs into config objects; later pairs win."""
    train = train or TrainConfig()
    data = data or DataConfig()
    train_types = {f.name: f.type for f in fields(TrainConfig)}
    data_types = {f.name: f.type for f in fields(DataConfig)}
    for key, value in pairs:
        section, _, name = key.partition(".")
        if section not in SECTIONS or not name:
            raise ConfigError(f"unknown config key {key!r}; keys look like model.latent_dim or train.epochs")
        if section == "model" and name.startswith("weight."):
            train.weights[name[len("weight."):]] = _coerce(value, float, key)
        elif section == "data" and name in data_types:
            setattr(data, name, _coerce(value, data_types[name], key))
        elif _SECTION_OF.get(name) == section:
            setattr(train, name, _coerce(value, train_types[name], key))
        else:
            raise ConfigError(f"unknown config key {key!r}")
    return train, data


def load_config(path=None, overrides=()):
    """Read ``path`` (optional) then apply ``overrides`` (``key=value`` strings)."""
    pairs = []
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise FormatError(f"cannot read config: {exc.strerror}", path=str(path)) from exc
        pairs += parse_pairs(text, str(path))
    for item in overrides:
        pairs += parse_pairs(item, "<flag>")
    train, data = apply_pairs(pairs)
    return train.validate(), data


def render(train=None, data=None):
    """Fully resolved config as ``key = value`` text (round-trips through ``load_config``)."""
    lines = []
    if train is not None:
        values = asdict(train)
        weights = values.pop("weights")
        for section, names in _TRAIN_SECTIONS.items():
            for name in names:
                lines.append(f"{section}.{name} = {_fmt(values[name])}")
        for name, w in sorted(weights.items()):
            lines.append(f"model.weight.{name} = {_fmt(w)}")
    if data is not None:
        for name, value in asdict(data).items():
            lines.append(f"data.{name} = {_fmt(value)}")
    return "\n".join(lines) + "\n"


def _fmt(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)
