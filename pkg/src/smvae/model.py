"""Set multimodal VAE: embedders, set-pooled joint posterior, per-modality decoders.

The joint posterior over the shared latent is produced directly from the set
of present modality embeddings, so any non-empty subset of modalities, in any
order, yields a valid posterior.  Training maximises a beta/lambda weighted
ELBO on the full set plus a randomly drawn proper subset every step.
"""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .baselines import ExpertSet, GaussianPosterior, MixturePosterior, SumPoolEncoder, poe_aggregate
from .data import sample_subset
from .errors import ConfigError, EmptySubsetError, NumericError, ShapeError
from .modality import ModalityBatch, ModalitySpec
from .nn import MLP, Linear, ParamStore
from .rng import stream
from .set_encoder import LOGVAR_MAX, LOGVAR_MIN, EmbeddingSet, SetEncoder

AGGREGATORS = ("smvae", "poe", "moe", "sumpool")
LOG_2PI = float(np.log(2.0 * np.pi))


class SmvaeModel:
    """All trainable parameters plus the forward computations that use them.

    ``aggregator`` selects how the joint posterior is formed from the
    modality embeddings: ``smvae`` (attention set pooling), ``sumpool``
    (sum decomposition), ``poe`` or ``moe`` (per-modality experts fused by
    product or mixture).  Embedders and decoders are identical across
    aggregators.
    """

    def __init__(self, modalities, latent_dim=64, embed_dim=512, heads=4, decoder_hidden=None,
                 aggregator="smvae", seed=0, precision="f32"):
        if aggregator not in AGGREGATORS:
            raise ConfigError(f"unknown aggregator {aggregator!r}; expected one of {AGGREGATORS}")
        if not modalities:
            raise ConfigError("at least one modality is required")
        names = [m.name for m in modalities]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate modality names in {names}")
        self.modalities = list(modalities)
        self.latent_dim = int(latent_dim)
        self.embed_dim = int(embed_dim)
        self.heads = int(heads)
        self.decoder_hidden = int(decoder_hidden or embed_dim)
        self.aggregator = aggregator
        self.dtype = ad.resolve_dtype(precision)

        store = ParamStore(stream(seed, "init"), self.dtype)
        self.embedders = [Linear(store, f"embed.{m.name}", m.flat_dim, self.embed_dim) for m in self.modalities]
        self.set_encoder = self.sum_pool = None
        self.experts = []
        if aggregator == "smvae":
            self.set_encoder = SetEncoder(store, self.embed_dim, self.latent_dim, self.heads)
        elif aggregator == "sumpool":
            self.sum_pool = SumPoolEncoder(store, self.embed_dim, self.latent_dim)
        else:
            self.experts = [Linear(store, f"expert.{m.name}", self.embed_dim, 2 * self.latent_dim) for m in self.modalities]
        self.decoders = [MLP(store, f"decode.{m.name}", [self.latent_dim, self.decoder_hidden, m.flat_dim])
                         for m in self.modalities]
        self.params = store.params

    # -- bookkeeping ---------------------------------------------------------
    @property
    def n_modalities(self):
        return len(self.modalities)

    def index(self, name):
        for i, m in enumerate(self.modalities):
            if m.name == name:
                return i
        raise ConfigError(f"unknown modality {name!r}; model has {[m.name for m in self.modalities]}")

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state_dict(self):
        return {name: p.data for name, p in self.params.items()}

    def load_state_dict(self, state):
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise ConfigError(f"checkpoint does not match model: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, p in self.params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ShapeError(f"parameter {name!r}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data = arr.astype(self.dtype)

    # -- inference -----------------------------------------------------------
    def embed(self, i, x):
        """Embedding of modality ``i`` for a batch ``x`` of its declared shape: (batch, d)."""
        spec = self.modalities[i]
        x = np.asarray(x)
        if x.shape[1:] != spec.shape:
            raise ShapeError(f"modality {spec.name!r} expects per-sample shape {spec.shape}, got {x.shape[1:]}")
        flat = ad.Tensor(x.reshape(len(x), -1), dtype=self.dtype)
        return ad.swish(self.embedders[i](flat))

    def embedding_set(self, batch, order=None):
        """Stack the embeddings of ``batch`` into an ``EmbeddingSet``, slots in ``order``.

        Absent entries are zeroed before embedding so their content can never
        influence the result.
        """
        batch.require_nonempty()
        order = range(self.n_modalities) if order is None else list(order)
        embeddings = []
        for i in order:
            x = np.asarray(batch.data[i], dtype=self.dtype)
            present = batch.mask[:, i].reshape((-1,) + (1,) * (x.ndim - 1))
            embeddings.append(self.embed(i, np.where(present, x, 0)))
        return EmbeddingSet(ad.stack(embeddings, axis=1), batch.mask[:, order], tuple(order))

    def expert_set(self, eset):
        mus, logvars = [], []
        for slot, i in enumerate(eset.ids):
            params = self.experts[i](eset.embeddings[:, slot, :])
            mus.append(params[:, : self.latent_dim])
            logvars.append(ad.clamp(params[:, self.latent_dim :], LOGVAR_MIN, LOGVAR_MAX))
        return ExpertSet(ad.stack(mus, axis=1), ad.stack(logvars, axis=1), eset.mask, eset.ids)

    def infer(self, batch, order=None):
        """Joint posterior q(z | present modalities).

        Returns a ``GaussianPosterior`` (or a ``MixturePosterior`` for the
        ``moe`` aggregator).  ``order`` permutes the modality slots fed to
        the aggregator; the result does not depend on it.
        """
        eset = self.embedding_set(batch, order)
        if self.aggregator == "smvae":
            return GaussianPosterior(*self.set_encoder(eset))
        if self.aggregator == "sumpool":
            return GaussianPosterior(*self.sum_pool(eset))
        experts = self.expert_set(eset)
        if self.aggregator == "poe":
            return poe_aggregate(experts, include_prior=True)
        return MixturePosterior(experts)

    # -- generation ----------------------------------------------------------
    def decode(self, z):
        """Per-modality likelihood parameters (logits or means), each (batch, flat_dim)."""
        if not isinstance(z, ad.Tensor):
            z = ad.Tensor(np.asarray(z, dtype=self.dtype))
        if z.shape[-1] != self.latent_dim:
            raise ShapeError(f"latent dimension {z.shape[-1]} != model latent dimension {self.latent_dim}")
        return [decoder(z) for decoder in self.decoders]

    def decode_one(self, i, z):
        if not isinstance(z, ad.Tensor):
            z = ad.Tensor(np.asarray(z, dtype=self.dtype))
        return self.decoders[i](z)

    def log_likelihood(self, i, params, x):
        """log p(x_i | z) per sample, given decoder output ``params`` for modality ``i``."""
        x = ad.Tensor(np.asarray(x, dtype=self.dtype).reshape(len(x), -1))
        return log_likelihood(self.modalities[i].likelihood, params, x)


def log_likelihood(kind, params, x):
    """Per-sample log-likelihood (summed over features) for one likelihood family."""
    if kind == "bernoulli":
        return ad.tsum(x * params - ad.softplus(params), axis=-1)
    if kind == "categorical":
        return ad.tsum(x * ad.log_softmax(params, axis=-1), axis=-1)
    if kind == "gaussian":
        diff = x - params
        return ad.tsum(ad.square(diff), axis=-1) * -0.5 - 0.5 * LOG_2PI * params.shape[-1]
    raise ConfigError(f"unknown likelihood {kind!r}")


def reparameterize(posterior, eps):
    """z = mu + exp(logvar / 2) * eps, differentiable in mu and logvar."""
    eps = ad.Tensor(np.asarray(eps, dtype=posterior.mu.dtype))
    return posterior.mu + ad.exp(posterior.logvar * 0.5) * eps


def kl_to_prior(posterior):
    """Closed-form KL(N(mu, sigma^2) || N(0, I)) per sample: 0.5 * sum(mu^2 + sigma^2 - logvar - 1)."""
    mu, logvar = posterior.mu, posterior.logvar
    return ad.tsum(ad.square(mu) + ad.exp(logvar) - logvar - 1.0, axis=-1) * 0.5


def posterior_penalty(posterior, gamma):
    """gamma * (mean(mu^2) + mean(logvar^2)): pulls mu toward 0 and sigma toward 1."""
    if isinstance(posterior, MixturePosterior):
        present = posterior.present[:, :, None].astype(posterior.mus.dtype)
        count = present.sum() * posterior.mus.shape[-1]
        total = ad.tsum(ad.square(posterior.mus) * present) + ad.tsum(ad.square(posterior.logvars) * present)
        return total * (gamma / count)
    return (ad.mean(ad.square(posterior.mu)) + ad.mean(ad.square(posterior.logvar))) * gamma


def beta_schedule(epoch, anneal_epochs):
    """Linear warm-up of the KL weight from 0 at epoch 0 to 1 at ``anneal_epochs``, then flat."""
    if anneal_epochs <= 0:
        return 1.0
    return float(min(1.0, max(0.0, epoch / anneal_epochs)))


@dataclass
class ElboTerms:
    """Batch-mean ELBO and its pieces.

    ``recon[name]`` is the batch mean of ``mask * log p(x_name | z)`` (zero
    for samples where the modality is absent), so
    ``elbo == -beta * kl + sum(weight[name] * recon[name])``.
    """

    elbo: ad.Tensor
    kl: ad.Tensor
    recon: dict
    penalty: ad.Tensor
    beta: float
    weights: dict = field(default_factory=dict)

    def recombined(self):
        total = -self.beta * float(self.kl.data)
        for name, value in self.recon.items():
            total += self.weights[name] * float(value.data)
        return total


def subset_elbo(model, batch, subset, beta, eps, order=None, gamma=0.0):
    """ELBO of the observed subset: -beta * KL(q(z|X_s) || p(z)) + sum_{i in s} lambda_i log p(x_i | z).

    Only modalities in the subset are reconstructed.  ``eps`` is the standard
    normal noise for the single reparameterised draw: (batch, L), or
    (batch, m, L) for the ``moe`` aggregator (one draw per expert).
    """
    sub = batch.restrict(subset)
    if not sub.mask.any(axis=1).all():
        raise EmptySubsetError("empty modality subset")
    posterior = model.infer(sub, order)
    present = sub.mask.astype(model.dtype)
    weights = {m.name: m.weight for m in model.modalities}

    if isinstance(posterior, MixturePosterior):
        return _mixture_elbo(model, sub, posterior, present, beta, eps, weights, gamma)

    z = reparameterize(posterior, eps)
    kl = kl_to_prior(posterior)
    per_sample = kl * -beta
    recon = {}
    for i, spec in enumerate(model.modalities):
        if not sub.mask[:, i].any():
            recon[spec.name] = ad.Tensor(np.zeros((), dtype=model.dtype))
            continue
        ll = model.log_likelihood(i, model.decode_one(i, z), _zero_absent(sub, i, model.dtype))
        masked = ll * present[:, i]
        recon[spec.name] = ad.mean(masked)
        per_sample = per_sample + masked * spec.weight
    return ElboTerms(ad.mean(per_sample), ad.mean(kl), recon, posterior_penalty(posterior, gamma), beta, weights)


def _zero_absent(batch, i, dtype):
    x = np.asarray(batch.data[i], dtype=dtype)
    present = batch.mask[:, i].reshape((-1,) + (1,) * (x.ndim - 1))
    return np.where(present, x, 0)


def _mixture_elbo(model, sub, posterior, present, beta, eps, weights, gamma):
    # Stratified over mixture components: one reparameterised draw per present
    # expert, KL estimated by log q_mix(z) - log p(z) at that draw.
    eps = np.asarray(eps, dtype=model.dtype)
    if eps.ndim == 2:
        eps = np.repeat(eps[:, None, :], posterior.mus.shape[1], axis=1)
    slot_weight = posterior.present / posterior.count[:, None]
    per_sample = None
    kl_total = None
    recon_acc = {m.name: None for m in model.modalities}
    for slot in range(posterior.mus.shape[1]):
        w = slot_weight[:, slot].astype(model.dtype)
        if not w.any():
            continue
        mu = posterior.mus[:, slot, :]
        logvar = posterior.logvars[:, slot, :]
        z = mu + ad.exp(logvar * 0.5) * ad.Tensor(eps[:, slot, :])
        log_q = posterior.log_prob_tensor(z)
        log_p = ad.tsum(ad.square(z), axis=-1) * -0.5 - 0.5 * LOG_2PI * model.latent_dim
        kl = (log_q - log_p) * w
        kl_total = kl if kl_total is None else kl_total + kl
        term = kl * -beta
        for i, spec in enumerate(model.modalities):
            if not sub.mask[:, i].any():
                continue
            ll = model.log_likelihood(i, model.decode_one(i, z), _zero_absent(sub, i, model.dtype)) * (present[:, i] * w)
            recon_acc[spec.name] = ll if recon_acc[spec.name] is None else recon_acc[spec.name] + ll
            term = term + ll * spec.weight
        per_sample = term if per_sample is None else per_sample + term
    recon = {name: ad.Tensor(np.zeros((), dtype=model.dtype)) if v is None else ad.mean(v) for name, v in recon_acc.items()}
    return ElboTerms(ad.mean(per_sample), ad.mean(kl_total), recon, posterior_penalty(posterior, gamma), beta, weights)


def noise_shape(model, batch_size):
    if model.aggregator == "moe":
        return (batch_size, model.n_modalities, model.latent_dim)
    return (batch_size, model.latent_dim)


def training_loss(model, batch, rng, beta, gamma=0.0, subset_policy="uniform-proper"):
    """Negated ELBO of the full set plus one sampled proper subset, plus the posterior penalty.

    A random permutation of the modality order is applied to both terms.
    Returns ``(loss, report)``.
    """
    m = model.n_modalities
    order = rng.permutation(m)
    eps = rng.standard_normal(noise_shape(model, len(batch))).astype(model.dtype)
    full = subset_elbo(model, batch, np.ones(m, dtype=bool), beta, eps, order, gamma)
    loss = -full.elbo + full.penalty
    report = {
        "elbo": float(full.elbo.data),
        "kl": float(full.kl.data),
        "recon": {k: float(v.data) for k, v in full.recon.items()},
        "beta": float(beta),
        "subset": "".join("1" for _ in range(m)),
    }
    if m > 1 and subset_policy != "none":
        subset = sample_subset(m, rng, subset_policy)
        report["subset"] = "".join("1" if s else "0" for s in subset)
        rows = np.flatnonzero((batch.mask & subset).any(axis=1))
        if len(rows):
            part = batch if len(rows) == len(batch) else batch.take(rows)
            eps_sub = rng.standard_normal(noise_shape(model, len(part))).astype(model.dtype)
            sub = subset_elbo(model, part, subset, beta, eps_sub, order, gamma)
            loss = loss - sub.elbo + sub.penalty
            report["subset_elbo"] = float(sub.elbo.data)
    report["loss"] = float(loss.data)
    return loss, report


def training_step(model, optimizer, batch, rng, beta, gamma=0.0, subset_policy="uniform-proper", step=None):
    """Forward, backward and one optimizer update.  Returns the loss report."""
    optimizer.zero_grad()
    try:
        loss, report = training_loss(model, batch, rng, beta, gamma, subset_policy)
        if not np.isfinite(loss.data):
            raise NumericError("loss is not finite")
        loss.backward()
        optimizer.step()
    except NumericError as exc:
        raise NumericError(f"numeric failure at step {step} (beta={beta}, policy={subset_policy}): {exc}") from exc
    return report


def cross_modal_generate(model, observed, target, rng, mode="mean"):
    """Generate modality ``target`` from the observed subset.

    ``mode="mean"`` decodes the posterior mean and returns the decoder's
    distribution mean (Bernoulli probabilities, class probabilities or the
    Gaussian mean); ``mode="sample"`` decodes one posterior draw and samples
    the decoder distribution.  Output has the target's declared shape.
    """
    i = model.index(target) if isinstance(target, str) else int(target)
    spec = model.modalities[i]
    with ad.no_grad():
        posterior = model.infer(observed)
        if mode == "mean":
            z = posterior.mu.data if isinstance(posterior, GaussianPosterior) else _mixture_mean(posterior)
        elif mode == "sample":
            z = posterior.sample(rng)
        else:
            raise ConfigError(f"unknown generation mode {mode!r}; expected 'mean' or 'sample'")
        params = model.decode_one(i, z).data
    n = len(params)
    if spec.likelihood == "bernoulli":
        p = ad.sigmoid_array(params)
        out = p if mode == "mean" else (rng.random(p.shape) < p).astype(model.dtype)
    elif spec.likelihood == "categorical":
        e = np.exp(params - params.max(axis=-1, keepdims=True))
        p = e / e.sum(axis=-1, keepdims=True)
        if mode == "mean":
            out = p
        else:
            draws = (rng.random((n, 1)) < np.cumsum(p, axis=-1)).argmax(axis=-1)
            out = np.eye(p.shape[-1], dtype=model.dtype)[draws]
    else:
        out = params if mode == "mean" else params + rng.standard_normal(params.shape).astype(model.dtype)
    return out.reshape((n,) + spec.shape)


def _mixture_mean(posterior):
    w = (posterior.present / posterior.count[:, None])[:, :, None]
    return (posterior.mus.data * w).sum(axis=1)


def infer_params(model, batch, order=None):
    """Numpy ``(mu, logvar)`` of the joint posterior without recording a graph."""
    with ad.no_grad():
        posterior = model.infer(batch, order)
    if isinstance(posterior, MixturePosterior):
        raise ConfigError("mixture posteriors have no single (mu, logvar); use infer() directly")
    return posterior.mu.data, posterior.logvar.data


__all__ = [
    "AGGREGATORS",
    "ElboTerms",
    "GaussianPosterior",
    "ModalityBatch",
    "ModalitySpec",
    "SmvaeModel",
    "beta_schedule",
    "cross_modal_generate",
    "infer_params",
    "kl_to_prior",
    "log_likelihood",
    "posterior_penalty",
    "reparameterize",
    "subset_elbo",
    "training_loss",
    "training_step",
]
