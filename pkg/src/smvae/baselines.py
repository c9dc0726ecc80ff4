"""Factorised joint-posterior baselines and a sum-decomposition set encoder.

* product of experts: precision-weighted fusion of per-modality Gaussians,
  optionally with the standard-normal prior as an extra expert;
* mixture of experts: uniform mixture over the present per-modality Gaussians;
* sum pooling: ``Phi(sum_i Psi(e_i))``, the canonical permutation-invariant form.

All three reduce over set slots in ascending modality-id order, so reordering
the input set cannot change the floating-point result.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import EmptySubsetError, ShapeError
from .nn import MLP, Linear
from .set_encoder import LOGVAR_MAX, LOGVAR_MIN

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass
class GaussianPosterior:
    """Diagonal Gaussian ``N(mu, exp(logvar))``; both fields are (batch, L) tensors."""

    mu: ad.Tensor
    logvar: ad.Tensor

    @property
    def std(self):
        return np.exp(0.5 * self.logvar.data)

    def sample(self, rng, n=None):
        """Numpy draws of shape (batch, L) or (n, batch, L)."""
        shape = self.mu.shape if n is None else (n,) + self.mu.shape
        eps = rng.standard_normal(shape).astype(self.mu.dtype)
        return self.mu.data + self.std * eps

    def log_prob(self, z):
        """Log density of numpy ``z`` (..., batch, L) summed over L."""
        mu, logvar = self.mu.data, self.logvar.data
        return -0.5 * np.sum(LOG_2PI + logvar + (z - mu) ** 2 * np.exp(-logvar), axis=-1)


@dataclass
class ExpertSet:
    """Per-modality Gaussian experts: mus/logvars (batch, m, L), mask (batch, m)."""

    mus: ad.Tensor
    logvars: ad.Tensor
    mask: np.ndarray
    ids: tuple = None

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mus.shape != self.logvars.shape or self.mus.ndim != 3:
            raise ShapeError(f"expert means {self.mus.shape} and log-variances {self.logvars.shape} must match as (batch, m, L)")
        if self.mask.shape != self.mus.shape[:2]:
            raise ShapeError(f"expert mask {self.mask.shape} does not match {self.mus.shape[:2]}")
        if self.ids is None:
            self.ids = tuple(range(self.mus.shape[1]))
        if not self.mask.any(axis=1).all():
            raise EmptySubsetError("empty modality set: no expert present")

    def canonical(self):
        """Slots sorted by modality id (a no-op when already sorted)."""
        order = list(np.argsort(self.ids, kind="stable"))
        if order == list(range(len(order))):
            return self
        return ExpertSet(self.mus[:, order, :], self.logvars[:, order, :], self.mask[:, order], tuple(sorted(self.ids)))


def poe_aggregate(experts, include_prior=True):
    """Product of Gaussian experts.

    Precisions ``T_i = 1/sigma_i^2`` add: ``sigma^2 = 1/sum T_i`` and
    ``mu = sigma^2 * sum T_i mu_i``; the N(0, I) prior contributes precision 1
    and mean 0 when ``include_prior`` is set.
    """
    experts = experts.canonical()
    present = experts.mask[:, :, None].astype(experts.mus.dtype)
    logvars = ad.clamp(experts.logvars, LOGVAR_MIN, LOGVAR_MAX)
    precision = ad.exp(-logvars) * present
    total = ad.tsum(precision, axis=1)
    if include_prior:
        total = total + 1.0
    weighted = ad.tsum(precision * experts.mus, axis=1)
    return GaussianPosterior(weighted / total, -ad.log(total))


class MixturePosterior:
    """Uniform mixture over the present experts of an ``ExpertSet``."""

    def __init__(self, experts):
        self.experts = experts.canonical()
        self.present = self.experts.mask
        self.count = self.present.sum(axis=1)

    @property
    def mus(self):
        return self.experts.mus

    @property
    def logvars(self):
        return self.experts.logvars

    def component_log_prob(self, z):
        """Numpy log N(z | mu_j, sigma_j^2) for every component j: (..., batch, m)."""
        mu, logvar = self.mus.data, self.logvars.data
        z = np.asarray(z)[..., None, :]
        return -0.5 * np.sum(LOG_2PI + logvar + (z - mu) ** 2 * np.exp(-logvar), axis=-1)

    def log_prob(self, z):
        """Mixture log density of numpy ``z`` (..., batch, L): log-mean-exp over present components."""
        comp = np.where(self.present, self.component_log_prob(z), -np.inf)
        peak = comp.max(axis=-1, keepdims=True)
        return np.log(np.exp(comp - peak).sum(axis=-1)) + peak[..., 0] - np.log(self.count)

    def log_prob_tensor(self, z):
        """Differentiable mixture log density of a (batch, L) tensor ``z``."""
        zt = ad.reshape(z, (z.shape[0], 1, z.shape[1]))
        diff = zt - self.mus
        comp = ad.tsum(ad.square(diff) * ad.exp(-self.logvars) + self.logvars, axis=-1) * -0.5
        comp = comp - 0.5 * LOG_2PI * z.shape[1]
        # Absent components are pushed far below any present one; they carry exactly zero weight after exp.
        offset = np.where(self.present, 0.0, -1e30).astype(z.dtype)
        return ad.logsumexp(comp + offset, axis=-1) - np.log(self.count).astype(z.dtype)

    def sample(self, rng, n=None):
        """Pick a present expert uniformly per draw, then reparameterise it."""
        b, m, latent = self.mus.shape
        draws = 1 if n is None else n
        u = rng.random((draws, b))
        rank = np.floor(u * self.count).astype(int)
        component = np.empty((draws, b), dtype=int)
        for i in range(b):
            slots = np.flatnonzero(self.present[i])
            component[:, i] = slots[np.clip(rank[:, i], 0, len(slots) - 1)]
        eps = rng.standard_normal((draws, b, latent)).astype(self.mus.dtype)
        rows = np.arange(b)
        mu = self.mus.data[rows, component]
        std = np.exp(0.5 * self.logvars.data[rows, component])
        z = mu + std * eps
        return z[0] if n is None else z


def moe_aggregate(experts, rng):
    """Draw one z per sample from the uniform mixture; return ``(z, mixture)``.

    ``mixture.log_prob`` evaluates the mixture density for any z.
    """
    mixture = MixturePosterior(experts)
    return mixture.sample(rng), mixture


class SumPoolEncoder:
    """``Phi(sum_i Psi(e_i))`` over the present set elements."""

    def __init__(self, store, d, latent_dim, prefix="sumpool"):
        self.latent_dim = latent_dim
        self.psi = Linear(store, f"{prefix}.psi", d, d)
        self.phi = MLP(store, f"{prefix}.phi", [d, d, 2 * latent_dim])

    def __call__(self, eset):
        order = list(np.argsort(eset.ids, kind="stable"))
        e = eset.embeddings if order == list(range(len(order))) else eset.embeddings[:, order, :]
        mask = eset.mask[:, order]
        features = ad.swish(self.psi(e)) * mask[:, :, None].astype(e.dtype)
        params = self.phi(ad.tsum(features, axis=1))
        mu = params[:, : self.latent_dim]
        logvar = ad.clamp(params[:, self.latent_dim :], LOGVAR_MIN, LOGVAR_MAX)
        return mu, logvar


def sum_pool_encode(eset, encoder):
    return encoder(eset)
