"""Importance-sampled likelihoods, conditional total correlation, latent export.

Likelihood estimators follow the usual importance-sampling identities with
the model's posterior q(z | conditioning subset) as proposal::

    log p(x)    ~ log mean_k p(x|z_k) p(z_k) / q(z_k|.)
    log p(x,y)  ~ log mean_k p(x|z_k) p(y|z_k) p(z_k) / q(z_k|.)
    log p(x|y)  ~ log p(x,y) - log mean_j p(y|z'_j),   z'_j ~ p(z)

Everything stays in the log domain; weights are combined with a max-shifted
log-mean-exp.  Random draws for sample ``i`` come from the stream
``(seed, purpose, i)`` so results do not depend on chunking.
"""

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .baselines import LOG_2PI, ExpertSet, GaussianPosterior, MixturePosterior
from .errors import ConfigError, FormatError, NumericError
from .modality import ModalityBatch
from .model import _mixture_mean
from .rng import stream

logger = logging.getLogger(__name__)

# Upper bound on decoded latent rows per chunk (samples x K).
CHUNK_ROWS = 20000


def log_mean_exp(values, axis=None):
    """``log(mean(exp(values)))`` computed with a max shift."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ValueError("log_mean_exp of an empty sequence")
    peak = np.max(values, axis=axis, keepdims=True)
    out = np.log(np.mean(np.exp(values - peak), axis=axis, keepdims=True)) + peak
    return out.item() if axis is None else np.squeeze(out, axis=axis)


def standard_normal_log_prob(z):
    z = np.asarray(z)
    return -0.5 * np.sum(LOG_2PI + z * z, axis=-1)


def take_posterior(posterior, index):
    """Numpy slice of a (batch-major) posterior along the batch axis."""
    if isinstance(posterior, MixturePosterior):
        e = posterior.experts
        return MixturePosterior(ExpertSet(ad.Tensor(e.mus.data[index]), ad.Tensor(e.logvars.data[index]),
                                          e.mask[index], e.ids))
    return GaussianPosterior(ad.Tensor(posterior.mu.data[index]), ad.Tensor(posterior.logvar.data[index]))


def subset_mask(model, subset):
    """Accept a boolean mask, a list of modality names, or a '+'-joined string."""
    if isinstance(subset, str):
        subset = [s for s in subset.split("+") if s]
    subset = list(subset)
    if subset and isinstance(subset[0], (bool, np.bool_)):
        mask = np.asarray(subset, dtype=bool)
        if mask.shape != (model.n_modalities,):
            raise ConfigError(f"subset mask needs {model.n_modalities} entries")
    else:
        mask = np.zeros(model.n_modalities, dtype=bool)
        for name in subset:
            mask[model.index(name)] = True
    if not mask.any():
        raise ConfigError("conditioning subset is empty")
    return mask


def subset_name(model, mask):
    return "+".join(m.name for m, keep in zip(model.modalities, mask) if keep)


@dataclass
class LikelihoodReport:
    """Per-sample estimates of log p(x), log p(x, y) and log p(x | y)."""

    log_px: np.ndarray
    log_pxy: np.ndarray
    log_px_given_y: np.ndarray
    condition: str
    target: str
    K: int
    dropped: int = 0
    extra: dict = field(default_factory=dict)

    def means(self):
        out = {"log_px": float(np.mean(self.log_px)), "log_pxy": float(np.mean(self.log_pxy)),
               "log_px_given_y": float(np.mean(self.log_px_given_y))}
        for key, values in self.extra.items():
            out[key] = float(np.mean(values))
        return out

    def records(self, seed):
        """JSON-lines objects: one per (metric, sample) plus one summary per metric."""
        metrics = {"log_px": self.log_px, "log_pxy": self.log_pxy, "log_px_given_y": self.log_px_given_y}
        metrics.update(self.extra)
        rows = []
        for metric, values in metrics.items():
            for i, v in enumerate(values):
                rows.append({"metric": metric, "subset": self.condition, "K": self.K, "value": float(v),
                             "seed": seed, "sample": i})
        for metric, values in metrics.items():
            rows.append({"metric": metric, "subset": self.condition, "K": self.K, "value": float(np.mean(values)),
                         "seed": seed, "summary": True, "n": len(values), "dropped": self.dropped})
        return rows


def _draw_proposal(posterior, rows, K, seed):
    """z (len(rows), K, L) and log q (len(rows), K), one RNG stream per sample."""
    zs, logq = [], []
    for local, i in enumerate(rows):
        part = take_posterior(posterior, [local])
        z = part.sample(stream(seed, "eval", int(i)), K)  # (K, 1, L)
        zs.append(z[:, 0, :])
        logq.append(part.log_prob(z)[:, 0])
    return np.stack(zs), np.stack(logq)


def _decoded_log_likelihoods(model, batch, z, modalities):
    """log p(x_i | z) for each i in ``modalities``: dict i -> (n, K)."""
    n, K, L = z.shape
    flat = z.reshape(n * K, L).astype(model.dtype)
    out = {}
    with ad.no_grad():
        for i in modalities:
            params = model.decode_one(i, flat)
            x = np.repeat(np.asarray(batch.data[i], dtype=model.dtype).reshape(n, -1), K, axis=0)
            out[i] = model.log_likelihood(i, params, x).data.reshape(n, K).astype(np.float64)
    return out


def _robust_lme(log_w, counter):
    finite = np.isfinite(log_w)
    dropped = int((~finite).sum())
    if dropped:
        counter[0] += dropped
        logger.warning("dropped %d non-finite importance weights", dropped)
    if not finite.any():
        raise NumericError("every importance weight is non-finite")
    return log_mean_exp(log_w[finite])


def estimate_log_likelihoods(model, batch, condition, K=1000, seed=0, target=0):
    """Importance-sampled log p(x), log p(x, y), log p(x | y) for every sample in ``batch``.

    ``target`` picks the modality playing x (index or name); y is every other
    modality.  The proposal is q(z | condition), ``condition`` being a mask,
    a list of names or a '+'-joined string.  Deterministic in (model, seed, K).
    """
    if K < 1:
        raise ConfigError("K must be at least 1")
    cond = subset_mask(model, condition)
    xi = model.index(target) if isinstance(target, str) else int(target)
    others = [i for i in range(model.n_modalities) if i != xi]
    n = len(batch)
    chunk = max(1, CHUNK_ROWS // K)
    counter = [0]
    log_px, log_pxy, log_py_prior = np.empty(n), np.empty(n), np.empty(n)

    with ad.no_grad():
        posterior = model.infer(batch.restrict(cond))
    for start in range(0, n, chunk):
        rows = np.arange(start, min(n, start + chunk))
        part = batch.take(rows)
        z, logq = _draw_proposal(take_posterior(posterior, rows), rows, K, seed)
        ll = _decoded_log_likelihoods(model, part, z, [xi] + others)
        base = ll[xi] + standard_normal_log_prob(z) - logq
        joint = base + sum((ll[i] for i in others), np.zeros_like(base))
        prior_z = np.stack([stream(seed, "prior", int(i)).standard_normal((K, model.latent_dim)) for i in rows])
        ll_prior = _decoded_log_likelihoods(model, part, prior_z, others)
        py = sum((ll_prior[i] for i in others), np.zeros((len(rows), K)))
        for local, i in enumerate(rows):
            log_px[i] = _robust_lme(base[local], counter)
            log_pxy[i] = _robust_lme(joint[local], counter)
            log_py_prior[i] = _robust_lme(py[local], counter)
    return LikelihoodReport(log_px, log_pxy, log_pxy - log_py_prior, subset_name(model, cond),
                            model.modalities[xi].name, K, counter[0])


# -- conditional total correlation ------------------------------------------------

@dataclass
class CtcReport:
    """Monte-Carlo estimate of E[log p(X|z) - sum_i log p(x_i|z)]."""

    value: float
    per_sample: np.ndarray
    n_samples: int
    n_draws: int


class FactorizedDecoder:
    """CTC view of an ``SmvaeModel``: its joint decoder density is the product of the modality decoders."""

    def __init__(self, model):
        self.model = model

    def posterior(self, batch):
        with ad.no_grad():
            return self.model.infer(batch)

    def log_modality_likelihoods(self, batch, z):
        ll = _decoded_log_likelihoods(self.model, batch, z, range(self.model.n_modalities))
        return [ll[i] for i in range(self.model.n_modalities)]

    def log_joint_likelihood(self, batch, z):
        total = None
        for term in self.log_modality_likelihoods(batch, z):
            total = term if total is None else total + term
        return total


class CorrelatedGaussianDecoder:
    """Two scalar modalities x_i = a_i z + n_i with noise correlation ``rho`` and z ~ N(0, 1).

    Its conditional total correlation is the mutual information of the
    noise, -0.5 * log(1 - rho^2), for every z.  The exact posterior is
    available, so ``posterior`` is q = p(z | X).
    """

    def __init__(self, rho, loadings=(1.0, 1.0)):
        if not -1.0 < rho < 1.0:
            raise ConfigError("rho must lie in (-1, 1)")
        self.rho = float(rho)
        self.a = np.asarray(loadings, dtype=np.float64)
        self.cov = np.array([[1.0, rho], [rho, 1.0]])
        self.prec = np.linalg.inv(self.cov)

    @property
    def analytic_ctc(self):
        return -0.5 * np.log(1.0 - self.rho**2)

    def sample(self, n, rng):
        z = rng.standard_normal(n)
        noise = rng.multivariate_normal(np.zeros(2), self.cov, size=n)
        x = z[:, None] * self.a + noise
        return ModalityBatch([x[:, :1], x[:, 1:]]), z

    def _x(self, batch):
        return np.concatenate([np.asarray(batch.data[0]).reshape(-1, 1), np.asarray(batch.data[1]).reshape(-1, 1)], axis=1)

    def posterior(self, batch):
        x = self._x(batch)
        var = 1.0 / (1.0 + self.a @ self.prec @ self.a)
        mu = var * (x @ self.prec @ self.a)
        return GaussianPosterior(ad.Tensor(mu[:, None]), ad.Tensor(np.full((len(x), 1), np.log(var))))

    def log_joint_likelihood(self, batch, z):
        x = self._x(batch)[:, None, :]
        r = x - z[..., :1] * self.a
        quad = np.einsum("nki,ij,nkj->nk", r, self.prec, r)
        return -0.5 * (quad + np.log(np.linalg.det(self.cov)) + 2 * LOG_2PI)

    def log_modality_likelihoods(self, batch, z):
        x = self._x(batch)[:, None, :]
        r = x - z[..., :1] * self.a
        return [-0.5 * (r[..., i] ** 2 + LOG_2PI) for i in range(2)]


def estimate_ctc(decoder, batch, seed=0, draws=1):
    """Average of log p(X|z) - sum_i log p(x_i|z) over the data, z ~ q(z | X).

    ``decoder`` must expose ``posterior``, ``log_joint_likelihood`` and
    ``log_modality_likelihoods``.  Factorised decoders give exactly zero.
    """
    if not callable(getattr(decoder, "log_joint_likelihood", None)):
        raise ConfigError("decoder has no joint density (log_joint_likelihood); conditional total correlation is undefined")
    posterior = decoder.posterior(batch)
    rows = np.arange(len(batch))
    z, _ = _draw_proposal(posterior, rows, draws, seed)
    joint = decoder.log_joint_likelihood(batch, z)
    marginals = decoder.log_modality_likelihoods(batch, z)
    total = None
    for term in marginals:
        total = term if total is None else total + term
    ratio = joint - total
    per_sample = ratio.mean(axis=1)
    return CtcReport(float(per_sample.mean()), per_sample, len(batch), draws)


# -- exports ----------------------------------------------------------------------

def export_latents(model, dataset, subsets, path):
    """Write posterior means for every (sample, subset) pair as CSV.

    Columns: sample, subset, label, mu_0 .. mu_{L-1}.  Values use Python's
    shortest round-tripping float repr.
    """
    path = Path(path)
    masks = [subset_mask(model, s) for s in subsets]
    batch = dataset.batch() if hasattr(dataset, "batch") else dataset
    labels = getattr(dataset, "labels", None)
    rows = []
    for mask in masks:
        with ad.no_grad():
            posterior = model.infer(batch.restrict(mask))
        mu = posterior.mu.data if isinstance(posterior, GaussianPosterior) else _mixture_mean(posterior)
        name = subset_name(model, mask)
        for i in range(len(batch)):
            label = "" if labels is None else int(labels[i])
            rows.append([i, name, label] + [repr(float(v)) for v in mu[i]])
    try:
        with path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["sample", "subset", "label"] + [f"mu_{j}" for j in range(model.latent_dim)])
            writer.writerows(rows)
    except OSError as exc:
        raise FormatError(f"cannot write latents: {exc.strerror}", path=str(path)) from exc
    return len(rows)


def write_jsonl(path, records, mode="w"):
    try:
        with Path(path).open(mode, encoding="utf-8") as fh:
            for rec in records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
    except OSError as exc:
        raise FormatError(f"cannot write metrics: {exc.strerror}", path=str(path)) from exc
