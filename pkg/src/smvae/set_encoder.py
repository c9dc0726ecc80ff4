"""Permutation-invariant attention pooling of a set of modality embeddings.

A single trainable seed query attends over the embeddings of whichever
modalities are present, so the pooled representation has a fixed size no
matter how many modalities are observed or in which order they arrive.
No positional information enters anywhere, which is what makes the output
invariant to the order of the set.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, EmptySubsetError, ShapeError
from .nn import Linear

LOGVAR_MIN, LOGVAR_MAX = -10.0, 10.0


@dataclass
class EmbeddingSet:
    """Embeddings of shape (batch, m, d) with a (batch, m) presence mask.

    ``ids`` names the modality behind each of the m slots; encoders that
    need a canonical reduction order use it to undo any permutation.
    """

    embeddings: ad.Tensor
    mask: np.ndarray
    ids: tuple = None

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.embeddings.ndim != 3:
            raise ShapeError(f"embeddings must be (batch, m, d), got {self.embeddings.shape}")
        if self.mask.shape != self.embeddings.shape[:2]:
            raise ShapeError(f"mask shape {self.mask.shape} does not match embeddings {self.embeddings.shape[:2]}")
        if self.ids is None:
            self.ids = tuple(range(self.embeddings.shape[1]))
        if len(self.ids) != self.embeddings.shape[1]:
            raise ShapeError("one id per set slot is required")
        if not self.mask.any(axis=1).all():
            raise EmptySubsetError("empty modality set: a sample has no present modality")

    @property
    def size(self):
        return self.embeddings.shape[1]

    def permuted(self, order):
        """The same set with its slots reordered by ``order``."""
        order = list(order)
        return EmbeddingSet(self.embeddings[:, order, :], self.mask[:, order], tuple(self.ids[i] for i in order))


def attention(q, k, v, mask=None):
    """Scaled dot-product attention ``softmax(q k^T / sqrt(d_k)) v``.

    ``q`` is (..., n, d_k), ``k`` (..., m, d_k), ``v`` (..., m, d_v) and
    ``mask`` broadcasts against (..., m).  Masked slots get zero weight, so
    each output row is a convex combination of the unmasked rows of ``v``.
    """
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"query dim {q.shape[-1]} != key dim {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"{k.shape[-2]} keys but {v.shape[-2]} values")
    logits = ad.matmul(q, ad.transpose(k, _swap_last(k.ndim))) * (1.0 / np.sqrt(k.shape[-1]))
    if mask is None:
        weights = ad.softmax(logits, axis=-1)
    else:
        mask = np.asarray(mask, dtype=bool)
        weights = ad.masked_softmax(logits, mask[..., None, :], axis=-1)
    return ad.matmul(weights, v)


def _swap_last(ndim):
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


def _split_heads(x, h):
    # (B, n, d) -> (B, h, n, d/h)
    b, n, d = x.shape
    return ad.transpose(ad.reshape(x, (b, n, h, d // h)), (0, 2, 1, 3))


def _merge_heads(x):
    # (B, h, n, d/h) -> (B, n, d)
    b, h, n, dh = x.shape
    return ad.reshape(ad.transpose(x, (0, 2, 1, 3)), (b, n, h * dh))


def multi_head(q, k, v, h, mask, wq, wk, wv, wo):
    """``Concat(head_1..head_h) W^o`` with ``head_i = Att(q Wq_i, k Wk_i, v Wv_i)``.

    The per-head projections are the column blocks of ``wq``, ``wk`` and
    ``wv`` (each (d_in, d)).  ``q`` may be (n, d_q) and is then shared
    across the batch; ``k`` and ``v`` are (batch, m, d_in).  Returns
    (batch, n, d_out).
    """
    d = wq.shape[1]
    if h < 1 or d % h:
        raise ConfigError(f"head count {h} does not divide projection width {d}")
    if wk.shape[1] != d or wv.shape[1] != d:
        raise ShapeError("query, key and value projections must share the projection width")
    if q.ndim == 2:
        q = ad.reshape(q, (1,) + q.shape)
    qh = _split_heads(ad.matmul(q, wq), h)
    kh = _split_heads(ad.matmul(k, wk), h)
    vh = _split_heads(ad.matmul(v, wv), h)
    head_mask = None if mask is None else np.asarray(mask, dtype=bool)[:, None, :]
    heads = attention(qh, kh, vh, head_mask)
    return ad.matmul(_merge_heads(heads), wo)


class SetEncoder:
    """Seed-query attention pooling from a set of d-vectors to (mu, logvar) in R^L.

    Pipeline::

        H = I + MultiHead(I, E, E, h)
        G = LayerNorm(H + swish(H W_f + b_f))
        mu, logvar = split(G W_out + b_out)     # logvar clamped to [-10, 10]
    """

    def __init__(self, store, d, latent_dim, heads, prefix="set"):
        if heads < 1 or d % heads:
            raise ConfigError(f"head count {heads} does not divide embedding width {d}")
        self.d, self.latent_dim, self.heads = d, latent_dim, heads
        self.seed = store.normal(f"{prefix}.seed", (1, d), std=1.0 / np.sqrt(d))
        self.wq = store.uniform(f"{prefix}.wq", (d, d), d)
        self.wk = store.uniform(f"{prefix}.wk", (d, d), d)
        self.wv = store.uniform(f"{prefix}.wv", (d, d), d)
        self.wo = store.uniform(f"{prefix}.wo", (d, d), d)
        self.ff = Linear(store, f"{prefix}.ff", d, d)
        self.ln_gain = store.ones(f"{prefix}.ln.gain", (d,))
        self.ln_bias = store.zeros(f"{prefix}.ln.bias", (d,))
        self.out = Linear(store, f"{prefix}.out", d, 2 * latent_dim)

    def pooled(self, eset):
        """The normalised d-dimensional set representation G, shape (batch, d)."""
        if eset.embeddings.shape[-1] != self.d:
            raise ShapeError(f"embedding width {eset.embeddings.shape[-1]} != encoder width {self.d}")
        e = eset.embeddings
        attended = multi_head(self.seed, e, e, self.heads, eset.mask, self.wq, self.wk, self.wv, self.wo)
        hidden = ad.reshape(attended, (e.shape[0], self.d)) + self.seed
        return ad.layer_norm(hidden + ad.swish(self.ff(hidden)), self.ln_gain, self.ln_bias)

    def __call__(self, eset):
        params = self.out(self.pooled(eset))
        mu = params[:, : self.latent_dim]
        logvar = ad.clamp(params[:, self.latent_dim :], LOGVAR_MIN, LOGVAR_MAX)
        return mu, logvar


def set_pool(eset, encoder):
    """Functional alias: ``(mu, logvar)`` of the pooled set."""
    return encoder(eset)
