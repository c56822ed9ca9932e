"""Source and target embeddings.

Frame features go through a linear projection, batch normalization over the
time axis, and a ReLU. Target words are looked up in a learned table (a
linear layer over one-hot vectors). Both get sinusoidal position vectors
added by the caller before entering the attention stacks.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DimensionError, VocabularyError

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def positional_encoding(length: int, d: int) -> Tensor:
    """Phase-shifted sine/cosine position table.

    pe[pos, 2i] = sin(pos / 10000^(2i/d)), pe[pos, 2i+1] = cos(pos / 10000^(2i/d)).
    """
    if d % 2 != 0:
        raise ConfigError(f"positional encoding needs an even model dimension, got {d}")
    pos = np.arange(length, dtype=np.float64)[:, None]
    inv_freq = 10000.0 ** (-np.arange(0, d, 2, dtype=np.float64) / d)
    angles = pos * inv_freq
    pe = np.empty((length, d))
    pe[:, 0::2] = np.sin(angles)
    pe[:, 1::2] = np.cos(angles)
    return Tensor(pe)


class WordEmbedder:
    """Token-index to vector lookup backed by a |vocab| x d table."""

    def __init__(self, vocab_size: int, d: int, rng: np.random.Generator):
        self.table = ad.xavier_uniform((vocab_size, d), rng)

    @property
    def vocab_size(self) -> int:
        return self.table.shape[0]

    def embed(self, tokens) -> Tensor:
        idx = np.asarray(tokens, dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= self.vocab_size):
            raise VocabularyError(
                f"token index out of range for vocabulary of size {self.vocab_size}"
            )
        return ad.embedding(self.table, idx)


def word_embed(tokens, emb: WordEmbedder) -> Tensor:
    return emb.embed(tokens)


def _batch_norm_time(x: Tensor, gain: Tensor, bias: Tensor, mask: np.ndarray, eps: float) -> Tensor:
    """Batch-normalize per feature over the masked frame positions.

    Statistics come from real frames only; padded rows are normalized with the
    same statistics so they never influence real outputs. The backward pass
    carries the full batch-statistic coupling.
    """
    mask = np.asarray(mask, dtype=bool)
    n = int(mask.sum())
    sel = x.data[mask]  # (n, d)
    mu = sel.mean(axis=0)
    var = sel.var(axis=0)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    out = xhat * gain.data + bias.data
    gain_data = gain.data

    def bwd(g):
        gg = g * gain_data
        lead = tuple(range(g.ndim - 1))
        s1 = gg.sum(axis=lead)
        s2 = (gg * xhat).sum(axis=lead)
        gx = gg * inv_std
        gx[mask] -= inv_std * (s1 / n + xhat[mask] * (s2 / n))
        dgain = (g * xhat).sum(axis=lead)
        dbias = g.sum(axis=lead)
        return gx, dgain, dbias

    return ad.custom_op(out, (x, gain, bias), bwd)


class SpatialEmbedder:
    """Linear projection + batch norm over the time axis + ReLU for frame features."""

    def __init__(self, d_in: int, d: int, rng: np.random.Generator):
        self.d_in = d_in
        self.d = d
        self.weight = ad.xavier_uniform((d_in, d), rng)
        self.bias = ad.zeros(d)
        self.bn_gain = ad.ones(d)
        self.bn_bias = ad.zeros(d)
        self.bn_running_mean = np.zeros(d)
        self.bn_running_var = np.ones(d)
        self.bn_momentum = BN_MOMENTUM
        self.bn_eps = BN_EPS
        self.train_mode = True

    def embed_batch(self, features: Tensor, mask: np.ndarray) -> Tensor:
        """features (B, T, d_in) with mask (B, T) marking real frames -> (B, T, d)."""
        if features.shape[-1] != self.d_in:
            raise DimensionError(
                f"expected frame features of width {self.d_in}, got {features.shape[-1]}"
            )
        h = ad.matmul(features, self.weight) + self.bias
        if self.train_mode:
            sel = h.data[np.asarray(mask, dtype=bool)]
            m = self.bn_momentum
            self.bn_running_mean = (1 - m) * self.bn_running_mean + m * sel.mean(axis=0)
            self.bn_running_var = (1 - m) * self.bn_running_var + m * sel.var(axis=0)
            normed = _batch_norm_time(h, self.bn_gain, self.bn_bias, mask, self.bn_eps)
        else:
            scale = 1.0 / np.sqrt(self.bn_running_var + self.bn_eps)
            shift = Tensor(-self.bn_running_mean * scale)
            normed = (h * Tensor(scale) + shift) * self.bn_gain + self.bn_bias
        return ad.relu(normed)

    def embed(self, frames) -> Tensor:
        """Single sequence (T, d_in) -> (T, d)."""
        x = frames if isinstance(frames, Tensor) else Tensor(frames)
        if x.shape[-1] != self.d_in:
            raise DimensionError(
                f"expected frame features of width {self.d_in}, got {x.shape[-1]}"
            )
        t = x.shape[0]
        batched = self.embed_batch(x.reshape((1, t, self.d_in)), np.ones((1, t), dtype=bool))
        return batched.reshape((t, self.d))


def spatial_embed(frames, emb: SpatialEmbedder) -> Tensor:
    return emb.embed(frames)
