"""Bottleneck self-attention over timesteps with an adaptive head count.

The residual layer computes ``lambda * attention(x) + x`` where ``lambda``
is one learnable scalar; multi-head attention is the usual
``softmax(Q K^T / sqrt(d_k)) V`` per head over the time axis.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .ndgrad import Linear, Module, Parameter, Tensor
from .ndgrad import functional as F


@dataclass
class AttentionConfig:
    model_dim: int
    head_scale: int = 64
    lambda_init: float = 0.0
    positional_encoding: bool = False

    def __post_init__(self):
        if self.model_dim < 1 or self.head_scale < 1:
            raise ConfigError("model_dim and head_scale must be positive")


def adaptive_heads(L: int, C: int, model_dim: int) -> int:
    """Head count ``max(1, L // C)`` rounded down to a divisor of ``model_dim``."""
    if L < 1 or C < 1:
        raise ConfigError(f"need L >= 1 and C >= 1, got L={L}, C={C}")
    h0 = max(1, L // C)
    for h in range(min(h0, model_dim), 0, -1):
        if model_dim % h == 0:
            return h
    return 1


def sinusoidal_positions(L: int, dim: int) -> np.ndarray:
    """``[L, dim]`` table of sin/cos position codes (odd dims get a trailing sin)."""
    pos = np.arange(L, dtype=np.float64)[:, None]
    half = (dim + 1) // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half, 1))
    table = np.concatenate([np.sin(pos * freqs), np.cos(pos * freqs)], axis=1)
    return table[:, :dim]


class AttentionLayer(Module):
    def __init__(self, cfg: AttentionConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        D = cfg.model_dim
        self.q = Linear(D, D, rng)
        self.k = Linear(D, D, rng)
        self.v = Linear(D, D, rng)
        self.out = Linear(D, D, rng)
        setattr(self, "lambda", Parameter(np.full(1, cfg.lambda_init)))

    @property
    def lam(self) -> Parameter:
        return getattr(self, "lambda")

    def forward(self, x: Tensor) -> Tensor:
        return transformer_block(x, self)


def self_attention(x: Tensor, layer: AttentionLayer, h: int, return_weights: bool = False):
    """Multi-head attention of ``x[B, D, L]`` across its L timesteps."""
    if x.ndim != 3 or x.shape[1] != layer.cfg.model_dim:
        raise ShapeError("attention input", x.shape, (None, layer.cfg.model_dim, None))
    B, D, L = x.shape
    if h < 1 or D % h:
        raise ConfigError(f"{h} heads do not divide model dim {D}")
    dk = D // h
    seq = F.transpose(x, (0, 2, 1))
    if layer.cfg.positional_encoding:
        seq = seq + sinusoidal_positions(L, D).astype(x.dtype)

    def heads(t: Tensor) -> Tensor:
        return F.transpose(F.reshape(t, (B, L, h, dk)), (0, 2, 1, 3))

    q, k, v = heads(layer.q(seq)), heads(layer.k(seq)), heads(layer.v(seq))
    scores = F.matmul(q, F.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(dk))
    weights = F.softmax(scores, axis=-1)
    ctx = F.reshape(F.transpose(F.matmul(weights, v), (0, 2, 1, 3)), (B, L, D))
    out = F.transpose(layer.out(ctx), (0, 2, 1))
    return (out, weights.data) if return_weights else out


def transformer_block(x: Tensor, layer: AttentionLayer) -> Tensor:
    h = adaptive_heads(x.shape[2], layer.cfg.head_scale, layer.cfg.model_dim)
    attn = self_attention(x, layer, h)
    return F.reshape(layer.lam, (1, 1, 1)) * attn + x
