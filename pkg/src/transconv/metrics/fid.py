"""Context-FID: Frechet distance between Gaussian fits of learned window embeddings."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from ..errors import DataError, ShapeError
from ..ndgrad import Adam, Conv1d, Linear, Module, ModuleList, Tensor, new_rng, no_grad, precision
from ..ndgrad import functional as F

MIN_ENCODER_WINDOWS = 64


@dataclass
class EncoderConfig:
    embed_dim: int = 16
    hidden: int = 32
    dilations: tuple = (1, 2, 4)
    kernel_size: int = 3
    steps: int = 1000
    batch_size: int = 32
    learning_rate: float = 1e-3
    temperature: float = 0.1
    crop_fraction: float = 0.75


class ContextEncoder(Module):
    """Causal dilated conv stack, mean-pooled over time, then a linear projection."""

    def __init__(self, channels: int, cfg: EncoderConfig, rng):
        super().__init__()
        self.cfg = cfg
        self.convs = ModuleList()
        width = channels
        for d in cfg.dilations:
            pad = (d * (cfg.kernel_size - 1), 0)
            self.convs.append(Conv1d(width, cfg.hidden, cfg.kernel_size, rng, dilation=d, padding=pad))
            width = cfg.hidden
        self.proj = Linear(cfg.hidden, cfg.embed_dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        h = x
        for conv in self.convs:
            h = F.silu(conv(h))
        return self.proj(F.mean(h, axis=2))

    def embed(self, windows, batch: int = 256) -> np.ndarray:
        w = np.asarray(windows, dtype=np.float32)
        with no_grad():
            parts = [self(Tensor(w[i:i + batch])).data for i in range(0, len(w), batch)]
        return np.concatenate(parts).astype(np.float64)

    def digest(self) -> str:
        h = hashlib.sha256()
        for name, p in self.named_parameters():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
        return h.hexdigest()


def _crops(windows: np.ndarray, idx: np.ndarray, length: int, rng) -> np.ndarray:
    starts = rng.integers(0, windows.shape[2] - length + 1, size=idx.size)
    cols = starts[:, None] + np.arange(length)[None, :]
    return windows[idx[:, None], :, cols].transpose(0, 2, 1)


def info_nce(z1: Tensor, z2: Tensor, temperature: float) -> Tensor:
    """Symmetric InfoNCE where row ``i`` of ``z1`` and ``z2`` form the positive pair."""
    a, b = F.l2_normalize(z1, axis=1), F.l2_normalize(z2, axis=1)
    logits = F.matmul(a, F.transpose(b, (1, 0))) * (1.0 / temperature)
    eye = np.eye(z1.shape[0], dtype=z1.dtype)
    n = float(z1.shape[0])
    rows = F.tsum(F.log_softmax(logits, axis=1) * eye) * (-1.0 / n)
    cols = F.tsum(F.log_softmax(logits, axis=0) * eye) * (-1.0 / n)
    return (rows + cols) * 0.5


def train_context_encoder(real_train, seed: int = 0, cfg: EncoderConfig = EncoderConfig()) -> ContextEncoder:
    """Fit the encoder so overlapping crops of one window embed close together."""
    w = np.asarray(real_train, dtype=np.float32)
    if w.ndim != 3:
        raise ShapeError("encoder training windows must be [N, C, L]", w.shape)
    if len(w) < MIN_ENCODER_WINDOWS:
        raise DataError(f"context encoder needs at least {MIN_ENCODER_WINDOWS} windows, got {len(w)}")
    length = max(2, int(round(cfg.crop_fraction * w.shape[2])))
    rng = new_rng(seed)
    with precision(32):
        enc = ContextEncoder(w.shape[1], cfg, rng)
        opt = Adam(enc.named_parameters(), lr=cfg.learning_rate)
        for _ in range(cfg.steps):
            idx = rng.choice(len(w), size=min(cfg.batch_size, len(w)), replace=False)
            c1, c2 = _crops(w, idx, length, rng), _crops(w, idx, length, rng)
            loss = info_nce(enc(Tensor(c1)), enc(Tensor(c2)), cfg.temperature)
            opt.zero_grad()
            loss.backward()
            opt.step()
    enc.eval()
    return enc


def _psd_sqrt(s: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(0.5 * (s + s.T))
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def frechet_distance(mu1, sigma1, mu2, sigma2, tol: float = 1e-8) -> tuple:
    """``(distance, degraded)`` between ``N(mu1, sigma1)`` and ``N(mu2, sigma2)``.

    The trace of ``(sigma1 sigma2)^{1/2}`` comes from the eigenvalues of the
    symmetric matrix ``sigma1^{1/2} sigma2 sigma1^{1/2}``, clamped at zero.
    ``degraded`` flags clamped eigenvalues or a negative total, either of
    which means the covariances were not numerically PSD.
    """
    mu1, mu2 = np.asarray(mu1, np.float64), np.asarray(mu2, np.float64)
    s1, s2 = np.atleast_2d(np.asarray(sigma1, np.float64)), np.atleast_2d(np.asarray(sigma2, np.float64))
    if s1.shape != s2.shape or mu1.shape != mu2.shape or s1.shape[0] != mu1.size:
        raise ShapeError("Gaussian parameters disagree", mu1.shape, s1.shape, mu2.shape, s2.shape)
    scale = max(np.abs(s1).max(initial=0.0), np.abs(s2).max(initial=0.0), 1.0)
    degraded = False
    for s in (s1, s2):
        if np.linalg.eigvalsh(0.5 * (s + s.T)).min(initial=0.0) < -tol * scale:
            degraded = True
    root = _psd_sqrt(s1)
    inner = root @ s2 @ root
    vals = np.linalg.eigvalsh(0.5 * (inner + inner.T))
    if vals.min(initial=0.0) < -tol * scale * scale:
        degraded = True
    tr_cross = float(np.sum(np.sqrt(np.clip(vals, 0.0, None))))
    diff = mu1 - mu2
    value = float(diff @ diff + np.trace(s1) + np.trace(s2) - 2.0 * tr_cross)
    if not np.isfinite(value):
        raise DataError("Frechet distance is not finite")
    if value < 0:
        degraded = degraded or value < -tol * scale
        value = 0.0
    return value, degraded


def gaussian_fit(emb: np.ndarray) -> tuple:
    if len(emb) < 2:
        raise DataError("need at least 2 embeddings to fit a covariance")
    return emb.mean(axis=0), np.cov(emb, rowvar=False)


def context_fid(real, synth, encoder: ContextEncoder, with_flag: bool = False):
    er, es = encoder.embed(real), encoder.embed(synth)
    value, degraded = frechet_distance(*gaussian_fit(er), *gaussian_fit(es))
    return (value, degraded) if with_flag else value
