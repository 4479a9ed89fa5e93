"""Jensen-Shannon divergence between pooled value histograms."""
from __future__ import annotations

import numpy as np

from ..errors import ConfigError, DataError

SMOOTHING = 1e-12


def jsd_from_probs(p, q, eps: float = SMOOTHING) -> float:
    """Natural-log JSD of two discrete distributions after additive ``eps`` smoothing."""
    p = np.asarray(p, dtype=np.float64) + eps
    q = np.asarray(q, dtype=np.float64) + eps
    p /= p.sum()
    q /= q.sum()
    m = 0.5 * (p + q)
    kl_pm = float(np.sum(p * np.log(p / m)))
    kl_qm = float(np.sum(q * np.log(q / m)))
    return max(0.0, 0.5 * kl_pm + 0.5 * kl_qm)


def _histograms(a: np.ndarray, b: np.ndarray, bins: int):
    lo = min(a.min(), b.min())
    hi = max(a.max(), b.max())
    if hi <= lo:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, bins + 1)
    pa, _ = np.histogram(a, bins=edges)
    pb, _ = np.histogram(b, bins=edges)
    return pa / a.size, pb / b.size


def jsd(real, synth, bins: int = 50, per_channel: bool = False) -> float:
    """JSD of the pooled value distributions of two ``[N, C, L]`` batches.

    Both sets are histogrammed over the union of their ranges with ``bins``
    equal-width bins. ``per_channel`` averages the per-channel divergences
    instead of pooling all channels.
    """
    if bins < 2:
        raise ConfigError(f"jsd needs at least 2 bins, got {bins}")
    a = np.asarray(real, dtype=np.float64)
    b = np.asarray(synth, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise DataError("jsd of an empty batch")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise DataError("jsd inputs contain non-finite values")
    if per_channel:
        if a.ndim != 3 or b.ndim != 3 or a.shape[1] != b.shape[1]:
            raise DataError(f"per-channel jsd needs matching [N, C, L] batches, got {a.shape} and {b.shape}")
        return float(np.mean([jsd(a[:, c], b[:, c], bins) for c in range(a.shape[1])]))
    pa, pb = _histograms(a.ravel(), b.ravel(), bins)
    return jsd_from_probs(pa, pb)
