"""Differentiable operators used by the denoiser, metric networks and classifier.

Every function takes and returns :class:`Tensor` objects and records its
own backward rule.  Constant operands may be plain numpy arrays.
"""
from __future__ import annotations

import numpy as np
from scipy.special import expit

from ..errors import ConfigError, ShapeError
from .tensor import Tensor, _check_axis, concat, getitem, matmul, mean, reshape, transpose, tsum

__all__ = [
    "conv1d", "linear", "matmul", "softmax", "log_softmax", "silu", "relu", "sigmoid", "tanh",
    "exp", "log", "batchnorm1d", "layernorm", "upsample_nearest", "downsample_stride",
    "mse_loss", "l1_loss", "bce_loss", "bce_with_logits", "l2_normalize", "gru", "lstm",
    "concat", "reshape", "transpose", "mean", "tsum", "getitem",
]


def _const(x, like: Tensor) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=like.dtype)


# -- convolution / linear -----------------------------------------------------

def _resolve_padding(padding, kernel: int, dilation: int, stride: int):
    if isinstance(padding, str):
        if padding != "same":
            raise ConfigError(f"unknown padding mode {padding!r}")
        if stride != 1:
            raise ConfigError("'same' padding requires stride 1")
        total = dilation * (kernel - 1)
        return total // 2, total - total // 2
    if isinstance(padding, (tuple, list)):
        left, right = (int(p) for p in padding)
        return left, right
    return int(padding), int(padding)


def conv1d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1,
           dilation: int = 1, padding="same") -> Tensor:
    """1-D cross-correlation of ``x[B, Cin, L]`` with ``w[Cout, Cin, K]``.

    ``padding`` is ``"same"``, a symmetric int, or a ``(left, right)`` pair.
    Output length is ``(L + left + right - dilation*(K-1) - 1) // stride + 1``.
    """
    if x.ndim != 3 or w.ndim != 3 or x.shape[1] != w.shape[1]:
        raise ShapeError("conv1d input/weight channel mismatch", x.shape, w.shape)
    if stride < 1 or dilation < 1 or w.shape[2] < 1:
        raise ConfigError("conv1d needs positive stride, dilation and kernel size")
    B, cin, L = x.shape
    cout, _, K = w.shape
    left, right = _resolve_padding(padding, K, dilation, stride)
    xd = x.data
    if left or right:
        xd = np.pad(xd, ((0, 0), (0, 0), (left, right)))
    Lp = L + left + right
    Lout = (Lp - dilation * (K - 1) - 1) // stride + 1
    if Lout < 1:
        raise ShapeError("conv1d input shorter than the dilated kernel", x.shape, w.shape)
    span = stride * (Lout - 1) + 1
    # cols[b, c*K + k, l] = xpad[b, c, l*stride + k*dilation]
    cols = np.stack([xd[:, :, k * dilation:k * dilation + span:stride] for k in range(K)], axis=2)
    cols = cols.reshape(B, cin * K, Lout)
    w2 = w.data.reshape(cout, cin * K)
    out = np.matmul(w2, cols)
    if bias is not None:
        out += bias.data[:, None]

    def backward(g):
        gw = np.tensordot(g, cols, axes=([0, 2], [0, 2])).reshape(cout, cin, K)
        gcols = np.matmul(w2.T, g).reshape(B, cin, K, Lout)
        gxp = np.zeros((B, cin, Lp), dtype=g.dtype)
        for k in range(K):
            gxp[:, :, k * dilation:k * dilation + span:stride] += gcols[:, :, k, :]
        gx = gxp[:, :, left:left + L]
        gb = g.sum(axis=(0, 2)) if bias is not None else None
        return gx, gw, gb

    parents = (x, w, bias) if bias is not None else (x, w)
    return Tensor._from_op(out, parents, backward)


def linear(x: Tensor, w: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ w.T + bias`` over the last axis; ``w`` is ``[out, in]``."""
    if x.shape[-1] != w.shape[1]:
        raise ShapeError("linear input features differ from weight", x.shape, w.shape)
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ w.data.T
    if bias is not None:
        out = out + bias.data
    out = out.reshape(lead + (w.shape[0],))

    def backward(g):
        g2 = g.reshape(-1, w.shape[0])
        gx = (g2 @ w.data).reshape(x.shape)
        gw = g2.T @ x2
        gb = g2.sum(axis=0) if bias is not None else None
        return gx, gw, gb

    parents = (x, w, bias) if bias is not None else (x, w)
    return Tensor._from_op(out, parents, backward)


# -- pointwise activations ----------------------------------------------------

def _sigmoid(v: np.ndarray) -> np.ndarray:
    return expit(v)


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return Tensor._from_op(s, (x,), lambda g: (g * s * (1.0 - s),))


def silu(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    xd = x.data
    return Tensor._from_op(xd * s, (x,), lambda g: (g * (s * (1.0 + xd * (1.0 - s))),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._from_op(x.data * mask, (x,), lambda g: (g * mask,))


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return Tensor._from_op(t, (x,), lambda g: (g * (1.0 - t * t),))


def exp(x: Tensor) -> Tensor:
    e = np.exp(x.data)
    return Tensor._from_op(e, (x,), lambda g: (g * e,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return Tensor._from_op(np.log(xd), (x,), lambda g: (g / xd,))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis(axis, x.ndim)
    if x.shape[axis] == 0:
        raise ShapeError("softmax over a zero-length axis", x.shape)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)
    return Tensor._from_op(s, (x,), lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),))


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis(axis, x.ndim)
    if x.shape[axis] == 0:
        raise ShapeError("log_softmax over a zero-length axis", x.shape)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    s = np.exp(out)
    return Tensor._from_op(out, (x,), lambda g: (g - s * g.sum(axis=axis, keepdims=True),))


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-8) -> Tensor:
    axis = _check_axis(axis, x.ndim)
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True) + eps)
    y = x.data / norm
    return Tensor._from_op(y, (x,), lambda g: ((g - y * (g * y).sum(axis=axis, keepdims=True)) / norm,))


# -- normalization ------------------------------------------------------------

def batchnorm1d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
                running_var: np.ndarray, training: bool, momentum: float = 0.1,
                eps: float = 1e-5) -> Tensor:
    """Batch normalization over channel axis 1 of ``[B, C]`` or ``[B, C, L]``.

    In training mode batch statistics are used and the running buffers are
    updated in place (unbiased variance); in eval mode the buffers are used.
    """
    if x.ndim not in (2, 3) or x.shape[1] != gamma.shape[0]:
        raise ShapeError("batchnorm1d channel mismatch", x.shape, gamma.shape)
    axes = (0,) if x.ndim == 2 else (0, 2)
    view = (1, -1) if x.ndim == 2 else (1, -1, 1)
    count = x.shape[0] * (1 if x.ndim == 2 else x.shape[2])
    if count == 0:
        raise ShapeError("batchnorm1d over an empty batch", x.shape)
    gd, bd = gamma.data.reshape(view), beta.data.reshape(view)

    if training:
        mu = x.data.mean(axis=axes, keepdims=True)
        centered = x.data - mu
        var = (centered * centered).mean(axis=axes, keepdims=True)
        invstd = 1.0 / np.sqrt(var + eps)
        xhat = centered * invstd
        unbiased = var.reshape(-1) * (count / max(count - 1, 1))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.reshape(-1)
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased

        def backward(g):
            dxhat = g * gd
            gx = invstd / count * (count * dxhat - dxhat.sum(axis=axes, keepdims=True)
                                   - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True))
            return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)
    else:
        invstd = 1.0 / np.sqrt(running_var.reshape(view) + eps)
        xhat = (x.data - running_mean.reshape(view)) * invstd

        def backward(g):
            return g * gd * invstd, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    out = (xhat * gd + bd).astype(x.dtype, copy=False)
    return Tensor._from_op(out, (x, gamma, beta), backward)


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis."""
    if x.shape[-1] != gamma.shape[0]:
        raise ShapeError("layernorm feature mismatch", x.shape, gamma.shape)
    n = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    invstd = 1.0 / np.sqrt(var + eps)
    xhat = centered * invstd
    lead = tuple(range(x.ndim - 1))

    def backward(g):
        dxhat = g * gamma.data
        gx = invstd / n * (n * dxhat - dxhat.sum(axis=-1, keepdims=True)
                           - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return Tensor._from_op(xhat * gamma.data + beta.data, (x, gamma, beta), backward)


# -- resampling along the last axis ---------------------------------------------

def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    shape = x.shape
    out = np.repeat(x.data, factor, axis=-1)
    return Tensor._from_op(out, (x,), lambda g: (g.reshape(shape + (factor,)).sum(axis=-1),))


def downsample_stride(x: Tensor, stride: int = 2) -> Tensor:
    return getitem(x, (Ellipsis, slice(None, None, stride)))


# -- losses -------------------------------------------------------------------

def mse_loss(pred: Tensor, target) -> Tensor:
    t = _const(target, pred)
    diff = pred.data - t
    n = diff.size

    def backward(g):
        gp = 2.0 * g * diff / n
        return (gp, -gp) if isinstance(target, Tensor) else (gp,)

    parents = (pred, target) if isinstance(target, Tensor) else (pred,)
    return Tensor._from_op(np.asarray(np.mean(diff * diff), dtype=pred.dtype), parents, backward)


def l1_loss(pred: Tensor, target) -> Tensor:
    """Mean absolute error; the subgradient at zero is zero."""
    t = _const(target, pred)
    diff = pred.data - t
    n = diff.size

    def backward(g):
        gp = g * np.sign(diff) / n
        return (gp, -gp) if isinstance(target, Tensor) else (gp,)

    parents = (pred, target) if isinstance(target, Tensor) else (pred,)
    return Tensor._from_op(np.asarray(np.mean(np.abs(diff)), dtype=pred.dtype), parents, backward)


def bce_loss(prob: Tensor, target, eps: float = 1e-7) -> Tensor:
    """Binary cross-entropy on probabilities (clipped to ``[eps, 1-eps]``)."""
    y = _const(target, prob)
    p = np.clip(prob.data, eps, 1.0 - eps)
    n = p.size
    value = -np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))
    inside = (prob.data > eps) & (prob.data < 1.0 - eps)
    return Tensor._from_op(np.asarray(value, dtype=prob.dtype), (prob,),
                           lambda g: (g * inside * (p - y) / (p * (1.0 - p)) / n,))


def bce_with_logits(logits: Tensor, target) -> Tensor:
    y = _const(target, logits)
    z = logits.data
    n = z.size
    value = np.mean(np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z))))
    s = _sigmoid(z)
    return Tensor._from_op(np.asarray(value, dtype=logits.dtype), (logits,), lambda g: (g * (s - y) / n,))


# -- fused recurrent layers -----------------------------------------------------

def gru(x: Tensor, w_ih: Tensor, w_hh: Tensor, b_ih: Tensor, b_hh: Tensor) -> Tensor:
    """Single-layer GRU over ``x[B, L, I]`` from a zero state; returns ``[B, L, H]``.

    Gate layout in the stacked weights is (reset, update, new)::

        r = sigmoid(W_ir x + b_ir + W_hr h + b_hr)
        z = sigmoid(W_iz x + b_iz + W_hz h + b_hz)
        n = tanh(W_in x + b_in + r * (W_hn h + b_hn))
        h' = (1 - z) * n + z * h
    """
    B, L, I = x.shape
    H = w_hh.shape[1]
    if w_ih.shape != (3 * H, I) or w_hh.shape != (3 * H, H):
        raise ShapeError("gru weight shapes", x.shape, w_ih.shape, w_hh.shape)
    dt = x.dtype
    gi = (x.data.reshape(B * L, I) @ w_ih.data.T + b_ih.data).reshape(B, L, 3 * H)
    whh_t = w_hh.data.T
    h = np.zeros((B, H), dtype=dt)
    hs = np.empty((B, L, H), dtype=dt)
    cache = []
    for t in range(L):
        gh = h @ whh_t + b_hh.data
        git = gi[:, t]
        r = _sigmoid(git[:, :H] + gh[:, :H])
        z = _sigmoid(git[:, H:2 * H] + gh[:, H:2 * H])
        n = np.tanh(git[:, 2 * H:] + r * gh[:, 2 * H:])
        h_prev = h
        h = (1.0 - z) * n + z * h_prev
        hs[:, t] = h
        cache.append((h_prev, r, z, n, gh[:, 2 * H:]))

    def backward(g):
        dgi = np.empty((B, L, 3 * H), dtype=dt)
        dwhh = np.zeros_like(w_hh.data)
        dbhh = np.zeros_like(b_hh.data)
        dh_next = np.zeros((B, H), dtype=dt)
        for t in range(L - 1, -1, -1):
            h_prev, r, z, n, ghn = cache[t]
            dh = g[:, t] + dh_next
            dn = dh * (1.0 - z) * (1.0 - n * n)
            dz = dh * (h_prev - n) * z * (1.0 - z)
            dr = dn * ghn * r * (1.0 - r)
            dgh = np.concatenate([dr, dz, dn * r], axis=1)
            dgi[:, t] = np.concatenate([dr, dz, dn], axis=1)
            dwhh += dgh.T @ h_prev
            dbhh += dgh.sum(axis=0)
            dh_next = dh * z + dgh @ w_hh.data
        dgi2 = dgi.reshape(B * L, 3 * H)
        dx = (dgi2 @ w_ih.data).reshape(B, L, I)
        dwih = dgi2.T @ x.data.reshape(B * L, I)
        return dx, dwih, dwhh, dgi2.sum(axis=0), dbhh

    return Tensor._from_op(hs, (x, w_ih, w_hh, b_ih, b_hh), backward)


def lstm(x: Tensor, w_ih: Tensor, w_hh: Tensor, b_ih: Tensor, b_hh: Tensor) -> Tensor:
    """Single-layer LSTM over ``x[B, L, I]`` from zero state; returns ``[B, L, H]``.

    Gate layout (input, forget, cell, output)::

        i, f, o = sigmoid(.), g = tanh(.)   # of W_ih x + b_ih + W_hh h + b_hh
        c' = f * c + i * g
        h' = o * tanh(c')
    """
    B, L, I = x.shape
    H = w_hh.shape[1]
    if w_ih.shape != (4 * H, I) or w_hh.shape != (4 * H, H):
        raise ShapeError("lstm weight shapes", x.shape, w_ih.shape, w_hh.shape)
    dt = x.dtype
    gx = (x.data.reshape(B * L, I) @ w_ih.data.T + b_ih.data + b_hh.data).reshape(B, L, 4 * H)
    whh_t = w_hh.data.T
    h = np.zeros((B, H), dtype=dt)
    c = np.zeros((B, H), dtype=dt)
    hs = np.empty((B, L, H), dtype=dt)
    cache = []
    for t in range(L):
        a = gx[:, t] + h @ whh_t
        i = _sigmoid(a[:, :H])
        f = _sigmoid(a[:, H:2 * H])
        gg = np.tanh(a[:, 2 * H:3 * H])
        o = _sigmoid(a[:, 3 * H:])
        c_prev, h_prev = c, h
        c = f * c_prev + i * gg
        tc = np.tanh(c)
        h = o * tc
        hs[:, t] = h
        cache.append((h_prev, c_prev, i, f, gg, o, tc))

    def backward(g):
        da_all = np.empty((B, L, 4 * H), dtype=dt)
        dwhh = np.zeros_like(w_hh.data)
        dh_next = np.zeros((B, H), dtype=dt)
        dc_next = np.zeros((B, H), dtype=dt)
        for t in range(L - 1, -1, -1):
            h_prev, c_prev, i, f, gg, o, tc = cache[t]
            dh = g[:, t] + dh_next
            dc = dc_next + dh * o * (1.0 - tc * tc)
            da = np.concatenate([
                dc * gg * i * (1.0 - i),
                dc * c_prev * f * (1.0 - f),
                dc * i * (1.0 - gg * gg),
                dh * tc * o * (1.0 - o),
            ], axis=1)
            da_all[:, t] = da
            dwhh += da.T @ h_prev
            dh_next = da @ w_hh.data
            dc_next = dc * f
        da2 = da_all.reshape(B * L, 4 * H)
        dx = (da2 @ w_ih.data).reshape(B, L, I)
        db = da2.sum(axis=0)
        return dx, da2.T @ x.data.reshape(B * L, I), dwhh, db, db

    return Tensor._from_op(hs, (x, w_ih, w_hh, b_ih, b_hh), backward)
