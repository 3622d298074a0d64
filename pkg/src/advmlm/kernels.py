"""Hot numeric kernels.

Each kernel has two implementations: an explicit-loop version compiled
with numba (``_nb`` suffix) and a vectorised numpy version (``_np``
suffix).  The public wrappers dispatch on :func:`advmlm._backend.using_numba`,
so ``ADVMLM_NUMBA=0`` selects the numpy path for the whole process.
The two paths agree to rounding error; ``tests/test_kernels.py`` pins that.
"""
import math

import numpy as np

from ._backend import njit, using_numba


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# Scalar libm tanh (and expm1) cost several exp calls under numba, so the
# gates are written in terms of a single exp.
@njit
def _tanh_nb(x):
    ax = abs(x)
    if ax < 1e-4:
        return x - x * x * x / 3.0
    e = math.exp(-2.0 * ax)
    t = (1.0 - e) / (1.0 + e)
    return t if x >= 0 else -t


@njit
def _sigmoid_nb(x):
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


# ----------------------------------------------------------- masked softmax
@njit
def _masked_softmax_nb(x, mask):
    rows, cols = x.shape
    out = np.zeros_like(x)
    for i in range(rows):
        m = -np.inf
        for j in range(cols):
            if mask[i, j] and x[i, j] > m:
                m = x[i, j]
        if m == -np.inf:
            continue
        s = 0.0
        for j in range(cols):
            if mask[i, j]:
                e = np.exp(x[i, j] - m)
                out[i, j] = e
                s += e
        for j in range(cols):
            out[i, j] /= s
    return out


def _masked_softmax_np(x, mask):
    neg = np.where(mask, x, -np.inf)
    m = neg.max(axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(neg - m)
    s = e.sum(axis=-1, keepdims=True)
    return (e / np.where(s > 0, s, 1.0)).astype(x.dtype, copy=False)


def masked_softmax_forward(x, mask):
    if using_numba():
        shape = x.shape
        flat_x = np.ascontiguousarray(x).reshape(-1, shape[-1])
        flat_m = np.ascontiguousarray(mask).reshape(-1, shape[-1])
        return _masked_softmax_nb(flat_x, flat_m).reshape(shape)
    return _masked_softmax_np(x, mask)


# --------------------------------------------------------------- layer norm
@njit
def _layer_norm_forward_nb(x, eps):
    rows, cols = x.shape
    xhat = np.empty_like(x)
    rstd = np.empty((rows, 1), dtype=x.dtype)
    for i in range(rows):
        mu = 0.0
        for j in range(cols):
            mu += x[i, j]
        mu /= cols
        var = 0.0
        for j in range(cols):
            d = x[i, j] - mu
            var += d * d
        var /= cols
        r = 1.0 / np.sqrt(var + eps)
        rstd[i, 0] = r
        for j in range(cols):
            xhat[i, j] = (x[i, j] - mu) * r
    return xhat, rstd


def _layer_norm_forward_np(x, eps):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    return ((x - mu) * rstd).astype(x.dtype, copy=False), rstd.astype(x.dtype, copy=False)


@njit
def _layer_norm_backward_nb(gxhat, xhat, rstd):
    rows, cols = xhat.shape
    gx = np.empty_like(xhat)
    for i in range(rows):
        a = 0.0
        b = 0.0
        for j in range(cols):
            a += gxhat[i, j]
            b += gxhat[i, j] * xhat[i, j]
        a /= cols
        b /= cols
        for j in range(cols):
            gx[i, j] = rstd[i, 0] * (gxhat[i, j] - a - xhat[i, j] * b)
    return gx


def _layer_norm_backward_np(gxhat, xhat, rstd):
    a = gxhat.mean(axis=-1, keepdims=True)
    b = (gxhat * xhat).mean(axis=-1, keepdims=True)
    return rstd * (gxhat - a - xhat * b)


def layer_norm_forward(x, eps):
    if using_numba():
        shape = x.shape
        xhat, rstd = _layer_norm_forward_nb(np.ascontiguousarray(x).reshape(-1, shape[-1]), eps)
        return xhat.reshape(shape), rstd.reshape(shape[:-1] + (1,))
    return _layer_norm_forward_np(x, eps)


def layer_norm_backward(gxhat, xhat, rstd):
    if using_numba():
        shape = xhat.shape
        gx = _layer_norm_backward_nb(
            np.ascontiguousarray(gxhat, dtype=xhat.dtype).reshape(-1, shape[-1]),
            xhat.reshape(-1, shape[-1]),
            rstd.reshape(-1, 1),
        )
        return gx.reshape(shape)
    return _layer_norm_backward_np(gxhat, xhat, rstd)


# ---------------------------------------------------------------------- gru
# Saved activations are laid out [seq, batch, hidden] and indexed by the
# absolute position t, regardless of the direction the sequence was scanned.


@njit
def _gru_forward_nb(gi, w_hh_t, b_hh, mask, reverse):
    B, S, G = gi.shape
    H = G // 3
    dt = gi.dtype
    out = np.zeros((B, S, H), dtype=dt)
    hprev = np.zeros((S, B, H), dtype=dt)
    rs = np.zeros((S, B, H), dtype=dt)
    zs = np.zeros((S, B, H), dtype=dt)
    ns = np.zeros((S, B, H), dtype=dt)
    ghn = np.zeros((S, B, H), dtype=dt)
    h = np.zeros((B, H), dtype=dt)
    for step in range(S):
        t = S - 1 - step if reverse else step
        gh = np.dot(h, w_hh_t)
        for b in range(B):
            m = mask[b, t]
            for j in range(H):
                hp = h[b, j]
                hprev[t, b, j] = hp
                r = _sigmoid_nb(gi[b, t, j] + gh[b, j] + b_hh[j])
                z = _sigmoid_nb(gi[b, t, H + j] + gh[b, H + j] + b_hh[H + j])
                hn_lin = gh[b, 2 * H + j] + b_hh[2 * H + j]
                n = _tanh_nb(gi[b, t, 2 * H + j] + r * hn_lin)
                rs[t, b, j] = r
                zs[t, b, j] = z
                ns[t, b, j] = n
                ghn[t, b, j] = hn_lin
                hnew = (1.0 - z) * n + z * hp
                if m > 0:
                    out[b, t, j] = hnew
                    h[b, j] = hnew
    return out, hprev, rs, zs, ns, ghn


def _gru_forward_np(gi, w_hh_t, b_hh, mask, reverse):
    B, S, G = gi.shape
    H = G // 3
    dt = gi.dtype
    out = np.zeros((B, S, H), dtype=dt)
    hprev = np.zeros((S, B, H), dtype=dt)
    rs = np.zeros((S, B, H), dtype=dt)
    zs = np.zeros((S, B, H), dtype=dt)
    ns = np.zeros((S, B, H), dtype=dt)
    ghn = np.zeros((S, B, H), dtype=dt)
    h = np.zeros((B, H), dtype=dt)
    order = range(S - 1, -1, -1) if reverse else range(S)
    for t in order:
        gh = h @ w_hh_t + b_hh
        x = gi[:, t]
        r = sigmoid(x[:, :H] + gh[:, :H])
        z = sigmoid(x[:, H : 2 * H] + gh[:, H : 2 * H])
        n = np.tanh(x[:, 2 * H :] + r * gh[:, 2 * H :])
        hnew = (1.0 - z) * n + z * h
        m = mask[:, t, None]
        hprev[t], rs[t], zs[t], ns[t], ghn[t] = h, r, z, n, gh[:, 2 * H :]
        out[:, t] = m * hnew
        h = m * hnew + (1.0 - m) * h
    return out, hprev, rs, zs, ns, ghn


@njit
def _gru_backward_nb(dout, w_hh, mask, hprev, rs, zs, ns, ghn, reverse):
    B, S, H = dout.shape
    dt = dout.dtype
    dgi = np.zeros((B, S, 3 * H), dtype=dt)
    dgh_all = np.zeros((S, B, 3 * H), dtype=dt)
    dh = np.zeros((B, H), dtype=dt)
    dgh = np.zeros((B, 3 * H), dtype=dt)
    carry = np.zeros((B, H), dtype=dt)
    for step in range(S):
        t = step if reverse else S - 1 - step
        for b in range(B):
            m = mask[b, t]
            for j in range(H):
                dhn = m * (dout[b, t, j] + dh[b, j])
                z = zs[t, b, j]
                n = ns[t, b, j]
                r = rs[t, b, j]
                hp = hprev[t, b, j]
                dn = dhn * (1.0 - z)
                dz = dhn * (hp - n)
                da_n = dn * (1.0 - n * n)
                da_z = dz * z * (1.0 - z)
                da_r = da_n * ghn[t, b, j] * r * (1.0 - r)
                dgi[b, t, j] = da_r
                dgi[b, t, H + j] = da_z
                dgi[b, t, 2 * H + j] = da_n
                dgh[b, j] = da_r
                dgh[b, H + j] = da_z
                dgh[b, 2 * H + j] = da_n * r
                carry[b, j] = (1.0 - m) * dh[b, j] + dhn * z
        dgh_all[t] = dgh
        dh = carry + np.dot(dgh, w_hh)
    return dgi, dgh_all


def _gru_backward_np(dout, w_hh, mask, hprev, rs, zs, ns, ghn, reverse):
    B, S, H = dout.shape
    dgi = np.zeros((B, S, 3 * H), dtype=dout.dtype)
    dgh_all = np.zeros((S, B, 3 * H), dtype=dout.dtype)
    dh = np.zeros((B, H), dtype=dout.dtype)
    order = range(S) if reverse else range(S - 1, -1, -1)
    for t in order:
        m = mask[:, t, None]
        r, z, n = rs[t], zs[t], ns[t]
        dhn = m * (dout[:, t] + dh)
        dn = dhn * (1.0 - z)
        dz = dhn * (hprev[t] - n)
        da_n = dn * (1.0 - n * n)
        da_z = dz * z * (1.0 - z)
        da_r = da_n * ghn[t] * r * (1.0 - r)
        dgi[:, t] = np.concatenate([da_r, da_z, da_n], axis=1)
        dgh = np.concatenate([da_r, da_z, da_n * r], axis=1)
        dgh_all[t] = dgh
        dh = (1.0 - m) * dh + dhn * z + dgh @ w_hh
    return dgi, dgh_all


def gru_forward(gi, w_hh, b_hh, mask, reverse):
    """Forward GRU scan; returns outputs and the activations needed for backward."""
    gi = np.ascontiguousarray(gi)
    w_hh_t = np.ascontiguousarray(w_hh.T)
    mask = np.ascontiguousarray(mask, dtype=gi.dtype)
    fn = _gru_forward_nb if using_numba() else _gru_forward_np
    out, *saved = fn(gi, w_hh_t, np.ascontiguousarray(b_hh), mask, bool(reverse))
    return out, tuple(saved)


def gru_backward(dout, w_hh, mask, saved, reverse):
    """Gradients w.r.t. the projected inputs, recurrent weights and recurrent bias."""
    hprev = saved[0]
    mask = np.ascontiguousarray(mask, dtype=dout.dtype)
    fn = _gru_backward_nb if using_numba() else _gru_backward_np
    dgi, dgh_all = fn(np.ascontiguousarray(dout, dtype=hprev.dtype), np.ascontiguousarray(w_hh), mask, *saved, bool(reverse))
    S, B, G = dgh_all.shape
    flat = dgh_all.reshape(S * B, G)
    dw = flat.T @ hprev.reshape(S * B, -1)
    db = flat.sum(axis=0)
    return dgi, dw, db
