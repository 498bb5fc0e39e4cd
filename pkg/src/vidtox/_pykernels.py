"""Pure numpy implementations of the hot kernels.

Used when the compiled extension is unavailable or when
``VIDTOX_PURE_PYTHON=1`` is set. Signatures mirror ``_ckernels``.
"""

import numpy as np


def _conv_index(length, kernel, stride, padding):
    n_out = (length + 2 * padding - kernel) // stride + 1
    return np.arange(n_out)[:, None] * stride + np.arange(kernel)[None, :] - padding


def conv1d_forward(x, w, b, stride, padding):
    length, d_in = x.shape
    kernel, _, d_out = w.shape
    idx = _conv_index(length, kernel, stride, padding)
    xp = np.zeros((length + 1, d_in), dtype=x.dtype)
    xp[:length] = x
    # out-of-range taps read the trailing zero row
    idx = np.where((idx < 0) | (idx >= length), length, idx)
    cols = xp[idx].reshape(idx.shape[0], kernel * d_in)
    return cols @ w.reshape(kernel * d_in, d_out) + b


def conv1d_backward(gy, x, w, stride, padding):
    length, d_in = x.shape
    kernel, _, d_out = w.shape
    idx = _conv_index(length, kernel, stride, padding)
    valid = (idx >= 0) & (idx < length)
    safe = np.where(valid, idx, length)
    xp = np.zeros((length + 1, d_in), dtype=x.dtype)
    xp[:length] = x
    cols = xp[safe].reshape(idx.shape[0], kernel * d_in)
    gw = (cols.T @ gy).reshape(kernel, d_in, d_out)
    gb = gy.sum(axis=0)
    gcols = (gy @ w.reshape(kernel * d_in, d_out).T).reshape(idx.shape[0], kernel, d_in)
    gxp = np.zeros((length + 1, d_in), dtype=x.dtype)
    np.add.at(gxp, safe, gcols)
    return gxp[:length], gw, gb


def masked_softmax(s, mask):
    if mask is None:
        z = s - s.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)
    keep = mask.astype(bool)
    z = np.where(keep[None, :], s, -np.inf)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_backward(p, gp):
    return p * (gp - (gp * p).sum(axis=1, keepdims=True))


def _split(a, heads):
    rows, d = a.shape
    return a.reshape(rows, heads, d // heads).transpose(1, 0, 2)


def attention_forward(q, k, v, mask, heads):
    dk = q.shape[1] // heads
    qh, kh, vh = _split(q, heads), _split(k, heads), _split(v, heads)
    s = qh @ kh.transpose(0, 2, 1) / np.sqrt(dk)
    if mask is not None:
        s = np.where(mask.astype(bool)[None, None, :], s, -np.inf)
    s = s - s.max(axis=2, keepdims=True)
    p = np.exp(s)
    p /= p.sum(axis=2, keepdims=True)
    o = p @ vh
    return o.transpose(1, 0, 2).reshape(q.shape), p


def attention_backward(go, q, k, v, p, heads):
    dk = q.shape[1] // heads
    scale = 1.0 / np.sqrt(dk)
    qh, kh, vh = _split(q, heads), _split(k, heads), _split(v, heads)
    goh = _split(go, heads)
    gp = goh @ vh.transpose(0, 2, 1)
    gv = p.transpose(0, 2, 1) @ goh
    gs = p * (gp - (gp * p).sum(axis=2, keepdims=True)) * scale
    gq = gs @ kh
    gk = gs.transpose(0, 2, 1) @ qh

    def merge(a, rows):
        return a.transpose(1, 0, 2).reshape(rows, -1)

    return merge(gq, q.shape[0]), merge(gk, k.shape[0]), merge(gv, v.shape[0])
