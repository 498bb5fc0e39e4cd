# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels: strided 1-D convolution, masked row softmax and the
multi-head scaled dot-product attention core.

Every function accepts C-contiguous float32 or float64 arrays and returns new
arrays of the same dtype. ``mask`` is ``None`` or a uint8 vector, 1 = keep.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, sqrt, INFINITY

cnp.import_array()

ctypedef fused real:
    float
    double


def _mask_view(mask, Py_ssize_t n):
    if mask is None:
        return np.ones(n, dtype=np.uint8)
    return np.ascontiguousarray(mask, dtype=np.uint8)


cdef void _conv_fwd(const real[:, ::1] x, const real[:, :, ::1] w, const real[::1] b,
                    real[:, ::1] y, Py_ssize_t stride, Py_ssize_t padding) noexcept nogil:
    cdef Py_ssize_t length = x.shape[0], d_in = x.shape[1]
    cdef Py_ssize_t kernel = w.shape[0], d_out = w.shape[2]
    cdef Py_ssize_t n_out = y.shape[0]
    cdef Py_ssize_t o, j, i, c, p
    cdef real xv
    for o in range(n_out):
        for c in range(d_out):
            y[o, c] = b[c]
        for j in range(kernel):
            p = o * stride + j - padding
            if p < 0 or p >= length:
                continue
            for i in range(d_in):
                xv = x[p, i]
                for c in range(d_out):
                    y[o, c] += xv * w[j, i, c]


def conv1d_forward(x, w, b, Py_ssize_t stride, Py_ssize_t padding):
    x = np.ascontiguousarray(x)
    w = np.ascontiguousarray(w, dtype=x.dtype)
    b = np.ascontiguousarray(b, dtype=x.dtype).reshape(-1)
    cdef Py_ssize_t n_out = (x.shape[0] + 2 * padding - w.shape[0]) // stride + 1
    y = np.empty((n_out, w.shape[2]), dtype=x.dtype)
    if x.dtype == np.float32:
        _conv_fwd[float](x, w, b, y, stride, padding)
    else:
        _conv_fwd[double](x, w, b, y, stride, padding)
    return y


cdef void _conv_bwd(const real[:, ::1] gy, const real[:, ::1] x, const real[:, :, ::1] w,
                    real[:, ::1] gx, real[:, :, ::1] gw, real[::1] gb,
                    Py_ssize_t stride, Py_ssize_t padding) noexcept nogil:
    cdef Py_ssize_t length = x.shape[0], d_in = x.shape[1]
    cdef Py_ssize_t kernel = w.shape[0], d_out = w.shape[2]
    cdef Py_ssize_t n_out = gy.shape[0]
    cdef Py_ssize_t o, j, i, c, p
    cdef real g, acc, xv
    for o in range(n_out):
        for c in range(d_out):
            gb[c] += gy[o, c]
        for j in range(kernel):
            p = o * stride + j - padding
            if p < 0 or p >= length:
                continue
            for i in range(d_in):
                xv = x[p, i]
                acc = 0
                for c in range(d_out):
                    g = gy[o, c]
                    gw[j, i, c] += xv * g
                    acc = acc + w[j, i, c] * g
                gx[p, i] += acc


def conv1d_backward(gy, x, w, Py_ssize_t stride, Py_ssize_t padding):
    x = np.ascontiguousarray(x)
    gy = np.ascontiguousarray(gy, dtype=x.dtype)
    w = np.ascontiguousarray(w, dtype=x.dtype)
    gx = np.zeros_like(x)
    gw = np.zeros_like(w)
    gb = np.zeros(w.shape[2], dtype=x.dtype)
    if x.dtype == np.float32:
        _conv_bwd[float](gy, x, w, gx, gw, gb, stride, padding)
    else:
        _conv_bwd[double](gy, x, w, gx, gw, gb, stride, padding)
    return gx, gw, gb


cdef void _softmax_rows(const real[:, ::1] s, const unsigned char[::1] keep,
                        real[:, ::1] out) noexcept nogil:
    cdef Py_ssize_t m = s.shape[0], n = s.shape[1]
    cdef Py_ssize_t r, c
    cdef double mx, total, e
    for r in range(m):
        mx = -INFINITY
        for c in range(n):
            if keep[c] and s[r, c] > mx:
                mx = s[r, c]
        total = 0.0
        for c in range(n):
            if keep[c]:
                e = exp(s[r, c] - mx)
                out[r, c] = <real>e
                total += e
            else:
                out[r, c] = 0
        for c in range(n):
            out[r, c] = <real>(out[r, c] / total)


def masked_softmax(s, mask):
    s = np.ascontiguousarray(s)
    keep = _mask_view(mask, s.shape[1])
    out = np.empty_like(s)
    if s.dtype == np.float32:
        _softmax_rows[float](s, keep, out)
    else:
        _softmax_rows[double](s, keep, out)
    return out


cdef void _softmax_bwd(const real[:, ::1] p, const real[:, ::1] gp, real[:, ::1] gs) noexcept nogil:
    cdef Py_ssize_t m = p.shape[0], n = p.shape[1]
    cdef Py_ssize_t r, c
    cdef double dot
    for r in range(m):
        dot = 0.0
        for c in range(n):
            dot += gp[r, c] * p[r, c]
        for c in range(n):
            gs[r, c] = <real>(p[r, c] * (gp[r, c] - dot))


def softmax_backward(p, gp):
    p = np.ascontiguousarray(p)
    gp = np.ascontiguousarray(gp, dtype=p.dtype)
    gs = np.empty_like(p)
    if p.dtype == np.float32:
        _softmax_bwd[float](p, gp, gs)
    else:
        _softmax_bwd[double](p, gp, gs)
    return gs


cdef void _attn_fwd(const real[:, ::1] q, const real[:, ::1] k, const real[:, ::1] v,
                    const unsigned char[::1] keep, Py_ssize_t heads,
                    real[:, ::1] o, real[:, :, ::1] p) noexcept nogil:
    cdef Py_ssize_t m = q.shape[0], n = k.shape[0], d = q.shape[1]
    cdef Py_ssize_t dk = d // heads
    cdef Py_ssize_t h, r, c, t, off
    cdef double scale = 1.0 / sqrt(<double>dk)
    cdef double acc, mx, total, e
    for h in range(heads):
        off = h * dk
        for r in range(m):
            mx = -INFINITY
            for c in range(n):
                if not keep[c]:
                    p[h, r, c] = 0
                    continue
                acc = 0.0
                for t in range(dk):
                    acc += q[r, off + t] * k[c, off + t]
                acc *= scale
                p[h, r, c] = <real>acc
                if acc > mx:
                    mx = acc
            total = 0.0
            for c in range(n):
                if keep[c]:
                    e = exp(p[h, r, c] - mx)
                    p[h, r, c] = <real>e
                    total += e
            for c in range(n):
                p[h, r, c] = <real>(p[h, r, c] / total)
            for t in range(dk):
                acc = 0.0
                for c in range(n):
                    acc += p[h, r, c] * v[c, off + t]
                o[r, off + t] = <real>acc


def attention_forward(q, k, v, mask, Py_ssize_t heads):
    q = np.ascontiguousarray(q)
    k = np.ascontiguousarray(k, dtype=q.dtype)
    v = np.ascontiguousarray(v, dtype=q.dtype)
    keep = _mask_view(mask, k.shape[0])
    o = np.empty_like(q)
    p = np.empty((heads, q.shape[0], k.shape[0]), dtype=q.dtype)
    if q.dtype == np.float32:
        _attn_fwd[float](q, k, v, keep, heads, o, p)
    else:
        _attn_fwd[double](q, k, v, keep, heads, o, p)
    return o, p


cdef void _attn_bwd(const real[:, ::1] go, const real[:, ::1] q, const real[:, ::1] k,
                    const real[:, ::1] v, const real[:, :, ::1] p, Py_ssize_t heads,
                    real[:, ::1] gq, real[:, ::1] gk, real[:, ::1] gv,
                    double[::1] gp_row) noexcept nogil:
    cdef Py_ssize_t m = q.shape[0], n = k.shape[0], d = q.shape[1]
    cdef Py_ssize_t dk = d // heads
    cdef Py_ssize_t h, r, c, t, off
    cdef double scale = 1.0 / sqrt(<double>dk)
    cdef double acc, dot, gs, pv
    for h in range(heads):
        off = h * dk
        for r in range(m):
            dot = 0.0
            for c in range(n):
                pv = p[h, r, c]
                acc = 0.0
                for t in range(dk):
                    acc += go[r, off + t] * v[c, off + t]
                gp_row[c] = acc
                dot += acc * pv
                if pv != 0:
                    for t in range(dk):
                        gv[c, off + t] += pv * go[r, off + t]
            for c in range(n):
                pv = p[h, r, c]
                if pv == 0:
                    continue
                gs = pv * (gp_row[c] - dot) * scale
                for t in range(dk):
                    gq[r, off + t] += gs * k[c, off + t]
                    gk[c, off + t] += gs * q[r, off + t]


def attention_backward(go, q, k, v, p, Py_ssize_t heads):
    q = np.ascontiguousarray(q)
    go = np.ascontiguousarray(go, dtype=q.dtype)
    k = np.ascontiguousarray(k, dtype=q.dtype)
    v = np.ascontiguousarray(v, dtype=q.dtype)
    p = np.ascontiguousarray(p, dtype=q.dtype)
    gq = np.zeros_like(q)
    gk = np.zeros_like(k)
    gv = np.zeros_like(v)
    scratch = np.empty(k.shape[0], dtype=np.float64)
    if q.dtype == np.float32:
        _attn_bwd[float](go, q, k, v, p, heads, gq, gk, gv, scratch)
    else:
        _attn_bwd[double](go, q, k, v, p, heads, gq, gk, gv, scratch)
    return gq, gk, gv
