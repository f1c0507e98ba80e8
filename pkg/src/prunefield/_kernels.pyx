# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled twins of the loops in ``_kernels_py``. Same signatures, same results."""
import numpy as np
cimport numpy as cnp
from cython cimport floating
from libc.math cimport exp, expm1

cnp.import_array()


def composite_forward(const floating[:, :] sigma, const floating[:, :] delta, const floating[:, :, :] rgb,
                      const floating[:, :] t, background, double t_far):
    cdef Py_ssize_t B = sigma.shape[0], S = sigma.shape[1], r, s, c
    dtype = np.float32 if floating is float else np.float64
    color_a = np.empty((B, 3), dtype=dtype)
    depth_a = np.empty(B, dtype=dtype)
    tf_a = np.empty(B, dtype=dtype)
    w_a = np.empty((B, S), dtype=dtype)
    cdef floating[:, ::1] color = color_a
    cdef floating[::1] depth = depth_a
    cdef floating[::1] tfinal = tf_a
    cdef floating[:, ::1] w = w_a
    cdef double[::1] bg = np.asarray(background, dtype=np.float64)
    cdef double T, tau, wi, acc0, acc1, acc2, dep
    with nogil:
        for r in range(B):
            T = 1.0
            acc0 = 0.0
            acc1 = 0.0
            acc2 = 0.0
            dep = 0.0
            for s in range(S):
                tau = sigma[r, s] * delta[r, s]
                wi = T * -expm1(-tau)
                w[r, s] = <floating>wi
                acc0 += wi * rgb[r, s, 0]
                acc1 += wi * rgb[r, s, 1]
                acc2 += wi * rgb[r, s, 2]
                dep += wi * t[r, s]
                T = T * exp(-tau)
            color[r, 0] = <floating>(acc0 + T * bg[0])
            color[r, 1] = <floating>(acc1 + T * bg[1])
            color[r, 2] = <floating>(acc2 + T * bg[2])
            depth[r] = <floating>(dep + T * t_far)
            tfinal[r] = <floating>T
    return color_a, depth_a, tf_a, w_a


def composite_backward(const floating[:, :] sigma, const floating[:, :] delta, const floating[:, :, :] rgb,
                       const floating[:, :] weights, const floating[:] t_final, background,
                       const floating[:, :] grad_color):
    cdef Py_ssize_t B = sigma.shape[0], S = sigma.shape[1], r, s
    dtype = np.float32 if floating is float else np.float64
    gs_a = np.empty((B, S), dtype=dtype)
    gr_a = np.empty((B, S, 3), dtype=dtype)
    cdef floating[:, ::1] gsig = gs_a
    cdef floating[:, :, ::1] grgb = gr_a
    cdef double[::1] bg = np.asarray(background, dtype=np.float64)
    cdef double cum, tail0, tail1, tail2, g0, g1, g2, tnext, wi
    with nogil:
        for r in range(B):
            g0 = grad_color[r, 0]
            g1 = grad_color[r, 1]
            g2 = grad_color[r, 2]
            cum = 0.0
            for s in range(S):
                cum += sigma[r, s] * delta[r, s]
            # walk backwards: tail holds sum_{i>s} w_i c_i + T_N bg
            tail0 = t_final[r] * bg[0]
            tail1 = t_final[r] * bg[1]
            tail2 = t_final[r] * bg[2]
            for s in range(S - 1, -1, -1):
                tnext = exp(-cum)
                wi = weights[r, s]
                gsig[r, s] = <floating>(delta[r, s] * (
                    g0 * (tnext * rgb[r, s, 0] - tail0)
                    + g1 * (tnext * rgb[r, s, 1] - tail1)
                    + g2 * (tnext * rgb[r, s, 2] - tail2)))
                grgb[r, s, 0] = <floating>(wi * g0)
                grgb[r, s, 1] = <floating>(wi * g1)
                grgb[r, s, 2] = <floating>(wi * g2)
                tail0 += wi * rgb[r, s, 0]
                tail1 += wi * rgb[r, s, 1]
                tail2 += wi * rgb[r, s, 2]
                cum -= sigma[r, s] * delta[r, s]
    return gs_a, gr_a


cdef inline Py_ssize_t _find(Py_ssize_t[::1] parent, Py_ssize_t x) noexcept nogil:
    cdef Py_ssize_t root = x, nxt
    while parent[root] != root:
        root = parent[root]
    while parent[x] != root:
        nxt = parent[x]
        parent[x] = root
        x = nxt
    return root


cdef inline Py_ssize_t _union(Py_ssize_t[::1] parent, Py_ssize_t[::1] size,
                              Py_ssize_t x, Py_ssize_t y) noexcept nogil:
    cdef Py_ssize_t tmp
    if size[x] < size[y]:
        tmp = x
        x = y
        y = tmp
    parent[y] = x
    size[x] += size[y]
    return x


def fh_merge(const cnp.int64_t[::1] a, const cnp.int64_t[::1] b, const double[::1] w, Py_ssize_t n, double k,
             Py_ssize_t min_size):
    cdef Py_ssize_t m = a.shape[0], i, ra, rb, root
    parent_a = np.arange(n, dtype=np.intp)
    size_a = np.ones(n, dtype=np.intp)
    thresh_a = np.full(n, k, dtype=np.float64)
    cdef Py_ssize_t[::1] parent = parent_a
    cdef Py_ssize_t[::1] size = size_a
    cdef double[::1] thresh = thresh_a
    out_a = np.empty(n, dtype=np.int64)
    cdef cnp.int64_t[::1] out = out_a
    with nogil:
        for i in range(m):
            ra = _find(parent, a[i])
            rb = _find(parent, b[i])
            if ra != rb and w[i] <= thresh[ra] and w[i] <= thresh[rb]:
                root = _union(parent, size, ra, rb)
                thresh[root] = w[i] + k / size[root]
        for i in range(m):
            ra = _find(parent, a[i])
            rb = _find(parent, b[i])
            if ra != rb and (size[ra] < min_size or size[rb] < min_size):
                _union(parent, size, ra, rb)
        for i in range(n):
            out[i] = _find(parent, i)
    return out_a
