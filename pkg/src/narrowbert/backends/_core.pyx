# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled kernel core.

Mirrors `pure.py`.  The *_exact matmuls fix a per-row operation order
(single accumulator, ascending reduction index) so that row subsets and
row supersets produce bit-identical floats; the *_acc kernels add row
contributions in ascending row order so consecutive micro-batches
accumulate to the same bits as one large batch.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, log, sqrt, tanh

cnp.import_array()

NAME = "compiled"

ctypedef fused floating:
    float
    double

cdef double GELU_C = 0.7978845608028654  # sqrt(2/pi)
cdef double GELU_A = 0.044715


def mm_exact(double[:, ::1] a, double[:, ::1] b):
    """a (R,K) @ b (K,N), float64, row-stable ascending-k accumulation."""
    cdef Py_ssize_t R = a.shape[0], K = a.shape[1], N = b.shape[1]
    cdef cnp.ndarray[double, ndim=2] out = np.zeros((R, N), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef Py_ssize_t i, k, j
    cdef double aik
    for i in range(R):
        for k in range(K):
            aik = a[i, k]
            for j in range(N):
                o[i, j] += aik * b[k, j]
    return out


def mm_nt_exact(double[:, ::1] a, double[:, ::1] b):
    """a (R,N) @ b.T for b (K,N): out[i,k] = dot(a[i], b[k])."""
    cdef Py_ssize_t R = a.shape[0], N = a.shape[1], K = b.shape[0]
    cdef cnp.ndarray[double, ndim=2] out = np.empty((R, K), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef Py_ssize_t i, k, n
    cdef double acc
    for i in range(R):
        for k in range(K):
            acc = 0.0
            for n in range(N):
                acc += a[i, n] * b[k, n]
            o[i, k] = acc
    return out


def mm_tn_acc_exact(double[:, ::1] a, double[:, ::1] g, double[:, ::1] out):
    """out (K,N) += a.T @ g for a (R,K), g (R,N); rows added in order."""
    cdef Py_ssize_t R = a.shape[0], K = a.shape[1], N = g.shape[1]
    cdef Py_ssize_t r, k, n
    cdef double ark
    for r in range(R):
        for k in range(K):
            ark = a[r, k]
            for n in range(N):
                out[k, n] += ark * g[r, n]


def rows_sum_acc(floating[:, ::1] g, floating[::1] out):
    """out (N,) += column sums of g (R,N), rows added in order."""
    cdef Py_ssize_t R = g.shape[0], N = g.shape[1]
    cdef Py_ssize_t r, n
    for r in range(R):
        for n in range(N):
            out[n] += g[r, n]


def softmax_rows(floating[:, ::1] x, unsigned char[:, ::1] valid=None):
    """Stable row softmax; entries where valid==0 get exactly weight 0."""
    cdef Py_ssize_t R = x.shape[0], C = x.shape[1]
    cdef cnp.ndarray out_arr
    if floating is float:
        out_arr = np.empty((R, C), dtype=np.float32)
    else:
        out_arr = np.empty((R, C), dtype=np.float64)
    cdef floating[:, ::1] out = out_arr
    cdef Py_ssize_t i, j
    cdef double m, s
    cdef bint any_valid
    for i in range(R):
        if valid is None:
            m = x[i, 0]
            for j in range(1, C):
                if x[i, j] > m:
                    m = x[i, j]
            s = 0.0
            for j in range(C):
                out[i, j] = <floating>exp(x[i, j] - m)
                s += out[i, j]
            for j in range(C):
                out[i, j] = <floating>(out[i, j] / s)
        else:
            any_valid = False
            m = 0.0
            for j in range(C):
                if valid[i, j]:
                    if not any_valid or x[i, j] > m:
                        m = x[i, j]
                    any_valid = True
            if not any_valid:
                raise ValueError("softmax row with zero valid entries")
            s = 0.0
            for j in range(C):
                if valid[i, j]:
                    out[i, j] = <floating>exp(x[i, j] - m)
                    s += out[i, j]
                else:
                    out[i, j] = 0.0
            for j in range(C):
                if valid[i, j]:
                    out[i, j] = <floating>(out[i, j] / s)
    return out_arr


def softmax_rows_backward(floating[:, ::1] probs, floating[:, ::1] grad):
    """grad_x = p * (g - sum(p*g)) per row."""
    cdef Py_ssize_t R = probs.shape[0], C = probs.shape[1]
    cdef cnp.ndarray out_arr
    if floating is float:
        out_arr = np.empty((R, C), dtype=np.float32)
    else:
        out_arr = np.empty((R, C), dtype=np.float64)
    cdef floating[:, ::1] out = out_arr
    cdef Py_ssize_t i, j
    cdef double s
    for i in range(R):
        s = 0.0
        for j in range(C):
            s += probs[i, j] * grad[i, j]
        for j in range(C):
            out[i, j] = <floating>(probs[i, j] * (grad[i, j] - s))
    return out_arr


def gelu(floating[:, ::1] x):
    """tanh-approximation gelu."""
    cdef Py_ssize_t R = x.shape[0], C = x.shape[1]
    cdef cnp.ndarray out_arr
    if floating is float:
        out_arr = np.empty((R, C), dtype=np.float32)
    else:
        out_arr = np.empty((R, C), dtype=np.float64)
    cdef floating[:, ::1] out = out_arr
    cdef Py_ssize_t i, j
    cdef double v
    for i in range(R):
        for j in range(C):
            v = x[i, j]
            out[i, j] = <floating>(0.5 * v * (1.0 + tanh(GELU_C * (v + GELU_A * v * v * v))))
    return out_arr


def gelu_backward(floating[:, ::1] x, floating[:, ::1] grad):
    cdef Py_ssize_t R = x.shape[0], C = x.shape[1]
    cdef cnp.ndarray out_arr
    if floating is float:
        out_arr = np.empty((R, C), dtype=np.float32)
    else:
        out_arr = np.empty((R, C), dtype=np.float64)
    cdef floating[:, ::1] out = out_arr
    cdef Py_ssize_t i, j
    cdef double v, t, du
    for i in range(R):
        for j in range(C):
            v = x[i, j]
            t = tanh(GELU_C * (v + GELU_A * v * v * v))
            du = GELU_C * (1.0 + 3.0 * GELU_A * v * v)
            out[i, j] = <floating>(grad[i, j] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du))
    return out_arr


def layer_norm(floating[:, ::1] x, floating[::1] gain, floating[::1] bias, double eps):
    """Per-row mean-0/var-1 then affine. Returns (y, xhat, inv_std)."""
    cdef Py_ssize_t R = x.shape[0], D = x.shape[1]
    cdef cnp.ndarray y_arr, xhat_arr, inv_arr
    if floating is float:
        y_arr = np.empty((R, D), dtype=np.float32)
        xhat_arr = np.empty((R, D), dtype=np.float32)
        inv_arr = np.empty(R, dtype=np.float32)
    else:
        y_arr = np.empty((R, D), dtype=np.float64)
        xhat_arr = np.empty((R, D), dtype=np.float64)
        inv_arr = np.empty(R, dtype=np.float64)
    cdef floating[:, ::1] y = y_arr
    cdef floating[:, ::1] xhat = xhat_arr
    cdef floating[::1] inv = inv_arr
    cdef Py_ssize_t i, j
    cdef double mu, var, d, istd
    for i in range(R):
        mu = 0.0
        for j in range(D):
            mu += x[i, j]
        mu /= D
        var = 0.0
        for j in range(D):
            d = x[i, j] - mu
            var += d * d
        var /= D
        istd = 1.0 / sqrt(var + eps)
        inv[i] = <floating>istd
        for j in range(D):
            xhat[i, j] = <floating>((x[i, j] - mu) * istd)
            y[i, j] = <floating>(xhat[i, j] * gain[j] + bias[j])
    return y_arr, xhat_arr, inv_arr


def layer_norm_backward(floating[:, ::1] grad, floating[:, ::1] xhat,
                        floating[::1] inv_std, floating[::1] gain,
                        floating[::1] dgain_acc, floating[::1] dbias_acc):
    """Input gradient; dgain/dbias accumulated into the buffers in row order."""
    cdef Py_ssize_t R = grad.shape[0], D = grad.shape[1]
    cdef cnp.ndarray out_arr
    if floating is float:
        out_arr = np.empty((R, D), dtype=np.float32)
    else:
        out_arr = np.empty((R, D), dtype=np.float64)
    cdef floating[:, ::1] out = out_arr
    cdef Py_ssize_t i, j
    cdef double s1, s2, dxh
    for i in range(R):
        s1 = 0.0
        s2 = 0.0
        for j in range(D):
            dxh = grad[i, j] * gain[j]
            s1 += dxh
            s2 += dxh * xhat[i, j]
        s1 /= D
        s2 /= D
        for j in range(D):
            dxh = grad[i, j] * gain[j]
            out[i, j] = <floating>(inv_std[i] * (dxh - s1 - xhat[i, j] * s2))
        for j in range(D):
            dgain_acc[j] += <floating>(grad[i, j] * xhat[i, j])
            dbias_acc[j] += grad[i, j]
    return out_arr


def scatter_add_rows(floating[:, ::1] out, long[::1] idx, floating[:, ::1] src):
    """out[idx[r]] += src[r], rows applied in order."""
    cdef Py_ssize_t R = src.shape[0], D = src.shape[1], M = out.shape[0]
    cdef Py_ssize_t r, j
    cdef long t
    for r in range(R):
        t = idx[r]
        if t < 0 or t >= M:
            raise IndexError("scatter_add_rows index out of range")
        for j in range(D):
            out[t, j] += src[r, j]


def cross_entropy(floating[:, ::1] logits, long[::1] labels):
    """Total (summed) NLL of labels under row-softmax. Returns (total, probs)."""
    cdef Py_ssize_t R = logits.shape[0], V = logits.shape[1]
    cdef cnp.ndarray probs_arr
    if floating is float:
        probs_arr = np.empty((R, V), dtype=np.float32)
    else:
        probs_arr = np.empty((R, V), dtype=np.float64)
    cdef floating[:, ::1] probs = probs_arr
    cdef Py_ssize_t i, j
    cdef double m, s, total = 0.0
    cdef long lab
    for i in range(R):
        lab = labels[i]
        if lab < 0 or lab >= V:
            raise IndexError("cross_entropy label out of range")
        m = logits[i, 0]
        for j in range(1, V):
            if logits[i, j] > m:
                m = logits[i, j]
        s = 0.0
        for j in range(V):
            probs[i, j] = <floating>exp(logits[i, j] - m)
            s += probs[i, j]
        total += log(s) - (logits[i, lab] - m)
        for j in range(V):
            probs[i, j] = <floating>(probs[i, j] / s)
    return total, probs_arr


def cross_entropy_backward(floating[:, ::1] probs, long[::1] labels, double scale):
    """(probs - onehot(labels)) * scale."""
    cdef Py_ssize_t R = probs.shape[0], V = probs.shape[1]
    cdef cnp.ndarray out_arr
    if floating is float:
        out_arr = np.empty((R, V), dtype=np.float32)
    else:
        out_arr = np.empty((R, V), dtype=np.float64)
    cdef floating[:, ::1] out = out_arr
    cdef Py_ssize_t i, j
    for i in range(R):
        for j in range(V):
            out[i, j] = <floating>(probs[i, j] * scale)
        out[i, labels[i]] -= <floating>scale
    return out_arr
