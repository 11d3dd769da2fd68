"""NumPy fallback kernels.

Same contract as the compiled core (`_core.pyx`); this module is what runs
when the extension is unavailable or ``NARROWBERT_BACKEND=pure``.

Two guarantees both backends must honor, because the exactness oracles and
the gradient-accumulation equivalence depend on them:

* row stability: every ``*_exact`` matmul computes output row ``i`` from
  input row ``i`` alone, with an operation order that does not depend on how
  many other rows are present.  Gathering rows before or after the matmul
  then gives bit-identical floats.
* ordered accumulation: the ``*_acc`` kernels add row contributions into the
  output buffer strictly in row order, so splitting a batch into consecutive
  micro-batches leaves the final accumulated value bit-identical.
"""

import numpy as np

NAME = "pure"

_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_A = 0.044715


def mm_exact(a, b):
    """a (R,K) @ b (K,N), float64, one BLAS matvec per output row."""
    r = a.shape[0]
    out = np.empty((r, b.shape[1]), dtype=np.float64)
    for i in range(r):
        out[i] = a[i] @ b
    return out


def mm_nt_exact(a, b):
    """a (R,N) @ b.T for b (K,N), float64, row-stable."""
    r = a.shape[0]
    out = np.empty((r, b.shape[0]), dtype=np.float64)
    for i in range(r):
        out[i] = b @ a[i]
    return out


def mm_tn_acc_exact(a, g, out):
    """out (K,N) += a.T @ g for a (R,K), g (R,N), accumulated row by row."""
    for r in range(a.shape[0]):
        out += a[r][:, None] * g[r][None, :]


def rows_sum_acc(g, out):
    """out (N,) += column sums of g (R,N); row order for float64."""
    if g.dtype == np.float64:
        for r in range(g.shape[0]):
            out += g[r]
    else:
        out += g.sum(axis=0, dtype=g.dtype)


def softmax_rows(x, valid=None):
    """Stable row softmax of x (R,C); entries where valid==0 get weight 0.

    Raises ValueError if some row has no valid entry.
    """
    if valid is None:
        m = x.max(axis=1, keepdims=True)
        e = np.exp(x - m)
        return e / e.sum(axis=1, keepdims=True)
    valid = valid.astype(bool, copy=False)
    if not valid.any(axis=1).all():
        raise ValueError("softmax row with zero valid entries")
    xw = np.where(valid, x, x.dtype.type(-np.inf))
    m = xw.max(axis=1, keepdims=True)
    e = np.exp(xw - m)  # exp(-inf) is an exact 0 for the invalid entries
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows_backward(probs, grad):
    """grad_x = p * (g - sum(p*g)) per row; masked entries stay 0."""
    s = (probs * grad).sum(axis=1, keepdims=True)
    return probs * (grad - s)


def gelu(x):
    """tanh-approximation gelu."""
    x3 = x * x * x
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + _GELU_A * x3)))


def gelu_backward(x, grad):
    x2 = x * x
    u = _GELU_C * (x + _GELU_A * x2 * x)
    t = np.tanh(u)
    du = _GELU_C * (1.0 + 3.0 * _GELU_A * x2)
    return grad * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def layer_norm(x, gain, bias, eps):
    """Per-row mean-0/var-1 then affine. Returns (y, xhat, inv_std)."""
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * inv
    return xhat * gain + bias, xhat, inv[:, 0].copy()


def layer_norm_backward(grad, xhat, inv_std, gain, dgain_acc, dbias_acc):
    """Input gradient; accumulates dgain/dbias into the provided buffers."""
    d = xhat.shape[1]
    dxhat = grad * gain
    s1 = dxhat.sum(axis=1, keepdims=True)
    s2 = (dxhat * xhat).sum(axis=1, keepdims=True)
    gx = inv_std[:, None] * (dxhat - s1 / d - xhat * (s2 / d))
    if grad.dtype == np.float64:
        for r in range(grad.shape[0]):
            dgain_acc += grad[r] * xhat[r]
            dbias_acc += grad[r]
    else:
        dgain_acc += (grad * xhat).sum(axis=0, dtype=grad.dtype)
        dbias_acc += grad.sum(axis=0, dtype=grad.dtype)
    return gx


def gather_rows(x, idx):
    """y[j] = x[idx[j]], copied."""
    if len(idx) and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise IndexError("gather_rows index out of range")
    return x[idx].copy()


def scatter_add_rows(out, idx, src):
    """out[idx[r]] += src[r], applied in row order."""
    if len(idx) and (idx.min() < 0 or idx.max() >= out.shape[0]):
        raise IndexError("scatter_add_rows index out of range")
    np.add.at(out, idx, src)


def cross_entropy(logits, labels):
    """Total (summed) NLL of labels under row-softmax. Returns (total, probs)."""
    r, v = logits.shape
    if len(labels) and (labels.min() < 0 or labels.max() >= v):
        raise IndexError("cross_entropy label out of range")
    m = logits.max(axis=1, keepdims=True)
    z = logits - m
    e = np.exp(z)
    s = e.sum(axis=1, keepdims=True)
    probs = e / s
    nll = np.log(s[:, 0]) - z[np.arange(r), labels]
    return float(nll.sum()), probs


def cross_entropy_backward(probs, labels, scale):
    """(probs - onehot(labels)) * scale."""
    d = probs * probs.dtype.type(scale)
    d[np.arange(probs.shape[0]), labels] -= probs.dtype.type(scale)
    return d
