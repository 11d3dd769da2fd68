"""Dense numeric primitives with per-operation backward passes.

Tensors are C-contiguous NumPy arrays in one of two precisions:

* float32 — the speed mode.  Matmuls go straight to BLAS; everything else
  uses the active kernel backend.  Used for training and benchmarks.
* float64 — the test mode.  Matmuls use row-stable kernels whose per-row
  operation order is independent of the number of rows present, so
  gathering rows commutes bit-exactly with every operation.  Parameter
  gradients accumulate strictly in row order, so consecutive micro-batches
  accumulate to the same bits as one large batch.  Used by the equivalence
  oracles, gradient checks, and deterministic toy training.

There is no autodiff tape: each op has an explicit backward, and the model
chains them statically.
"""

import numpy as np

from . import backends


class Parameter:
    """A named weight tensor with a matching gradient buffer."""

    def __init__(self, name, value):
        self.name = name
        self.value = np.ascontiguousarray(value)
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad.fill(0)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.value.shape})"


def _as_idx(idx):
    return np.ascontiguousarray(idx, dtype=np.int64)


def matmul(a, b):
    """a (R,K) @ b (K,N)."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    if a.dtype == np.float64:
        return backends.get().mm_exact(a, b)
    return a @ b


def matmul_nt(a, b):
    """a (R,N) @ b.T for b (K,N)."""
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"matmul_nt shape mismatch: {a.shape} @ {b.shape}.T")
    if a.dtype == np.float64:
        return backends.get().mm_nt_exact(a, b)
    return a @ b.T


def matmul_tn_acc(a, g, out):
    """out (K,N) += a.T @ g for a (R,K), g (R,N). Row-ordered in float64."""
    if a.shape[0] != g.shape[0] or out.shape != (a.shape[1], g.shape[1]):
        raise ValueError(
            f"matmul_tn_acc shape mismatch: {a.shape}.T @ {g.shape} -> {out.shape}"
        )
    if a.dtype == np.float64:
        backends.get().mm_tn_acc_exact(a, g, out)
    else:
        out += a.T @ g


def matmul_tn(a, g):
    """a.T @ g, freshly allocated."""
    out = np.zeros((a.shape[1], g.shape[1]), dtype=a.dtype)
    matmul_tn_acc(a, g, out)
    return out


def matmul_backward(grad, a, b):
    """For c = a @ b: returns (dA, dB) = (grad @ b.T, a.T @ grad)."""
    return matmul_nt(grad, b), matmul_tn(a, grad)


def batched_matmul(a, b):
    """(G,R,K) @ (G,K,N) per group."""
    if a.dtype == np.float64:
        mm = backends.get().mm_exact
        out = np.empty((a.shape[0], a.shape[1], b.shape[2]), dtype=np.float64)
        for g in range(a.shape[0]):
            out[g] = mm(a[g], b[g])
        return out
    return np.matmul(a, b)


def batched_matmul_nt(a, b):
    """(G,R,N) @ (G,K,N).T per group."""
    if a.dtype == np.float64:
        mm = backends.get().mm_nt_exact
        out = np.empty((a.shape[0], a.shape[1], b.shape[1]), dtype=np.float64)
        for g in range(a.shape[0]):
            out[g] = mm(a[g], b[g])
        return out
    return np.matmul(a, b.transpose(0, 2, 1))


def batched_matmul_tn(a, g):
    """(G,R,K).T @ (G,R,N) per group; reduction over rows, ascending."""
    if a.dtype == np.float64:
        acc = backends.get().mm_tn_acc_exact
        out = np.zeros((a.shape[0], a.shape[2], g.shape[2]), dtype=np.float64)
        for i in range(a.shape[0]):
            acc(a[i], g[i], out[i])
        return out
    return np.matmul(a.transpose(0, 2, 1), g)


def softmax_rows(x, valid=None):
    """Row softmax of x (R,C); entries with valid==0 get exactly weight 0.

    valid is an optional boolean (R,C) mask; a row with no valid entry is an
    error.
    """
    if valid is not None:
        valid = np.ascontiguousarray(valid, dtype=np.uint8)
    return backends.get().softmax_rows(x, valid)


def softmax_rows_backward(probs, grad):
    return backends.get().softmax_rows_backward(probs, grad)


def gelu(x):
    return backends.get().gelu(x)


def gelu_backward(x, grad):
    return backends.get().gelu_backward(x, grad)


def layer_norm(x, gain, bias, eps):
    """Returns (y, xhat, inv_std); the latter two feed the backward pass."""
    return backends.get().layer_norm(x, gain.value, bias.value, eps)


def layer_norm_backward(grad, xhat, inv_std, gain, bias):
    """Input gradient; accumulates into gain.grad and bias.grad."""
    return backends.get().layer_norm_backward(
        grad, xhat, inv_std, gain.value, gain.grad, bias.grad
    )


def gather_rows(x, idx):
    """y[j] = x[idx[j]] (bit-exact row copies)."""
    return backends.get().gather_rows(x, _as_idx(idx))


def scatter_add_rows(out, idx, src):
    """out[idx[r]] += src[r] in ascending r; duplicate indices accumulate."""
    backends.get().scatter_add_rows(out, _as_idx(idx), src)


def rows_sum_acc(g, out):
    """out (N,) += column sums of g (R,N); ascending row order in float64."""
    backends.get().rows_sum_acc(g, out)


def embedding_lookup(table, ids):
    """Rows of table.value at ids (any shape); output shape ids.shape + (D,)."""
    flat = _as_idx(ids).reshape(-1)
    out = gather_rows(table.value, flat)
    return out.reshape(*np.shape(ids), table.value.shape[1])


def embedding_lookup_backward(table, ids, grad):
    """Scatter-adds grad into table.grad at ids."""
    flat = _as_idx(ids).reshape(-1)
    scatter_add_rows(table.grad, flat, grad.reshape(len(flat), -1))


def cross_entropy_logits(logits, labels):
    """Mean NLL of labels under row-softmax of logits (R,V).

    Returns (mean_loss, probs); backward via `cross_entropy_backward` with
    scale=1/R.
    """
    total, probs = backends.get().cross_entropy(logits, _as_idx(labels))
    return total / logits.shape[0], probs


def cross_entropy_total(logits, labels):
    """Summed NLL; the trainer rescales once per step (see training module)."""
    return backends.get().cross_entropy(logits, _as_idx(labels))


def cross_entropy_backward(probs, labels, scale):
    return backends.get().cross_entropy_backward(probs, _as_idx(labels), float(scale))
