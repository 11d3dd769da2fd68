"""Wide reference encoder for the exactness oracles.

Runs a model's weights over the full sequence with no narrowing machinery:
a plain loop over layers, gathering the requested positions only at the
very end.  Two flavors:

* plain: the narrow marker is ignored outright.  This is the reference for
  layouts whose post-marker layers are all feedforward (positionwise, so
  narrowing must be a no-op on the gathered rows).
* frozen_kv: at the marker the hidden state is snapshotted; later attention
  layers compute queries for every position but re-project keys/values from
  the snapshot.  This is the reference for layouts with post-marker
  attention.

Shares only the numeric primitives with the model, not its encoder logic,
so a bug in the narrowing path cannot hide in the oracle.
"""

import numpy as np

from . import numerics as nm
from .layout import Atom


def _attention_wide(dims, layer, hidden, kv_hidden, validity, dtype):
    b, seq_len, d = hidden.shape
    h, dh = dims.heads, dims.head_dim
    xf = np.ascontiguousarray(hidden.reshape(b * seq_len, d))
    sf = np.ascontiguousarray(kv_hidden.reshape(b * seq_len, d))

    q = nm.matmul(xf, layer.wq.value) + layer.bq.value
    k = nm.matmul(sf, layer.wk.value) + layer.bk.value
    v = nm.matmul(sf, layer.wv.value) + layer.bv.value

    tau = dtype.type(1.0 / np.sqrt(dh))
    qs = np.ascontiguousarray((q * tau).reshape(b, seq_len, h, dh).transpose(0, 2, 1, 3).reshape(b * h, seq_len, dh))
    k4 = np.ascontiguousarray(k.reshape(b, seq_len, h, dh).transpose(0, 2, 1, 3).reshape(b * h, seq_len, dh))
    v4 = np.ascontiguousarray(v.reshape(b, seq_len, h, dh).transpose(0, 2, 1, 3).reshape(b * h, seq_len, dh))

    scores = nm.batched_matmul_nt(qs, k4).reshape(b * h * seq_len, seq_len)
    if validity is not None and not validity.all():
        mask = np.broadcast_to(validity[:, None, None, :], (b, h, seq_len, seq_len))
        mask = np.ascontiguousarray(mask.reshape(b * h * seq_len, seq_len), dtype=np.uint8)
    else:
        mask = None
    probs = nm.softmax_rows(np.ascontiguousarray(scores), mask).reshape(b * h, seq_len, seq_len)
    ctx = nm.batched_matmul(probs, v4)
    ctx2 = np.ascontiguousarray(ctx.reshape(b, h, seq_len, dh).transpose(0, 2, 1, 3).reshape(b * seq_len, d))

    out = nm.matmul(ctx2, layer.wo.value) + layer.bo.value
    y, _, _ = nm.layer_norm(xf + out, layer.ln_gain, layer.ln_bias, dims.ln_eps)
    return y.reshape(b, seq_len, d)


def _feedforward_wide(dims, layer, hidden):
    b, seq_len, d = hidden.shape
    xf = np.ascontiguousarray(hidden.reshape(b * seq_len, d))
    h1 = nm.matmul(xf, layer.w1.value) + layer.b1.value
    a = nm.gelu(h1)
    h2 = nm.matmul(a, layer.w2.value) + layer.b2.value
    y, _, _ = nm.layer_norm(xf + h2, layer.ln_gain, layer.ln_bias, dims.ln_eps)
    return y.reshape(b, seq_len, d)


def encode_reference(model, batch, mode="pretrain", frozen_kv_tail=False):
    """Full-width forward pass; returns the rows the narrowed run would keep.

    Output shape (B, M, d) with M = masked count (pretrain) or 1 (classify).
    """
    dims = model.dims
    emb = model.embeddings
    ids = batch.ids
    b, seq_len = ids.shape
    summed = nm.embedding_lookup(emb.tok, ids) + emb.pos.value[None, :seq_len, :]
    flat = np.ascontiguousarray(summed.reshape(b * seq_len, -1))
    y, _, _ = nm.layer_norm(flat, emb.ln_gain, emb.ln_bias, dims.ln_eps)
    hidden = y.reshape(b, seq_len, dims.hidden)

    validity = batch.validity
    kv_hidden = None
    for i, atom in enumerate(model.layout.atoms):
        if atom is Atom.NARROW:
            if frozen_kv_tail:
                kv_hidden = hidden
            continue
        layer = model.atom_layers[i]
        if atom is Atom.ATTENTION:
            src = kv_hidden if kv_hidden is not None else hidden
            hidden = _attention_wide(dims, layer, hidden, src, validity, model.dtype)
        else:
            hidden = _feedforward_wide(dims, layer, hidden)

    if mode == "pretrain":
        positions = batch.masked_positions
    else:
        positions = np.zeros((b, 1), dtype=np.int64)
    rows = np.arange(b)[:, None]
    return hidden[rows, positions].copy()
