"""Encoder assembly: embeddings, attention, feedforward, narrowing, heads.

A layout drives one shared forward loop.  The narrow marker gathers the
active rows (masked positions in pretraining, position 0 in classify mode)
and freezes the full-sequence hidden state as the key/value source; every
attention layer after the marker computes queries from the active rows only
and re-projects the frozen source with its own key/value weights, every
feedforward layer after it runs on the active rows only.  A layout without
a marker is a standard encoder.

Backward passes are chained statically from per-atom caches (no tape
machinery).  Parameter gradients accumulate in batch-row order, and the
tied MLM output projection keeps its own accumulation stream
(`tied_out_grad`) so that micro-batch accumulation stays bit-exact in
float64; `combine_tied_grads` folds it into the token table's gradient.
"""

import numpy as np
from dataclasses import dataclass

from . import numerics as nm
from .data import NUM_SPECIALS
from .layout import Atom

PHASE_WIDE = "wide"
PHASE_NARROWED = "narrowed"


@dataclass(frozen=True)
class ModelDims:
    hidden: int
    heads: int
    ffn_inner: int
    vocab: int
    max_len: int
    ln_eps: float = 1e-12

    def __post_init__(self):
        if self.hidden % self.heads:
            raise ValueError("hidden size must be divisible by head count")
        if self.vocab < NUM_SPECIALS:
            raise ValueError("vocab must include the special tokens")

    @property
    def head_dim(self):
        return self.hidden // self.heads


@dataclass
class EncoderState:
    """Hidden state mid-encode.

    Wide phase: only full_hidden (B,L,d) is set.  Narrowed phase adds
    active_hidden (B,M,d), the per-row gathered positions, and the frozen
    key/value source (the full hidden state captured at the narrow point,
    never mutated afterwards).
    """

    full_hidden: np.ndarray
    phase: str = PHASE_WIDE
    active_hidden: np.ndarray | None = None
    active_positions: np.ndarray | None = None
    kv_source: np.ndarray | None = None

    @property
    def rows(self):
        """The rows later layers operate on: active when narrowed, else full."""
        return self.active_hidden if self.phase == PHASE_NARROWED else self.full_hidden


def _trunc_normal(rng, shape, std):
    x = rng.normal(0.0, std, size=shape)
    while True:
        bad = np.abs(x) > 2.0 * std
        if not bad.any():
            return x
        x[bad] = rng.normal(0.0, std, size=int(bad.sum()))


class _LayerBase:
    def parameters(self):
        return [v for v in vars(self).values() if isinstance(v, nm.Parameter)]


class AttentionLayer(_LayerBase):
    def __init__(self, prefix, dims, rng, dtype):
        d = dims.hidden
        std = 0.02

        def w(name, shape):
            return nm.Parameter(f"{prefix}.{name}", _trunc_normal(rng, shape, std).astype(dtype))

        def z(name, shape):
            return nm.Parameter(f"{prefix}.{name}", np.zeros(shape, dtype=dtype))

        self.wq, self.bq = w("wq", (d, d)), z("bq", d)
        self.wk, self.bk = w("wk", (d, d)), z("bk", d)
        self.wv, self.bv = w("wv", (d, d)), z("bv", d)
        self.wo, self.bo = w("wo", (d, d)), z("bo", d)
        self.ln_gain = nm.Parameter(f"{prefix}.ln_gain", np.ones(d, dtype=dtype))
        self.ln_bias = z("ln_bias", d)


class FeedforwardLayer(_LayerBase):
    def __init__(self, prefix, dims, rng, dtype):
        d, dff = dims.hidden, dims.ffn_inner
        std = 0.02
        self.w1 = nm.Parameter(f"{prefix}.w1", _trunc_normal(rng, (d, dff), std).astype(dtype))
        self.b1 = nm.Parameter(f"{prefix}.b1", np.zeros(dff, dtype=dtype))
        self.w2 = nm.Parameter(f"{prefix}.w2", _trunc_normal(rng, (dff, d), std).astype(dtype))
        self.b2 = nm.Parameter(f"{prefix}.b2", np.zeros(d, dtype=dtype))
        self.ln_gain = nm.Parameter(f"{prefix}.ln_gain", np.ones(d, dtype=dtype))
        self.ln_bias = nm.Parameter(f"{prefix}.ln_bias", np.zeros(d, dtype=dtype))


class Embeddings(_LayerBase):
    def __init__(self, dims, rng, dtype):
        std = 0.02
        self.tok = nm.Parameter("emb.tok", _trunc_normal(rng, (dims.vocab, dims.hidden), std).astype(dtype))
        self.pos = nm.Parameter("emb.pos", _trunc_normal(rng, (dims.max_len, dims.hidden), std).astype(dtype))
        self.ln_gain = nm.Parameter("emb.ln_gain", np.ones(dims.hidden, dtype=dtype))
        self.ln_bias = nm.Parameter("emb.ln_bias", np.zeros(dims.hidden, dtype=dtype))


class Model:
    """An encoder instance: dims + layout + parameters (one layer per atom)."""

    def __init__(self, dims, layout, seed=0, dtype=np.float32):
        self.dims = dims
        self.layout = layout
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        self.embeddings = Embeddings(dims, rng, self.dtype)
        self.atom_layers = []
        for i, atom in enumerate(layout.atoms):
            if atom is Atom.ATTENTION:
                self.atom_layers.append(AttentionLayer(f"atom{i}", dims, rng, self.dtype))
            elif atom is Atom.FEEDFORWARD:
                self.atom_layers.append(FeedforwardLayer(f"atom{i}", dims, rng, self.dtype))
            else:
                self.atom_layers.append(None)
        self.mlm_bias = nm.Parameter("mlm.bias", np.zeros(dims.vocab, dtype=self.dtype))
        self.classifier = None
        # second gradient stream for the tied MLM output projection
        self.tied_out_grad = np.zeros_like(self.embeddings.tok.value)

    def add_classifier(self, num_classes, seed=0):
        rng = np.random.default_rng(seed)
        d = self.dims.hidden
        self.classifier = (
            nm.Parameter("cls.w", _trunc_normal(rng, (d, num_classes), 0.02).astype(self.dtype)),
            nm.Parameter("cls.b", np.zeros(num_classes, dtype=self.dtype)),
        )
        return self.classifier

    def parameters(self):
        params = self.embeddings.parameters()
        for layer in self.atom_layers:
            if layer is not None:
                params.extend(layer.parameters())
        params.append(self.mlm_bias)
        if self.classifier is not None:
            params.extend(self.classifier)
        return params

    def zero_grads(self):
        for p in self.parameters():
            p.zero_grad()
        self.tied_out_grad.fill(0)

    def combine_tied_grads(self):
        """Fold the MLM output-projection gradient into the token table's."""
        self.embeddings.tok.grad += self.tied_out_grad
        self.tied_out_grad.fill(0)

    # ------------------------------------------------------------------
    # forward/backward
    # ------------------------------------------------------------------

    def embed(self, batch):
        """Token + position embedding, then layer norm. Returns (state, cache)."""
        ids = batch.ids
        b, seq_len = ids.shape
        if seq_len > self.dims.max_len:
            raise ValueError(f"sequence length {seq_len} exceeds max_len {self.dims.max_len}")
        if ids.min() < 0 or ids.max() >= self.dims.vocab:
            raise ValueError("token id out of range")
        emb = self.embeddings
        summed = nm.embedding_lookup(emb.tok, ids) + emb.pos.value[None, :seq_len, :]
        flat = np.ascontiguousarray(summed.reshape(b * seq_len, -1))
        y, xhat, inv = nm.layer_norm(flat, emb.ln_gain, emb.ln_bias, self.dims.ln_eps)
        state = EncoderState(full_hidden=y.reshape(b, seq_len, -1))
        return state, {"kind": "embed", "ids": ids, "xhat": xhat, "inv": inv}

    def embed_backward(self, cache, d_hidden):
        ids = cache["ids"]
        b, seq_len = ids.shape
        emb = self.embeddings
        flat = np.ascontiguousarray(d_hidden.reshape(b * seq_len, -1))
        d_sum = nm.layer_norm_backward(flat, cache["xhat"], cache["inv"], emb.ln_gain, emb.ln_bias)
        nm.embedding_lookup_backward(emb.tok, ids, d_sum)
        pos_idx = np.tile(np.arange(seq_len, dtype=np.int64), b)
        nm.scatter_add_rows(emb.pos.grad, pos_idx, d_sum)

    def _split_heads(self, x, b, rows):
        # (B*rows, d) -> (B*h, rows, head_dim), contiguous
        h, dh = self.dims.heads, self.dims.head_dim
        return np.ascontiguousarray(
            x.reshape(b, rows, h, dh).transpose(0, 2, 1, 3).reshape(b * h, rows, dh)
        )

    def _merge_heads(self, x, b, rows):
        # (B*h, rows, head_dim) -> (B*rows, d), contiguous
        h, dh = self.dims.heads, self.dims.head_dim
        return np.ascontiguousarray(
            x.reshape(b, h, rows, dh).transpose(0, 2, 1, 3).reshape(b * rows, h * dh)
        )

    def _key_mask(self, validity, rows):
        """(B,L) validity -> (B*h*rows, L) key mask, or None when all-valid."""
        if validity is None or validity.all():
            return None
        b, seq_len = validity.shape
        h = self.dims.heads
        m = np.broadcast_to(validity[:, None, None, :], (b, h, rows, seq_len))
        return np.ascontiguousarray(m.reshape(b * h * rows, seq_len), dtype=np.uint8)

    def attention_forward(self, state, layer, validity):
        """One self-attention sublayer with residual + post-layer-norm.

        Narrowed phase: queries from the active rows; keys/values from this
        layer's projections of the frozen kv_source.  full_hidden and
        kv_source pass through untouched.
        """
        dims = self.dims
        narrowed = state.phase == PHASE_NARROWED
        x = state.active_hidden if narrowed else state.full_hidden
        src = state.kv_source if narrowed else state.full_hidden
        b, rows, d = x.shape
        seq_len = src.shape[1]
        xf = np.ascontiguousarray(x.reshape(b * rows, d))
        sf = xf if not narrowed else np.ascontiguousarray(src.reshape(b * seq_len, d))

        q = nm.matmul(xf, layer.wq.value) + layer.bq.value
        k = nm.matmul(sf, layer.wk.value) + layer.bk.value
        v = nm.matmul(sf, layer.wv.value) + layer.bv.value

        tau = self.dtype.type(1.0 / np.sqrt(dims.head_dim))
        qs = self._split_heads(q * tau, b, rows)
        k4 = self._split_heads(k, b, seq_len)
        v4 = self._split_heads(v, b, seq_len)

        scores = nm.batched_matmul_nt(qs, k4)  # (B*h, rows, L)
        mask = self._key_mask(validity, rows)
        probs = nm.softmax_rows(
            np.ascontiguousarray(scores.reshape(-1, seq_len)), mask
        ).reshape(b * dims.heads, rows, seq_len)
        ctx = nm.batched_matmul(probs, v4)
        ctx2 = self._merge_heads(ctx, b, rows)

        out = nm.matmul(ctx2, layer.wo.value) + layer.bo.value
        z = xf + out
        y, xhat, inv = nm.layer_norm(z, layer.ln_gain, layer.ln_bias, dims.ln_eps)
        hidden = y.reshape(b, rows, d)

        if narrowed:
            new_state = EncoderState(
                full_hidden=state.full_hidden,
                phase=PHASE_NARROWED,
                active_hidden=hidden,
                active_positions=state.active_positions,
                kv_source=state.kv_source,
            )
        else:
            new_state = EncoderState(full_hidden=hidden)
        cache = {
            "kind": "attention",
            "narrowed": narrowed,
            "b": b,
            "rows": rows,
            "seq_len": seq_len,
            "xf": xf,
            "sf": sf,
            "qs": qs,
            "k4": k4,
            "v4": v4,
            "probs": probs,
            "ctx2": ctx2,
            "xhat": xhat,
            "inv": inv,
        }
        return new_state, cache

    def attention_backward(self, cache, layer, d_out):
        """Returns (d_input, d_kv_source or None)."""
        dims = self.dims
        b, rows, seq_len = cache["b"], cache["rows"], cache["seq_len"]
        narrowed = cache["narrowed"]
        d = dims.hidden
        tau = self.dtype.type(1.0 / np.sqrt(dims.head_dim))

        g = np.ascontiguousarray(d_out.reshape(b * rows, d))
        dz = nm.layer_norm_backward(g, cache["xhat"], cache["inv"], layer.ln_gain, layer.ln_bias)
        dxf = dz.copy()  # residual branch

        nm.matmul_tn_acc(cache["ctx2"], dz, layer.wo.grad)
        nm.rows_sum_acc(dz, layer.bo.grad)
        dctx2 = nm.matmul_nt(dz, layer.wo.value)

        dctx = self._split_heads(dctx2, b, rows)
        dprobs = nm.batched_matmul_nt(dctx, cache["v4"])
        dv4 = nm.batched_matmul_tn(cache["probs"], dctx)
        dscores = nm.softmax_rows_backward(
            np.ascontiguousarray(cache["probs"].reshape(-1, seq_len)),
            np.ascontiguousarray(dprobs.reshape(-1, seq_len)),
        ).reshape(b * dims.heads, rows, seq_len)
        dqs = nm.batched_matmul(dscores, cache["k4"])
        dk4 = nm.batched_matmul_tn(dscores, cache["qs"])

        dq = self._merge_heads(dqs, b, rows) * tau
        dk = self._merge_heads(dk4, b, seq_len)
        dv = self._merge_heads(dv4, b, seq_len)

        nm.matmul_tn_acc(cache["xf"], dq, layer.wq.grad)
        nm.rows_sum_acc(dq, layer.bq.grad)
        dxf += nm.matmul_nt(dq, layer.wq.value)

        nm.matmul_tn_acc(cache["sf"], dk, layer.wk.grad)
        nm.rows_sum_acc(dk, layer.bk.grad)
        nm.matmul_tn_acc(cache["sf"], dv, layer.wv.grad)
        nm.rows_sum_acc(dv, layer.bv.grad)
        dsf = nm.matmul_nt(dk, layer.wk.value) + nm.matmul_nt(dv, layer.wv.value)

        if narrowed:
            return dxf.reshape(b, rows, d), dsf.reshape(b, seq_len, d)
        dxf += dsf
        return dxf.reshape(b, rows, d), None

    def feedforward_forward(self, state, layer):
        """Positionwise MLP with gelu, residual, post-layer-norm."""
        narrowed = state.phase == PHASE_NARROWED
        x = state.active_hidden if narrowed else state.full_hidden
        b, rows, d = x.shape
        xf = np.ascontiguousarray(x.reshape(b * rows, d))
        h1 = nm.matmul(xf, layer.w1.value) + layer.b1.value
        a = nm.gelu(h1)
        h2 = nm.matmul(a, layer.w2.value) + layer.b2.value
        z = xf + h2
        y, xhat, inv = nm.layer_norm(z, layer.ln_gain, layer.ln_bias, self.dims.ln_eps)
        hidden = y.reshape(b, rows, d)
        if narrowed:
            new_state = EncoderState(
                full_hidden=state.full_hidden,
                phase=PHASE_NARROWED,
                active_hidden=hidden,
                active_positions=state.active_positions,
                kv_source=state.kv_source,
            )
        else:
            new_state = EncoderState(full_hidden=hidden)
        cache = {
            "kind": "feedforward",
            "b": b,
            "rows": rows,
            "xf": xf,
            "h1": h1,
            "a": a,
            "xhat": xhat,
            "inv": inv,
        }
        return new_state, cache

    def feedforward_backward(self, cache, layer, d_out):
        b, rows = cache["b"], cache["rows"]
        g = np.ascontiguousarray(d_out.reshape(b * rows, -1))
        dz = nm.layer_norm_backward(g, cache["xhat"], cache["inv"], layer.ln_gain, layer.ln_bias)
        dxf = dz.copy()
        nm.matmul_tn_acc(cache["a"], dz, layer.w2.grad)
        nm.rows_sum_acc(dz, layer.b2.grad)
        da = nm.matmul_nt(dz, layer.w2.value)
        dh1 = nm.gelu_backward(cache["h1"], da)
        nm.matmul_tn_acc(cache["xf"], dh1, layer.w1.grad)
        nm.rows_sum_acc(dh1, layer.b1.grad)
        dxf += nm.matmul_nt(dh1, layer.w1.value)
        return dxf.reshape(b, rows, -1)

    def narrow(self, state, positions):
        """Gather the given positions; freeze the full hidden as kv source."""
        if state.phase != PHASE_WIDE:
            raise ValueError("narrow applied twice")
        positions = np.asarray(positions, dtype=np.int64)
        b, seq_len, d = state.full_hidden.shape
        if positions.ndim != 2 or positions.shape[0] != b or positions.shape[1] == 0:
            raise ValueError("positions must be a non-empty (B,M) index matrix")
        if positions.min() < 0 or positions.max() >= seq_len:
            raise ValueError("narrow position out of range")
        if positions.shape[1] > 1 and not (np.diff(positions, axis=1) > 0).all():
            raise ValueError("narrow positions must be strictly increasing per row")
        m = positions.shape[1]
        flat_idx = (np.arange(b, dtype=np.int64)[:, None] * seq_len + positions).reshape(-1)
        full_flat = np.ascontiguousarray(state.full_hidden.reshape(b * seq_len, d))
        active = nm.gather_rows(full_flat, flat_idx).reshape(b, m, d)
        new_state = EncoderState(
            full_hidden=state.full_hidden,
            phase=PHASE_NARROWED,
            active_hidden=active,
            active_positions=positions,
            kv_source=state.full_hidden,
        )
        return new_state, {"kind": "narrow", "flat_idx": flat_idx, "b": b, "seq_len": seq_len}

    def narrow_backward(self, cache, d_active, d_kv):
        """Scatter the active-row gradient; add the frozen-source gradient."""
        b, seq_len = cache["b"], cache["seq_len"]
        d = self.dims.hidden
        d_full = np.zeros((b * seq_len, d), dtype=self.dtype)
        nm.scatter_add_rows(d_full, cache["flat_idx"], np.ascontiguousarray(d_active.reshape(-1, d)))
        d_full = d_full.reshape(b, seq_len, d)
        if d_kv is not None:
            d_full += d_kv
        return d_full

    def encode(self, batch, mode="pretrain", validity=None):
        """Run the layout left to right. Returns (state, tape).

        pretrain mode narrows to batch.masked_positions; classify mode to
        position 0 ([CLS] is always the first token).  The tape feeds
        `encode_backward`.
        """
        if mode not in ("pretrain", "classify"):
            raise ValueError(f"unknown mode {mode!r}")
        validity = batch.validity if validity is None else validity
        state, cache = self.embed(batch)
        tape = [cache]
        for i, atom in enumerate(self.layout.atoms):
            layer = self.atom_layers[i]
            if atom is Atom.NARROW:
                if mode == "pretrain":
                    if batch.masked_positions.size == 0:
                        raise ValueError("pretrain narrowing needs masked positions")
                    positions = batch.masked_positions
                else:
                    positions = np.zeros((batch.size, 1), dtype=np.int64)
                state, cache = self.narrow(state, positions)
            elif atom is Atom.ATTENTION:
                state, cache = self.attention_forward(state, layer, validity)
            else:
                state, cache = self.feedforward_forward(state, layer)
            cache["atom_index"] = i
            tape.append(cache)
        return state, tape

    def encode_backward(self, tape, d_final):
        """Chain the per-atom backwards; accumulates into parameter grads.

        d_final matches the encode output (active rows when the layout
        narrowed, else the full rows).
        """
        d_rows = d_final
        d_kv = None
        for cache in reversed(tape):
            kind = cache["kind"]
            if kind == "embed":
                self.embed_backward(cache, d_rows)
            elif kind == "narrow":
                d_rows = self.narrow_backward(cache, d_rows, d_kv)
                d_kv = None
            elif kind == "attention":
                layer = self.atom_layers[cache["atom_index"]]
                d_rows, d_src = self.attention_backward(cache, layer, d_rows)
                if d_src is not None:
                    d_kv = d_src if d_kv is None else d_kv + d_src
            else:
                layer = self.atom_layers[cache["atom_index"]]
                d_rows = self.feedforward_backward(cache, layer, d_rows)

    # ------------------------------------------------------------------
    # heads
    # ------------------------------------------------------------------

    def mlm_logits(self, hidden):
        """(B,M,d) -> (B,M,V) through the transposed token table + bias."""
        b, m, d = hidden.shape
        flat = np.ascontiguousarray(hidden.reshape(b * m, d))
        logits = nm.matmul_nt(flat, self.embeddings.tok.value) + self.mlm_bias.value
        return logits.reshape(b, m, -1), flat

    def mlm_logits_backward(self, hidden_flat, d_logits):
        """Returns d_hidden; projection grad goes to the tied stream."""
        r = hidden_flat.shape[0]
        g = np.ascontiguousarray(d_logits.reshape(r, -1))
        nm.matmul_tn_acc(g, hidden_flat, self.tied_out_grad)
        nm.rows_sum_acc(g, self.mlm_bias.grad)
        return nm.matmul(g, self.embeddings.tok.value)

    def gather_masked(self, state, batch):
        """Rows at the masked positions, with a cache for scatter-back.

        Narrowed layouts already hold exactly those rows; wide layouts are
        gathered here.
        """
        if state.phase == PHASE_NARROWED:
            return state.active_hidden, None
        b, seq_len, d = state.full_hidden.shape
        positions = batch.masked_positions
        flat_idx = (np.arange(b, dtype=np.int64)[:, None] * seq_len + positions).reshape(-1)
        flat = np.ascontiguousarray(state.full_hidden.reshape(b * seq_len, d))
        rows = nm.gather_rows(flat, flat_idx).reshape(b, positions.shape[1], d)
        return rows, {"flat_idx": flat_idx, "b": b, "seq_len": seq_len}

    def scatter_masked_backward(self, gather_cache, d_rows):
        b, seq_len = gather_cache["b"], gather_cache["seq_len"]
        d = self.dims.hidden
        d_full = np.zeros((b * seq_len, d), dtype=self.dtype)
        nm.scatter_add_rows(
            d_full, gather_cache["flat_idx"], np.ascontiguousarray(d_rows.reshape(-1, d))
        )
        return d_full.reshape(b, seq_len, d)

    # ------------------------------------------------------------------
    # losses (mean for reporting; summed form for the trainer, which
    # rescales once per optimizer step)
    # ------------------------------------------------------------------

    def mlm_loss(self, batch):
        """Mean MLM loss over the batch's masked positions (forward only)."""
        state, _ = self.encode(batch, mode="pretrain")
        rows, _ = self.gather_masked(state, batch)
        logits, _ = self.mlm_logits(rows)
        flat_labels = batch.labels.reshape(-1)
        loss, _ = nm.cross_entropy_logits(
            np.ascontiguousarray(logits.reshape(len(flat_labels), -1)), flat_labels
        )
        return loss

    def mlm_backward_sum(self, batch):
        """Forward + backward for the summed MLM loss.

        Accumulates parameter gradients (unscaled); returns
        (nll_total, n_positions).
        """
        state, tape = self.encode(batch, mode="pretrain")
        rows, gather_cache = self.gather_masked(state, batch)
        logits, hidden_flat = self.mlm_logits(rows)
        flat_labels = batch.labels.reshape(-1)
        n = len(flat_labels)
        logits2 = np.ascontiguousarray(logits.reshape(n, -1))
        total, probs = nm.cross_entropy_total(logits2, flat_labels)
        d_logits = nm.cross_entropy_backward(probs, flat_labels, 1.0)
        d_rows = self.mlm_logits_backward(hidden_flat, d_logits).reshape(rows.shape)
        if gather_cache is not None:
            d_final = self.scatter_masked_backward(gather_cache, d_rows)
        else:
            d_final = d_rows
        self.encode_backward(tape, d_final)
        return total, n

    def classify_logits(self, batch):
        """(B,C) logits from the [CLS] row; requires an attached classifier."""
        if self.classifier is None:
            raise ValueError("no classifier head attached")
        state, tape = self.encode(batch, mode="classify")
        if state.phase == PHASE_NARROWED:
            cls_rows = state.active_hidden[:, 0, :]
            gather_cache = None
        else:
            cls_rows = state.full_hidden[:, 0, :]
            gather_cache = {"wide_cls": True}
        w, bias = self.classifier
        flat = np.ascontiguousarray(cls_rows)
        logits = nm.matmul(flat, w.value) + bias.value
        return logits, {"tape": tape, "cls": flat, "gather": gather_cache, "state": state}

    def classify_backward_sum(self, ctx, d_logits):
        """Backward for summed classification loss through the encoder."""
        w, bias = self.classifier
        nm.matmul_tn_acc(ctx["cls"], d_logits, w.grad)
        nm.rows_sum_acc(d_logits, bias.grad)
        d_cls = nm.matmul_nt(d_logits, w.value)
        state = ctx["state"]
        if ctx["gather"] is None:
            d_final = np.zeros_like(state.active_hidden)
            d_final[:, 0, :] = d_cls
        else:
            d_final = np.zeros_like(state.full_hidden)
            d_final[:, 0, :] = d_cls
        self.encode_backward(ctx["tape"], d_final)
