import numpy as np
import pytest

from narrowbert import numerics as nm
from narrowbert.data import Batch
from narrowbert.gradcheck import toy_batch
from narrowbert.layout import parse_layout
from narrowbert.model import EncoderState, Model, ModelDims, PHASE_NARROWED
from narrowbert.reference import encode_reference


def small_model(layout_text="sf:sf", seed=0, dtype=np.float64, **dim_kw):
    dims = ModelDims(
        dim_kw.get("hidden", 16),
        dim_kw.get("heads", 2),
        dim_kw.get("ffn_inner", 32),
        dim_kw.get("vocab", 13),
        dim_kw.get("max_len", 16),
    )
    return Model(dims, parse_layout(layout_text), seed=seed, dtype=dtype)


def plain_batch(seed=0, batch=2, seq_len=8, vocab=13, masked=2):
    return toy_batch(seed=seed, batch=batch, seq_len=seq_len, vocab=vocab, masked=masked)


def test_dims_validation():
    with pytest.raises(ValueError):
        ModelDims(10, 3, 16, 13, 8)
    with pytest.raises(ValueError):
        ModelDims(8, 2, 16, 4, 8)


def test_embed_shapes():
    model = small_model(hidden=32, heads=2, max_len=16)
    batch = plain_batch(batch=2, seq_len=16)
    state, _ = model.embed(batch)
    assert state.full_hidden.shape == (2, 16, 32)


def test_embed_is_deterministic_per_sequence():
    model = small_model()
    batch = plain_batch(batch=1, seq_len=8)
    two = Batch(
        np.vstack([batch.ids, batch.ids]),
        np.vstack([batch.validity, batch.validity]),
        np.vstack([batch.masked_positions, batch.masked_positions]),
        np.vstack([batch.labels, batch.labels]),
        0,
    )
    state, _ = model.embed(two)
    assert np.array_equal(state.full_hidden[0], state.full_hidden[1])


def test_position_embedding_distinguishes_positions():
    model = small_model()
    ids = np.full((1, 4), 7, dtype=np.int64)
    batch = Batch(ids, np.ones((1, 4), bool), np.empty((1, 0), np.int64), np.empty((1, 0), np.int64), 0)
    state, _ = model.embed(batch)
    assert not np.array_equal(state.full_hidden[0, 0], state.full_hidden[0, 1])


def test_embed_rejects_bad_inputs():
    model = small_model(max_len=8)
    ids = np.full((1, 9), 6, dtype=np.int64)
    too_long = Batch(ids, np.ones((1, 9), bool), np.empty((1, 0), np.int64), np.empty((1, 0), np.int64), 0)
    with pytest.raises(ValueError):
        model.embed(too_long)
    ids = np.array([[99, 1, 2, 3]])
    bad_id = Batch(ids, np.ones((1, 4), bool), np.empty((1, 0), np.int64), np.empty((1, 0), np.int64), 0)
    with pytest.raises(ValueError):
        model.embed(bad_id)


def test_feedforward_is_positionwise_bit_exact():
    model = small_model("sf")
    layer = model.atom_layers[1]
    rng = np.random.default_rng(1)
    full = rng.normal(size=(2, 8, 16))
    state = EncoderState(full_hidden=full)
    out_full, _ = model.feedforward_forward(state, layer)

    positions = np.array([[1, 4, 6], [0, 2, 7]])
    rows = np.arange(2)[:, None]
    sub_state = EncoderState(
        full_hidden=full,
        phase=PHASE_NARROWED,
        active_hidden=full[rows, positions].copy(),
        active_positions=positions,
        kv_source=full,
    )
    out_sub, _ = model.feedforward_forward(sub_state, layer)
    assert np.array_equal(out_full.full_hidden[rows, positions], out_sub.active_hidden)


def test_narrow_gathers_requested_rows():
    model = small_model()
    rng = np.random.default_rng(0)
    full = rng.normal(size=(1, 8, 16))
    state = EncoderState(full_hidden=full)
    narrowed, _ = model.narrow(state, np.array([[1, 5]]))
    assert narrowed.active_hidden.shape == (1, 2, 16)
    assert np.array_equal(narrowed.active_hidden[0, 0], full[0, 1])
    assert np.array_equal(narrowed.active_hidden[0, 1], full[0, 5])
    assert narrowed.kv_source is full


def test_narrow_to_all_positions_is_identity():
    model = small_model()
    full = np.random.default_rng(0).normal(size=(2, 6, 16))
    state = EncoderState(full_hidden=full)
    narrowed, _ = model.narrow(state, np.tile(np.arange(6), (2, 1)))
    assert np.array_equal(narrowed.active_hidden, full)


def test_narrow_rejects_bad_positions():
    model = small_model()
    state = EncoderState(full_hidden=np.zeros((1, 8, 16)))
    for bad in ([[ ]], [[3, 3]], [[5, 2]], [[7, 8]], [[-1, 2]]):
        with pytest.raises(ValueError):
            model.narrow(state, np.array(bad, dtype=np.int64).reshape(1, -1))


def test_encode_shapes_per_mode():
    batch = plain_batch(batch=2, seq_len=8, masked=3)
    wide = small_model("{2,sf}")
    state, _ = wide.encode(batch, mode="pretrain")
    assert state.full_hidden.shape == (2, 8, 16)
    assert state.phase == "wide"

    narrow = small_model("sf:{2,sf}")
    state, _ = narrow.encode(batch, mode="pretrain")
    assert state.active_hidden.shape == (2, 3, 16)

    state, _ = narrow.encode(batch, mode="classify")
    assert state.active_hidden.shape == (2, 1, 16)
    assert (state.active_positions == 0).all()


def test_encode_pretrain_requires_masked_positions():
    model = small_model("sf:f")
    ids = np.full((1, 6), 7, dtype=np.int64)
    batch = Batch(ids, np.ones((1, 6), bool), np.empty((1, 0), np.int64), np.empty((1, 0), np.int64), 0)
    with pytest.raises(ValueError):
        model.encode(batch, mode="pretrain")


def test_narrowed_attention_on_all_rows_equals_wide_bit_exact():
    """subset = whole: same floats, same operation order."""
    model = small_model("sf:sf")
    layer = model.atom_layers[3]
    rng = np.random.default_rng(4)
    full = rng.normal(size=(2, 6, 16))
    wide_out, _ = model.attention_forward(EncoderState(full_hidden=full), layer, None)
    narrowed = EncoderState(
        full_hidden=full,
        phase=PHASE_NARROWED,
        active_hidden=full.copy(),
        active_positions=np.tile(np.arange(6), (2, 1)),
        kv_source=full,
    )
    narrow_out, _ = model.attention_forward(narrowed, layer, None)
    assert np.array_equal(wide_out.full_hidden, narrow_out.active_hidden)


def test_narrowed_attention_matches_gathered_wide_rows():
    """gather(wide(X), S) == narrowed with queries gather(X, S), kv X."""
    model = small_model("sf:sf")
    layer = model.atom_layers[3]
    rng = np.random.default_rng(5)
    full = rng.normal(size=(2, 7, 16))
    positions = np.array([[0, 3, 5], [1, 2, 6]])
    rows = np.arange(2)[:, None]

    wide_out, _ = model.attention_forward(EncoderState(full_hidden=full), layer, None)
    narrowed = EncoderState(
        full_hidden=full,
        phase=PHASE_NARROWED,
        active_hidden=full[rows, positions].copy(),
        active_positions=positions,
        kv_source=full,
    )
    narrow_out, _ = model.attention_forward(narrowed, layer, None)
    assert np.array_equal(wide_out.full_hidden[rows, positions], narrow_out.active_hidden)


def test_feedforward_tail_layout_matches_plain_reference():
    model = small_model("sfss:ff")
    batch = plain_batch(masked=3)
    state, _ = model.encode(batch, mode="pretrain")
    ref = encode_reference(model, batch, mode="pretrain", frozen_kv_tail=False)
    assert np.array_equal(state.active_hidden, ref)


def test_attention_tail_layout_matches_frozen_kv_reference():
    model = small_model("sf:{3,sf}")
    batch = plain_batch(masked=3)
    state, _ = model.encode(batch, mode="pretrain")
    ref = encode_reference(model, batch, mode="pretrain", frozen_kv_tail=True)
    assert np.array_equal(state.active_hidden, ref)


def test_masked_row_output_independent_of_other_masked_rows():
    """Feedforward-tail layouts: row j depends only on j being kept."""
    model = small_model("sfs:ff")
    rng = np.random.default_rng(6)
    ids = rng.integers(5, 13, size=(1, 8)).astype(np.int64)
    ids[0, 0], ids[0, 7] = 2, 3
    validity = np.ones((1, 8), bool)

    def run(positions):
        positions = np.array(positions, dtype=np.int64)
        labels = ids[0, positions[0]].reshape(1, -1).copy()
        batch = Batch(ids.copy(), validity, positions, labels, 0)
        state, _ = model.encode(batch, mode="pretrain")
        return state.active_hidden

    with_a = run([[2, 4]])  # j = 4 kept, companion 2
    with_b = run([[4, 6]])  # j = 4 kept, companion 6
    assert np.array_equal(with_a[0, 1], with_b[0, 0])


def test_mlm_loss_is_log_v_under_zeroed_embeddings():
    model = small_model("{2,sf}")
    batch = plain_batch()
    model.embeddings.tok.value[...] = 0.0  # logits collapse to the bias
    model.mlm_bias.value[...] = 0.0
    assert abs(model.mlm_loss(batch) - np.log(13)) < 1e-12


def test_mlm_loss_near_zero_when_peaked():
    model = small_model("sf")
    batch = plain_batch(batch=1, masked=1)
    state, _ = model.encode(batch, mode="pretrain")
    rows, _ = model.gather_masked(state, batch)
    label = int(batch.labels[0, 0])
    model.mlm_bias.value[...] = -50.0
    model.mlm_bias.value[label] = 50.0
    assert model.mlm_loss(batch) < 1e-12


def test_tied_projection_gradient_flows_both_paths():
    model = small_model("sf")
    batch = plain_batch()
    model.zero_grads()
    model.mlm_backward_sum(batch)
    lookup_grad = np.abs(model.embeddings.tok.grad).sum()
    tied_grad = np.abs(model.tied_out_grad).sum()
    assert lookup_grad > 0
    assert tied_grad > 0
    model.combine_tied_grads()
    assert np.abs(model.tied_out_grad).sum() == 0


def test_classifier_zero_weights_give_uniform_logits():
    model = small_model("sf:sf")
    w, b = model.add_classifier(2, seed=0)
    w.value[...] = 0.0
    batch = plain_batch()
    logits, _ = model.classify_logits(batch)
    assert logits.shape == (2, 2)
    assert np.allclose(logits, 0.0)


def test_classify_end_to_end_single_row_per_sequence():
    model = small_model("{2,sf}:{2,sf}")
    model.add_classifier(3)
    batch = plain_batch(batch=4)
    logits, ctx = model.classify_logits(batch)
    assert logits.shape == (4, 3)
    assert ctx["state"].active_hidden.shape[1] == 1


def test_classifier_gradient_matches_finite_differences():
    model = small_model("sf:sf")
    model.add_classifier(3, seed=2)
    batch = plain_batch(batch=2)
    y = np.array([1, 2])

    def loss():
        logits, _ = model.classify_logits(batch)
        val, _ = nm.cross_entropy_logits(logits, y)
        return val

    model.zero_grads()
    logits, ctx = model.classify_logits(batch)
    _, probs = nm.cross_entropy_total(logits, y)
    model.classify_backward_sum(ctx, nm.cross_entropy_backward(probs, y, 1.0))
    model.combine_tied_grads()

    from narrowbert.gradcheck import finite_diff, rel_error

    for p in model.parameters():
        entries = np.arange(min(p.value.size, 24))
        fd = finite_diff(loss, p.value, entries) * 2  # sum loss vs mean over B=2
        analytic = p.grad.reshape(-1)[entries]
        assert rel_error(analytic, fd).max() < 1e-4, p.name


def test_validity_mask_keeps_padded_keys_out():
    model = small_model("sf:sf")
    rng = np.random.default_rng(8)
    ids = rng.integers(5, 13, size=(1, 8)).astype(np.int64)
    ids[0, 0], ids[0, 5] = 2, 3
    validity = np.zeros((1, 8), bool)
    validity[0, :6] = True
    positions = np.array([[2, 3]])
    labels = ids[0, positions[0]].reshape(1, -1).copy()

    base = Batch(ids.copy(), validity, positions, labels, 0)
    state1, _ = model.encode(base, mode="pretrain")

    ids2 = ids.copy()
    ids2[0, 6:] = 9  # junk in the padding area must not matter
    state2, _ = model.encode(Batch(ids2, validity, positions, labels, 0), mode="pretrain")
    assert np.array_equal(state1.active_hidden, state2.active_hidden)
