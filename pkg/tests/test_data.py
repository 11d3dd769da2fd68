import numpy as np
import pytest

from narrowbert.data import (
    CLS,
    MASK,
    NUM_SPECIALS,
    PAD,
    SEP,
    UNK,
    MaskingPolicy,
    Vocab,
    apply_masking,
    build_vocab,
    load_labeled_tsv,
    make_batches,
    make_classify_batches,
    masked_count,
    synthetic_batch,
)


def test_build_vocab_frequency_then_lexicographic():
    vocab = build_vocab(["a a b"], max_size=7)
    assert vocab.id_to_token[NUM_SPECIALS:] == ["a", "b"]
    assert vocab.encode("a") == 5
    assert vocab.encode("b") == 6


def test_build_vocab_truncates_and_is_deterministic():
    lines = ["c c c b b a", "a b c"]
    v1 = build_vocab(lines, max_size=7)
    v2 = build_vocab(lines, max_size=7)
    assert v1.id_to_token == v2.id_to_token
    assert v1.id_to_token[NUM_SPECIALS:] == ["c", "b"]


def test_unseen_token_encodes_to_unk():
    vocab = build_vocab(["a"], max_size=10)
    assert vocab.encode("zzz") == UNK


def test_empty_corpus_rejected():
    with pytest.raises(ValueError):
        build_vocab([], max_size=10)


def test_vocab_file_round_trip(tmp_path):
    vocab = build_vocab(["the cat sat on the mat"], max_size=12)
    path = tmp_path / "vocab.txt"
    vocab.save(path)
    text = path.read_text()
    assert text.startswith("#")  # header documents the id offset
    assert "+ 5" in text
    loaded = Vocab.load(path)
    assert loaded.id_to_token == vocab.id_to_token


def test_masked_count_follows_fifteen_percent_rule():
    assert masked_count(22) == 3  # round(3.3)
    assert masked_count(4) == 1   # max(1, round(0.6))
    assert masked_count(40) == 6


def test_make_batches_shape_and_layout():
    words = " ".join(f"t{i}" for i in range(20))
    lines = [words] * 6
    vocab = build_vocab(lines, max_size=40)
    batches = list(make_batches(lines, vocab, seq_len=24, batch_size=3, seed=0))
    assert len(batches) == 2
    batch = batches[0]
    assert batch.ids.shape == (3, 24)
    assert int(batch.validity[0].sum()) == 22
    assert batch.num_masked == 3  # round(0.15 * 22)
    for r in range(3):
        assert batch.ids[r, 0] == CLS
        assert batch.ids[r, 21] == SEP
        assert (batch.ids[r, 22:] == PAD).all()


def test_masking_never_touches_specials():
    lines = ["alpha beta gamma delta epsilon zeta eta theta"] * 8
    vocab = build_vocab(lines, max_size=20)
    for batch in make_batches(lines, vocab, seq_len=12, batch_size=4, seed=3):
        originals = batch.original_ids()
        for r in range(batch.size):
            for p in batch.masked_positions[r]:
                assert originals[r, p] >= NUM_SPECIALS
                assert batch.validity[r, p]
        assert (np.diff(batch.masked_positions, axis=1) > 0).all()


def test_labels_round_trip_original_ids():
    lines = ["one two three four five six seven eight nine ten"] * 4
    vocab = build_vocab(lines, max_size=32)
    batch = next(iter(make_batches(lines, vocab, seq_len=16, batch_size=2, seed=1)))
    clean = [vocab.encode(w) for w in lines[0].split()]
    rows = np.arange(batch.size)[:, None]
    assert (batch.original_ids()[rows, batch.masked_positions] == batch.labels).all()
    assert (batch.original_ids()[:, 1:11] == clean).all()


def test_make_batches_deterministic_under_seed():
    lines = [f"w{i} w{i+1} w{i+2} w{i+3} w{i+4} w{i+5}" for i in range(40)]
    vocab = build_vocab(lines, max_size=64)
    a = list(make_batches(lines, vocab, seq_len=10, batch_size=4, seed=9))
    b = list(make_batches(lines, vocab, seq_len=10, batch_size=4, seed=9))
    assert len(a) == len(b) > 0
    for x, y in zip(a, b):
        assert np.array_equal(x.ids, y.ids)
        assert np.array_equal(x.masked_positions, y.masked_positions)
        assert np.array_equal(x.labels, y.labels)


def test_all_mask_policy_masks_every_selection():
    lines = ["red green blue yellow purple orange pink brown"] * 4
    vocab = build_vocab(lines, max_size=20)
    batch = next(iter(make_batches(lines, vocab, seq_len=12, batch_size=2, seed=0)))
    policy = MaskingPolicy(mask_prob=1.0, random_prob=0.0, keep_prob=0.0)
    masked = apply_masking(batch, policy, seed=5, vocab_size=len(vocab))
    rows = np.arange(masked.size)[:, None]
    assert (masked.ids[rows, masked.masked_positions] == MASK).all()


def test_policy_fractions_must_sum_to_one():
    with pytest.raises(ValueError):
        MaskingPolicy(mask_prob=0.9, random_prob=0.2, keep_prob=0.1)


def test_replacement_distribution_near_80_10_10():
    lines = ["a b c d e f g h i j k l m n o p q r s t"] * 2
    vocab = build_vocab(lines, max_size=40)
    batch = next(iter(make_batches(lines, vocab, seq_len=24, batch_size=2, seed=0)))
    policy = MaskingPolicy()
    counts = np.zeros(3)  # mask / random / keep
    total = 0
    seed = 0
    while total < 30000:
        masked = apply_masking(batch, policy, seed=seed, vocab_size=len(vocab))
        originals = masked.original_ids()
        rows = np.arange(masked.size)[:, None]
        got = masked.ids[rows, masked.masked_positions]
        orig = originals[rows, masked.masked_positions]
        counts[0] += (got == MASK).sum()
        counts[2] += (got == orig).sum()
        counts[1] += ((got != MASK) & (got != orig)).sum()
        total += got.size
        seed += 1
    frac = counts / total
    # 'random' can draw the original id, shifting random->keep by ~1/|content|
    assert abs(frac[0] - 0.8) < 0.02
    assert abs(frac[1] - 0.1) < 0.02
    assert abs(frac[2] - 0.1) < 0.02


def test_selection_is_uniform_over_maskable_positions():
    line = "u v w x y z"
    vocab = build_vocab([line], max_size=16)
    batch = next(iter(make_batches([line] * 2, vocab, seq_len=8, batch_size=1, seed=0)))
    policy = MaskingPolicy()
    hits = np.zeros(8)
    trials = 4000
    master = np.random.default_rng(123)  # sequential small seeds correlate
    for seed in master.integers(0, 2**63 - 1, size=trials):
        masked = apply_masking(batch, policy, seed=int(seed), vocab_size=len(vocab))
        for p in masked.masked_positions[0]:
            hits[p] += 1
    maskable = hits[1:7]
    assert hits[0] == 0 and hits[7] == 0
    expected = maskable.sum() / 6
    assert np.abs(maskable - expected).max() < 0.1 * expected


def test_short_rows_are_dropped_not_crashed():
    vocab = build_vocab(["a b c"], max_size=10)
    # row of pure UNK-able tokens below the maskable minimum is dropped
    batches = list(make_batches(["a", ""], vocab, seq_len=8, batch_size=1, seed=0))
    assert all(b.num_masked >= 1 for b in batches)


def test_synthetic_batch_is_fully_valid_and_masked():
    rng = np.random.default_rng(0)
    batch = synthetic_batch(rng, vocab_size=50, batch_size=3, seq_len=16)
    assert batch.validity.all()
    assert batch.num_masked == masked_count(16)
    rows = np.arange(3)[:, None]
    assert (batch.ids[rows, batch.masked_positions] == MASK).all()
    assert (batch.labels >= NUM_SPECIALS).all()


def test_labeled_tsv_and_classify_batches(tmp_path):
    path = tmp_path / "tiny.tsv"
    path.write_text("good film\t1\nbad film\t0\nfine\t1\n")
    texts, labels = load_labeled_tsv(path)
    assert labels == [1, 0, 1]
    vocab = build_vocab(texts, max_size=16)
    batches = make_classify_batches(texts, labels, vocab, seq_len=8, batch_size=2)
    assert len(batches) == 2
    batch, y = batches[0]
    assert batch.ids.shape == (2, 8)
    assert list(y) == [1, 0]
    assert batch.ids[0, 0] == CLS


def test_labeled_tsv_rejects_missing_tab(tmp_path):
    path = tmp_path / "bad.tsv"
    path.write_text("no label here\n")
    with pytest.raises(ValueError):
        load_labeled_tsv(path)
