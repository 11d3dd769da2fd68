"""Corpus ingestion, vocabulary, batching, and the masking plan.

Corpus format: UTF-8 plain text, one document per line.  Tokenization is
lowercased whitespace splitting; tokenization quality is orthogonal to the
narrowing mechanism, so nothing fancier is warranted here.

Each batch row is [CLS] tokens... [SEP] [PAD]*, single segment.  Rows are
bucketed by valid length so the masked count M = max(1, round(0.15 *
valid_len)) is uniform across the batch, which keeps the narrowed tensors
rectangular.  Masking is re-sampled per batch from the seed stream.
"""

import numpy as np
from dataclasses import dataclass

PAD, UNK, CLS, SEP, MASK = 0, 1, 2, 3, 4
SPECIALS = ("[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]")
NUM_SPECIALS = len(SPECIALS)

_VOCAB_HEADER = (
    "# narrowbert vocab: one token per line below this header;\n"
    "# token id = line index (0-based, header excluded) + 5;\n"
    "# ids 0-4 are reserved for [PAD] [UNK] [CLS] [SEP] [MASK].\n"
)


class Vocab:
    """Token/id bijection with the five specials pinned at ids 0-4."""

    def __init__(self, tokens):
        self.id_to_token = list(SPECIALS) + list(tokens)
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise ValueError("duplicate tokens in vocab")

    def __len__(self):
        return len(self.id_to_token)

    def encode(self, token):
        return self.token_to_id.get(token, UNK)

    def encode_line(self, line):
        return [self.encode(t) for t in line.lower().split()]

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(_VOCAB_HEADER)
            for tok in self.id_to_token[NUM_SPECIALS:]:
                fh.write(tok + "\n")

    @classmethod
    def load(cls, path):
        tokens = []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if line.startswith("#"):
                    continue
                line = line.rstrip("\n")
                if line:
                    tokens.append(line)
        return cls(tokens)


def build_vocab(lines, max_size):
    """Frequency-ranked vocab (ties lexicographic), truncated to max_size.

    max_size includes the five specials.
    """
    counts = {}
    n_lines = 0
    for line in lines:
        n_lines += 1
        for tok in line.lower().split():
            counts[tok] = counts.get(tok, 0) + 1
    if n_lines == 0 or not counts:
        raise ValueError("empty corpus")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    keep = max(0, max_size - NUM_SPECIALS)
    return Vocab([tok for tok, _ in ranked[:keep]])


@dataclass(frozen=True)
class MaskingPolicy:
    """Fraction of maskable positions selected, and what happens to them."""

    mask_fraction: float = 0.15
    mask_prob: float = 0.8      # -> [MASK]
    random_prob: float = 0.1    # -> random non-special token
    keep_prob: float = 0.1      # unchanged

    def __post_init__(self):
        if abs(self.mask_prob + self.random_prob + self.keep_prob - 1.0) > 1e-9:
            raise ValueError("replacement fractions must sum to 1")


@dataclass
class Batch:
    """One rectangular MLM batch.

    ids              (B,L) int64, already mutated by the masking policy
    validity         (B,L) bool, True from [CLS] through [SEP]
    masked_positions (B,M) int64, strictly increasing per row
    labels           (B,M) int64, the pre-masking ids at those positions
    seed             the seed that produced the masking
    """

    ids: np.ndarray
    validity: np.ndarray
    masked_positions: np.ndarray
    labels: np.ndarray
    seed: int

    @property
    def size(self):
        return self.ids.shape[0]

    @property
    def seq_len(self):
        return self.ids.shape[1]

    @property
    def num_masked(self):
        return self.masked_positions.shape[1]

    def original_ids(self):
        """ids with the masking mutations undone."""
        ids = self.ids.copy()
        if self.masked_positions.size:
            rows = np.arange(ids.shape[0])[:, None]
            ids[rows, self.masked_positions] = self.labels
        return ids


def masked_count(valid_len, mask_fraction=0.15):
    return max(1, round(mask_fraction * valid_len))


def apply_masking(batch, policy, seed, vocab_size):
    """Re-select and re-mask a batch; returns a new Batch.

    Selection: M positions per row, uniform over the maskable (id >= 5,
    i.e. non-special) positions.  Mutation per selection: mask_prob ->
    [MASK], random_prob -> uniform random non-special id, keep_prob ->
    unchanged.  Labels always hold the original ids.  Assumes rows share
    one valid length (bucketed batches).
    """
    rng = np.random.default_rng(seed)
    ids = batch.original_ids()
    b, _ = ids.shape
    maskable = ids >= NUM_SPECIALS
    valid_len = int(batch.validity[0].sum())
    m = masked_count(valid_len, policy.mask_fraction)

    positions = np.empty((b, m), dtype=np.int64)
    labels = np.empty((b, m), dtype=np.int64)
    for r in range(b):
        cand = np.flatnonzero(maskable[r])
        if len(cand) < m:
            raise ValueError(f"row {r} has {len(cand)} maskable positions, need {m}")
        sel = np.sort(rng.choice(cand, size=m, replace=False))
        positions[r] = sel
        labels[r] = ids[r, sel]
        roll = rng.random(m)
        for j, p in enumerate(sel):
            if roll[j] < policy.mask_prob:
                ids[r, p] = MASK
            elif roll[j] < policy.mask_prob + policy.random_prob:
                ids[r, p] = int(rng.integers(NUM_SPECIALS, vocab_size))
            # else: keep the original id
    return Batch(ids, batch.validity.copy(), positions, labels, seed)


def make_batches(lines, vocab, seq_len, batch_size, seed, policy=None):
    """One epoch of masked batches (deterministic under seed).

    Documents are encoded, truncated to seq_len - 2 content tokens, bucketed
    by valid length, shuffled within buckets, and emitted as full batches of
    batch_size rows.  Rows that cannot supply M maskable positions (e.g.
    all-[UNK] lines) are dropped.  Per-batch masking seeds come from the
    stream's generator, so masking is re-sampled every epoch.
    """
    if seq_len < 4:
        raise ValueError("seq_len must be >= 4")
    policy = policy or MaskingPolicy()
    rng = np.random.default_rng(seed)

    buckets = {}
    for line in lines:
        toks = vocab.encode_line(line)
        if not toks:
            continue
        toks = toks[: seq_len - 2]
        valid_len = len(toks) + 2
        m = masked_count(valid_len, policy.mask_fraction)
        if sum(1 for t in toks if t >= NUM_SPECIALS) < m:
            continue
        buckets.setdefault(valid_len, []).append(toks)

    for valid_len in sorted(buckets):
        docs = buckets[valid_len]
        order = rng.permutation(len(docs))
        for start in range(0, len(docs) - batch_size + 1, batch_size):
            rows = [docs[i] for i in order[start : start + batch_size]]
            ids = np.full((batch_size, seq_len), PAD, dtype=np.int64)
            validity = np.zeros((batch_size, seq_len), dtype=bool)
            for r, toks in enumerate(rows):
                ids[r, 0] = CLS
                ids[r, 1 : 1 + len(toks)] = toks
                ids[r, 1 + len(toks)] = SEP
                validity[r, : len(toks) + 2] = True
            raw = Batch(
                ids,
                validity,
                np.empty((batch_size, 0), dtype=np.int64),
                np.empty((batch_size, 0), dtype=np.int64),
                seed,
            )
            mask_seed = int(rng.integers(0, 2**63 - 1))
            yield apply_masking(raw, policy, mask_seed, len(vocab))


def load_labeled_tsv(path):
    """'text TAB integer-label' per line -> (texts, labels)."""
    texts, labels = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            if "\t" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'text<TAB>label'")
            text, label = line.rsplit("\t", 1)
            texts.append(text)
            labels.append(int(label))
    if not texts:
        raise ValueError(f"{path}: no labeled rows")
    return texts, labels


def make_classify_batches(texts, labels, vocab, seq_len, batch_size):
    """[(Batch, labels)] for classification; no masking, pads via validity."""
    rows = []
    for text, label in zip(texts, labels):
        toks = vocab.encode_line(text)[: seq_len - 2]
        if toks:
            rows.append((toks, label))
    out = []
    for start in range(0, len(rows), batch_size):
        chunk = rows[start : start + batch_size]
        b = len(chunk)
        ids = np.full((b, seq_len), PAD, dtype=np.int64)
        validity = np.zeros((b, seq_len), dtype=bool)
        y = np.empty(b, dtype=np.int64)
        for r, (toks, label) in enumerate(chunk):
            ids[r, 0] = CLS
            ids[r, 1 : 1 + len(toks)] = toks
            ids[r, 1 + len(toks)] = SEP
            validity[r, : len(toks) + 2] = True
            y[r] = label
        empty = np.empty((b, 0), dtype=np.int64)
        out.append((Batch(ids, validity, empty, empty, 0), y))
    return out


def synthetic_batch(rng, vocab_size, batch_size, seq_len, mask_fraction=0.15):
    """Uniform-random batch for benchmarking; arithmetic cost is id-independent."""
    ids = rng.integers(NUM_SPECIALS, vocab_size, size=(batch_size, seq_len))
    ids = ids.astype(np.int64)
    ids[:, 0] = CLS
    ids[:, -1] = SEP
    validity = np.ones((batch_size, seq_len), dtype=bool)
    m = masked_count(seq_len, mask_fraction)
    positions = np.empty((batch_size, m), dtype=np.int64)
    labels = np.empty((batch_size, m), dtype=np.int64)
    for r in range(batch_size):
        sel = np.sort(rng.choice(np.arange(1, seq_len - 1), size=m, replace=False))
        positions[r] = sel
        labels[r] = ids[r, sel]
        ids[r, sel] = MASK
    return Batch(ids, validity, positions, labels, 0)
