"""Randomized exactness oracles for the narrowing machinery.

Each check builds fresh random layouts/weights/batches in float64 and
demands bit-identical agreement between the narrowed computation and the
wide reference (`reference.py`).  Run via the `eval-equiv` CLI subcommand
or the test suite.
"""

import numpy as np
from dataclasses import dataclass

from .data import CLS, MASK, NUM_SPECIALS, SEP, Batch
from .layout import parse_layout
from .model import EncoderState, Model, ModelDims, PHASE_NARROWED
from .reference import encode_reference

FFN_TAIL = "ffn_tail"      # everything after the marker is feedforward
MIXED_TAIL = "mixed_tail"  # the tail contains attention (frozen-kv) layers


@dataclass
class CheckResult:
    name: str
    passed: bool
    trials: int
    detail: str = ""

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        extra = f" ({self.detail})" if self.detail else ""
        return f"{status} {self.name} [{self.trials} trials]{extra}"


def random_dims(rng, max_hidden=64):
    hidden = int(rng.choice([h for h in (8, 16, 32, 64) if h <= max_hidden]))
    heads = int(rng.choice([h for h in (1, 2, 4) if hidden % h == 0]))
    ffn_inner = hidden * int(rng.choice([1, 2, 4]))
    vocab = int(rng.integers(NUM_SPECIALS + 4, NUM_SPECIALS + 24))
    return ModelDims(hidden, heads, ffn_inner, vocab, max_len=32)


def random_layout_text(rng, family):
    head = ["s", "f"] + [str(rng.choice(["s", "f"])) for _ in range(int(rng.integers(0, 3)))]
    rng.shuffle(head)
    if family == FFN_TAIL:
        tail = ["f"] * int(rng.integers(1, 5))
    else:
        tail = ["s"] + [str(rng.choice(["s", "f"])) for _ in range(int(rng.integers(0, 4)))]
        rng.shuffle(tail)
    return "".join(head) + ":" + "".join(tail)


def random_batch(rng, dims, max_b=4, max_len=32, all_positions=False):
    b = int(rng.integers(1, max_b + 1))
    seq_len = int(rng.integers(6, max_len + 1))
    valid_len = int(rng.integers(4, seq_len + 1))
    ids = np.zeros((b, seq_len), dtype=np.int64)
    validity = np.zeros((b, seq_len), dtype=bool)
    for r in range(b):
        ids[r, 0] = CLS
        ids[r, 1 : valid_len - 1] = rng.integers(NUM_SPECIALS, dims.vocab, size=valid_len - 2)
        ids[r, valid_len - 1] = SEP
        validity[r, :valid_len] = True
    if all_positions:
        positions = np.tile(np.arange(seq_len, dtype=np.int64), (b, 1))
        labels = np.take_along_axis(ids, positions, axis=1).copy()
        return Batch(ids, validity, positions, labels, 0)
    m = int(rng.integers(1, valid_len - 1))
    positions = np.empty((b, m), dtype=np.int64)
    labels = np.empty((b, m), dtype=np.int64)
    for r in range(b):
        sel = np.sort(rng.choice(np.arange(1, valid_len - 1), size=m, replace=False))
        positions[r] = sel
        labels[r] = ids[r, sel]
        mask_roll = rng.random(m) < 0.8
        ids[r, sel[mask_roll]] = MASK
    return Batch(ids, validity, positions, labels, 0)


def _run_exactness(seed, trials, family, mode="pretrain"):
    rng = np.random.default_rng(seed)
    worst = 0.0
    failures = 0
    for _ in range(trials):
        dims = random_dims(rng)
        layout = parse_layout(random_layout_text(rng, family))
        model = Model(dims, layout, seed=int(rng.integers(0, 2**31)), dtype=np.float64)
        batch = random_batch(rng, dims)
        state, _ = model.encode(batch, mode=mode)
        got = state.active_hidden
        ref = encode_reference(model, batch, mode=mode, frozen_kv_tail=(family == MIXED_TAIL))
        if not np.array_equal(got, ref):
            failures += 1
            worst = max(worst, float(np.abs(got - ref).max()))
    passed = failures == 0
    detail = "bit-identical" if passed else f"{failures} mismatches, max |diff| {worst:.3e}"
    return passed, detail


def check_ffn_tail_exactness(seed=0, trials=100):
    """Narrowed run == plain un-narrowed run gathered at the end."""
    passed, detail = _run_exactness(seed, trials, FFN_TAIL)
    return CheckResult("narrow-exactness (feedforward tail)", passed, trials, detail)


def check_frozen_kv_exactness(seed=0, trials=100):
    """Narrowed run == frozen-kv wide reference gathered at the end."""
    passed, detail = _run_exactness(seed, trials, MIXED_TAIL)
    return CheckResult("frozen-kv exactness (attention tail)", passed, trials, detail)


def check_narrow_to_all_positions(seed=0, trials=20):
    """Narrowing to every position == the frozen-kv wide reference everywhere."""
    rng = np.random.default_rng(seed)
    failures = 0
    for _ in range(trials):
        dims = random_dims(rng, max_hidden=32)
        layout = parse_layout(random_layout_text(rng, MIXED_TAIL))
        model = Model(dims, layout, seed=int(rng.integers(0, 2**31)), dtype=np.float64)
        batch = random_batch(rng, dims, all_positions=True)
        state, _ = model.encode(batch, mode="pretrain")
        ref = encode_reference(model, batch, mode="pretrain", frozen_kv_tail=True)
        if not np.array_equal(state.active_hidden, ref):
            failures += 1
    return CheckResult(
        "narrow-to-all == wide frozen-kv",
        failures == 0,
        trials,
        "" if failures == 0 else f"{failures} mismatches",
    )


def check_query_permutation(seed=0, trials=50):
    """Permuting the active rows permutes narrowed-attention output rows."""
    rng = np.random.default_rng(seed)
    failures = 0
    for _ in range(trials):
        dims = random_dims(rng, max_hidden=32)
        model = Model(dims, parse_layout("sf:s"), seed=int(rng.integers(0, 2**31)), dtype=np.float64)
        layer = model.atom_layers[-1]
        b = int(rng.integers(1, 4))
        seq_len = int(rng.integers(4, 16))
        m = int(rng.integers(1, seq_len + 1))
        full = rng.normal(size=(b, seq_len, dims.hidden))
        positions = np.stack([rng.choice(seq_len, size=m, replace=False) for _ in range(b)])
        rows = np.arange(b)[:, None]
        state = EncoderState(
            full_hidden=full,
            phase=PHASE_NARROWED,
            active_hidden=full[rows, positions].copy(),
            active_positions=positions,
            kv_source=full,
        )
        out1, _ = model.attention_forward(state, layer, None)
        perm = rng.permutation(m)
        state2 = EncoderState(
            full_hidden=full,
            phase=PHASE_NARROWED,
            active_hidden=state.active_hidden[:, perm, :].copy(),
            active_positions=positions[:, perm],
            kv_source=full,
        )
        out2, _ = model.attention_forward(state2, layer, None)
        if not np.array_equal(out1.active_hidden[:, perm, :], out2.active_hidden):
            failures += 1
    return CheckResult(
        "narrowed attention is row-permutation-equivariant",
        failures == 0,
        trials,
        "" if failures == 0 else f"{failures} mismatches",
    )


def check_masked_set_independence(seed=0, trials=30):
    """Feedforward-tail layouts: the output row for a kept position j does
    not depend on which other positions are kept, given the same ids."""
    rng = np.random.default_rng(seed)
    failures = 0
    for _ in range(trials):
        dims = random_dims(rng, max_hidden=32)
        layout = parse_layout(random_layout_text(rng, FFN_TAIL))
        model = Model(dims, layout, seed=int(rng.integers(0, 2**31)), dtype=np.float64)
        seq_len = int(rng.integers(6, 16))
        ids = rng.integers(NUM_SPECIALS, dims.vocab, size=(1, seq_len)).astype(np.int64)
        ids[0, 0], ids[0, -1] = CLS, SEP
        validity = np.ones((1, seq_len), dtype=bool)
        j = int(rng.integers(1, seq_len - 1))
        others = [p for p in range(1, seq_len - 1) if p != j]
        a, b = rng.choice(others, size=2, replace=False)

        def run(companion):
            positions = np.sort(np.array([[j, companion]], dtype=np.int64), axis=1)
            labels = ids[0, positions[0]].reshape(1, -1).copy()
            batch = Batch(ids.copy(), validity, positions, labels, 0)
            state, _ = model.encode(batch, mode="pretrain")
            return state.active_hidden[0, int(np.flatnonzero(positions[0] == j)[0])]

        if not np.array_equal(run(int(a)), run(int(b))):
            failures += 1
    return CheckResult(
        "kept-row output independent of the rest of the masked set",
        failures == 0,
        trials,
        "" if failures == 0 else f"{failures} mismatches",
    )


def check_end_to_end_gradients(seed=0, entries_per_param=6):
    """Spot finite-difference check of the full MLM gradient, all variants."""
    from .gradcheck import DEFAULT_TOL, run_suite

    suites = run_suite(seed=seed, max_entries=entries_per_param)
    worst = max(c.max_rel_err for checks in suites.values() for c in checks)
    passed = all(c.ok(DEFAULT_TOL) for checks in suites.values() for c in checks)
    n = sum(c.checked for checks in suites.values() for c in checks)
    return CheckResult(
        "end-to-end MLM gradient vs finite differences",
        passed,
        n,
        f"worst rel err {worst:.2e}",
    )


def run_all(seed=0, trials=100):
    return [
        check_ffn_tail_exactness(seed, trials),
        check_frozen_kv_exactness(seed + 1, trials),
        check_narrow_to_all_positions(seed + 2, max(10, trials // 5)),
        check_query_permutation(seed + 3, max(10, trials // 2)),
        check_masked_set_independence(seed + 4, max(10, trials // 3)),
        check_end_to_end_gradients(seed + 5),
    ]
