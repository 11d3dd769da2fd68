"""Finite-difference gradient oracle.

Central differences (default step 1e-5) against the analytic backward
passes, in float64.  Used by the test suite and the `gradcheck` CLI
subcommand.
"""

import numpy as np
from dataclasses import dataclass

from .data import Batch
from .layout import parse_layout
from .model import Model, ModelDims

DEFAULT_STEP = 1e-5
DEFAULT_TOL = 1e-4
# relative-error floor: central-difference noise is ~1e-10 at this scale,
# so errors below tol*floor are measurement noise, not bugs
REL_FLOOR = 1e-4


def finite_diff(loss_fn, value, entries=None, step=DEFAULT_STEP):
    """d loss / d value[i] for each flat index i in entries (all if None)."""
    flat = value.reshape(-1)
    idxs = np.arange(flat.size) if entries is None else np.asarray(entries)
    out = np.empty(len(idxs), dtype=np.float64)
    for j, i in enumerate(idxs):
        orig = flat[i]
        flat[i] = orig + step
        lp = loss_fn()
        flat[i] = orig - step
        lm = loss_fn()
        flat[i] = orig
        out[j] = (lp - lm) / (2.0 * step)
    return out


def rel_error(analytic, fd):
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(fd)), REL_FLOOR)
    return np.abs(analytic - fd) / denom


@dataclass
class ParamCheck:
    name: str
    max_rel_err: float
    checked: int

    def ok(self, tol=DEFAULT_TOL):
        return self.max_rel_err < tol


def mean_loss_grads(model, batch):
    """Analytic gradient of the mean MLM loss, as {name: array}."""
    model.zero_grads()
    total, n = model.mlm_backward_sum(batch)
    model.combine_tied_grads()
    scale = 1.0 / n
    return {p.name: p.grad * scale for p in model.parameters()}, total / n


def check_model_gradients(model, batch, step=DEFAULT_STEP, max_entries=None, rng=None):
    """FD-vs-analytic comparison for every parameter of the model.

    max_entries caps the flat indices checked per parameter (None = all,
    which is what the acceptance suite runs at toy dims).
    """
    analytic, _ = mean_loss_grads(model, batch)
    loss_fn = lambda: model.mlm_loss(batch)
    results = []
    for p in model.parameters():
        size = p.value.size
        if max_entries is not None and size > max_entries:
            rng = rng or np.random.default_rng(0)
            entries = rng.choice(size, size=max_entries, replace=False)
        else:
            entries = np.arange(size)
        fd = finite_diff(loss_fn, p.value, entries, step)
        a = analytic[p.name].reshape(-1)[entries]
        results.append(ParamCheck(p.name, float(rel_error(a, fd).max()), len(entries)))
    return results


def toy_variant_models(seed=0, hidden=8, heads=2, ffn_inner=16, vocab=13, max_len=12):
    """The three two-layer variants at gradcheck scale, float64."""
    dims = ModelDims(hidden, heads, ffn_inner, vocab, max_len)
    layouts = {
        "baseline": "{2,sf}",
        "feedforward-tail": "sfs:f",
        "frozen-kv-tail": "sf:sf",
    }
    return {
        name: Model(dims, parse_layout(text), seed=seed, dtype=np.float64)
        for name, text in layouts.items()
    }


def toy_batch(seed=0, batch=2, seq_len=8, vocab=13, masked=2):
    """Small deterministic batch for the gradcheck suite."""
    rng = np.random.default_rng(seed)
    ids = rng.integers(5, vocab, size=(batch, seq_len)).astype(np.int64)
    ids[:, 0] = 2  # [CLS]
    ids[:, -1] = 3  # [SEP]
    validity = np.ones((batch, seq_len), dtype=bool)
    positions = np.empty((batch, masked), dtype=np.int64)
    labels = np.empty((batch, masked), dtype=np.int64)
    for r in range(batch):
        sel = np.sort(rng.choice(np.arange(1, seq_len - 1), size=masked, replace=False))
        positions[r] = sel
        labels[r] = ids[r, sel]
        ids[r, sel] = 4  # [MASK]
    return Batch(ids, validity, positions, labels, seed)


def run_suite(seed=0, step=DEFAULT_STEP, tol=DEFAULT_TOL, max_entries=None):
    """End-to-end gradcheck of all three variants. Returns {variant: [ParamCheck]}."""
    models = toy_variant_models(seed=seed)
    batch = toy_batch(seed=seed)
    return {
        name: check_model_gradients(m, batch, step=step, max_entries=max_entries)
        for name, m in models.items()
    }
