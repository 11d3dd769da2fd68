"""Adam training loop with gradient accumulation, at toy scale.

The loss backward runs in summed form per micro-batch; gradients are
rescaled once per optimizer step by the total masked-position count.
Together with the row-ordered accumulation kernels this makes k
accumulated micro-batches bit-identical to one k-times-larger batch in
float64.

Config files are flat key=value text; CLI flags override file values.
The training log is an append-only CSV with columns
step,loss,lr,tokens_per_sec,wall_ms; dev-loss evaluations go to a sibling
CSV (step,dev_loss) so the training schema stays fixed.
"""

import math
import time
import numpy as np
from dataclasses import dataclass, fields, replace


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    layout: str = "{2,sf}:{10,sf}"
    learning_rate: float = 1e-3   # the full-scale reference config uses 5e-4
    warmup_steps: int = 50
    total_steps: int = 500
    micro_batch: int = 8
    accum_steps: int = 1
    seq_len: int = 64
    seed: int = 0
    precision: int = 32
    hidden: int = 64
    heads: int = 4
    ffn_inner: int = 256
    vocab_size: int = 2048
    clip_norm: float = 1.0
    mask_fraction: float = 0.15
    eval_every: int = 50
    eval_batches: int = 4
    dev_fraction: float = 0.1

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        for name in ("warmup_steps", "total_steps", "micro_batch", "accum_steps", "seq_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.precision not in (32, 64):
            raise ValueError("precision must be 32 or 64")

    @property
    def dtype(self):
        return np.float32 if self.precision == 32 else np.float64


def load_config(path, base=None):
    """Flat key=value file -> TrainConfig (unknown keys are an error)."""
    cfg = base or TrainConfig()
    field_types = {f.name: f.type for f in fields(TrainConfig)}
    overrides = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in field_types:
                raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
            current = getattr(cfg, key)
            if isinstance(current, bool):
                overrides[key] = value.lower() in ("1", "true", "yes")
            elif isinstance(current, int):
                overrides[key] = int(value)
            elif isinstance(current, float):
                overrides[key] = float(value)
            else:
                overrides[key] = value
    return replace(cfg, **overrides)


class AdamState:
    """Per-parameter first/second moments plus the shared step counter."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {p.name: np.zeros_like(p.value) for p in params}
        self.v = {p.name: np.zeros_like(p.value) for p in params}

    def ensure(self, params):
        for p in params:
            if p.name not in self.m:
                self.m[p.name] = np.zeros_like(p.value)
                self.v[p.name] = np.zeros_like(p.value)


def adam_step(params, state, lr_t):
    """One bias-corrected Adam update; zeroes gradients afterwards.

    Raises TrainingError naming the parameter if its gradient is non-finite.
    """
    state.t += 1
    b1, b2, eps = state.beta1, state.beta2, state.eps
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p in params:
        g = p.grad
        if not np.isfinite(g).all():
            raise TrainingError(f"non-finite gradient in {p.name} at step {state.t}")
        m = state.m[p.name]
        v = state.v[p.name]
        m[...] = b1 * m + (1.0 - b1) * g
        v[...] = b2 * v + (1.0 - b2) * (g * g)
        p.value -= (lr_t / c1) * m / (np.sqrt(v / c2) + eps)
        p.grad.fill(0)


def clip_global_norm(params, max_norm):
    """Scale all gradients so the global L2 norm is at most max_norm."""
    total = math.fsum(float(np.vdot(p.grad, p.grad)) for p in params)
    norm = math.sqrt(total)
    if norm > max_norm:
        scale = max_norm / norm
        for p in params:
            p.grad *= p.grad.dtype.type(scale)
    return norm


def lr_schedule(step, config):
    """Linear warmup to the peak rate, then linear decay to 0 at total_steps."""
    if step < 1:
        raise ValueError("step starts at 1")
    peak = config.learning_rate
    if step <= config.warmup_steps:
        return peak * step / config.warmup_steps
    if step >= config.total_steps:
        return 0.0
    span = config.total_steps - config.warmup_steps
    return peak * (config.total_steps - step) / span


@dataclass
class TrainRecord:
    step: int
    loss: float
    lr: float
    tokens_per_sec: float
    wall_ms: float


@dataclass
class TrainLog:
    records: list
    dev_records: list  # (step, dev_loss)

    @property
    def final_dev_loss(self):
        return self.dev_records[-1][1] if self.dev_records else None


def _append_csv(path, header, row):
    import os

    write_header = not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, "a", encoding="utf-8") as fh:
        if write_header:
            fh.write(header + "\n")
        fh.write(row + "\n")


def evaluate(model, dev_batches):
    """Mean MLM loss over held-out batches (forward only)."""
    losses = [model.mlm_loss(b) for b in dev_batches]
    if not losses:
        raise ValueError("no dev batches to evaluate")
    return float(np.mean(losses))


def train_loop(model, batch_stream, config, dev_batches=(), log_path=None, adam=None):
    """Forward/backward/accumulate/step until total_steps.

    batch_stream yields micro-batches; accum_steps of them form one
    optimizer step.  Emits one TrainRecord per step (and one CSV row when
    log_path is given); evaluates on dev_batches every eval_every steps.
    Non-finite loss aborts with diagnostics.
    """
    params = model.parameters()
    adam = adam or AdamState(params)
    adam.ensure(params)
    records = []
    dev_records = []
    stream = iter(batch_stream)
    dev_path = f"{log_path}.dev.csv" if log_path else None

    for step in range(1, config.total_steps + 1):
        t0 = time.perf_counter()
        model.zero_grads()
        total_nll = 0.0
        total_positions = 0
        total_tokens = 0
        for _ in range(config.accum_steps):
            try:
                batch = next(stream)
            except StopIteration:
                raise TrainingError(f"batch stream exhausted at step {step}") from None
            nll, n = model.mlm_backward_sum(batch)
            total_nll += nll
            total_positions += n
            total_tokens += batch.size * batch.seq_len
        loss = total_nll / total_positions
        if not math.isfinite(loss):
            raise TrainingError(f"non-finite loss {loss} at step {step}")
        model.combine_tied_grads()
        inv = model.dtype.type(1.0 / total_positions)
        for p in params:
            p.grad *= inv
        clip_global_norm(params, config.clip_norm)
        lr_t = lr_schedule(step, config)
        adam_step(params, adam, lr_t)
        wall = time.perf_counter() - t0

        rec = TrainRecord(step, loss, lr_t, total_tokens / wall, wall * 1e3)
        records.append(rec)
        if log_path:
            _append_csv(
                log_path,
                "step,loss,lr,tokens_per_sec,wall_ms",
                f"{rec.step},{rec.loss:.6f},{rec.lr:.8f},{rec.tokens_per_sec:.1f},{rec.wall_ms:.3f}",
            )
        if dev_batches and (step % config.eval_every == 0 or step == config.total_steps):
            dev_loss = evaluate(model, dev_batches)
            dev_records.append((step, dev_loss))
            if dev_path:
                _append_csv(dev_path, "step,dev_loss", f"{step},{dev_loss:.6f}")
    return TrainLog(records, dev_records)


def corpus_stream(lines, vocab, config):
    """Endless micro-batch stream over the corpus, reseeded each epoch."""
    from .data import make_batches

    epoch = 0
    while True:
        produced = False
        for batch in make_batches(
            lines, vocab, config.seq_len, config.micro_batch, seed=config.seed + 9973 * epoch
        ):
            produced = True
            yield batch
        if not produced:
            raise TrainingError("corpus produced no batches (too short or too sparse)")
        epoch += 1


def make_dev_batches(lines, vocab, config, max_batches=None):
    """Fixed-seed held-out batches for periodic evaluation."""
    from .data import make_batches

    limit = max_batches or config.eval_batches
    out = []
    for batch in make_batches(
        lines, vocab, config.seq_len, config.micro_batch, seed=config.seed + 1
    ):
        out.append(batch)
        if len(out) >= limit:
            break
    return out


def split_corpus(lines, dev_fraction, seed):
    """Deterministic train/dev split of corpus lines."""
    lines = list(lines)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(lines))
    n_dev = max(1, int(len(lines) * dev_fraction)) if len(lines) > 1 else 0
    dev_idx = set(order[:n_dev].tolist())
    train = [l for i, l in enumerate(lines) if i not in dev_idx]
    dev = [lines[i] for i in sorted(dev_idx)]
    return train, dev
