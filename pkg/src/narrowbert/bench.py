"""Wall-clock and FLOP-model comparison of layouts.

Synthetic batches are built before the clock starts; per-iteration
wall-clock is measured with perf_counter, and the speedup column is
relative to the first (baseline) layout.  The flops column is the layout
module's per-sequence forward estimate, reported as-is.
"""

import time
import tracemalloc
import numpy as np
from dataclasses import dataclass, field

from . import backends
from .data import synthetic_batch
from .layout import estimate_flops, parse_layout, validate_layout
from .model import Model, ModelDims
from .training import AdamState, adam_step, clip_global_norm

MODES = ("pretrain-step", "inference-forward", "classify-forward")

# the five narrowed configurations compared against the 12-layer baseline
DEFAULT_LAYOUTS = (
    "{12,sf}",
    "sfsf{10,s}:{10,f}",
    "{1,sf}:{11,sf}",
    "{2,sf}:{10,sf}",
    "{3,sf}:{9,sf}",
    "{4,sf}:{8,sf}",
)


@dataclass
class BenchConfig:
    layouts: tuple = DEFAULT_LAYOUTS
    dims: ModelDims = field(default_factory=lambda: ModelDims(128, 4, 512, 2048, 512))
    seq_len: int = 128
    batch_size: int = 8
    mask_fraction: float = 0.15
    mode: str = "pretrain-step"
    warmup_iters: int = 2
    measured_iters: int = 5
    precision: int = 32
    seed: int = 0
    num_classes: int = 2

    def __post_init__(self):
        if self.measured_iters < 5:
            raise ValueError("measured_iters must be >= 5")
        if self.warmup_iters < 2:
            raise ValueError("warmup_iters must be >= 2")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.seq_len > self.dims.max_len:
            raise ValueError("seq_len exceeds dims.max_len")

    @property
    def dtype(self):
        return np.float32 if self.precision == 32 else np.float64


@dataclass
class LayoutTiming:
    layout: str
    mode: str
    mean_ms: float
    std_ms: float
    tokens_per_sec: float
    flops: int
    speedup: float
    peak_bytes: int


@dataclass
class BenchReport:
    rows: list
    environment: dict


def _step_fn(config, model, batch, adam):
    mode = config.mode
    if mode == "pretrain-step":
        def run():
            model.zero_grads()
            total, n = model.mlm_backward_sum(batch)
            model.combine_tied_grads()
            params = model.parameters()
            inv = model.dtype.type(1.0 / n)
            for p in params:
                p.grad *= inv
            clip_global_norm(params, 1.0)
            adam_step(params, adam, 1e-3)
            return total
    elif mode == "inference-forward":
        def run():
            state, _ = model.encode(batch, mode="pretrain")
            rows, _ = model.gather_masked(state, batch)
            logits, _ = model.mlm_logits(rows)
            return logits
    else:
        def run():
            logits, _ = model.classify_logits(batch)
            return logits
    return run


def run_benchmark(config):
    """Time every layout under identical dims/batch; returns a BenchReport."""
    import os

    rng = np.random.default_rng(config.seed)
    batch = synthetic_batch(
        rng, config.dims.vocab, config.batch_size, config.seq_len, config.mask_fraction
    )
    rows = []
    for text in config.layouts:
        layout = parse_layout(text)
        violations = validate_layout(layout)
        if violations:
            raise ValueError(f"invalid layout {text!r}: {violations}")
        model = Model(config.dims, layout, seed=config.seed, dtype=config.dtype)
        if config.mode == "classify-forward":
            model.add_classifier(config.num_classes, seed=config.seed)
        adam = AdamState(model.parameters()) if config.mode == "pretrain-step" else None
        run = _step_fn(config, model, batch, adam)

        for _ in range(config.warmup_iters):
            run()
        times = []
        for _ in range(config.measured_iters):
            t0 = time.perf_counter()
            run()
            times.append(time.perf_counter() - t0)
        tracemalloc.start()
        run()
        _, peak = tracemalloc.get_traced_memory()
        tracemalloc.stop()

        mean_s = float(np.mean(times))
        rows.append(
            LayoutTiming(
                layout=text,
                mode=config.mode,
                mean_ms=mean_s * 1e3,
                std_ms=float(np.std(times)) * 1e3,
                tokens_per_sec=config.batch_size * config.seq_len / mean_s,
                flops=estimate_flops(
                    layout, config.dims, config.seq_len, config.mask_fraction
                ).total_narrowed,
                speedup=0.0,
                peak_bytes=int(peak),
            )
        )
    base = rows[0].mean_ms
    for r in rows:
        r.speedup = base / r.mean_ms
    environment = {
        "backend": backends.get().NAME,
        "precision": config.precision,
        "threads": os.environ.get("OPENBLAS_NUM_THREADS", "default"),
        "batch_size": config.batch_size,
        "seq_len": config.seq_len,
        "hidden": config.dims.hidden,
    }
    return BenchReport(rows, environment)


def compare_backends(config):
    """Run the benchmark under every available backend. {name: BenchReport}."""
    current = backends.get().NAME
    out = {}
    try:
        for name in backends.available_backends():
            backends.use_backend(name)
            out[name] = run_benchmark(config)
    finally:
        backends.use_backend(current)
    return out


CSV_HEADER = "layout,mode,mean_ms,std_ms,tokens_per_sec,flops,speedup"


def emit_report(report, path, svg_path=None):
    """Deterministic CSV (and optional SVG bar chart) for a BenchReport."""
    lines = [CSV_HEADER]
    for r in report.rows:
        lines.append(
            f"{r.layout},{r.mode},{r.mean_ms:.6f},{r.std_ms:.6f},"
            f"{r.tokens_per_sec:.3f},{r.flops},{r.speedup:.6f}"
        )
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    if svg_path:
        _emit_svg(report, svg_path)


def _emit_svg(report, path):
    rows = report.rows
    width, bar_h, gap, left = 640, 24, 10, 200
    height = len(rows) * (bar_h + gap) + gap + 30
    max_speedup = max(r.speedup for r in rows) or 1.0
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<text x="{left}" y="18" font-family="monospace" font-size="13">'
        f"speedup vs {rows[0].layout} ({rows[0].mode})</text>",
    ]
    y = 30
    for r in rows:
        w = (width - left - 60) * r.speedup / max_speedup
        parts.append(
            f'<text x="4" y="{y + bar_h - 7}" font-family="monospace" font-size="12">{r.layout}</text>'
        )
        parts.append(
            f'<rect x="{left}" y="{y}" width="{w:.1f}" height="{bar_h}" fill="#4477aa"/>'
        )
        parts.append(
            f'<text x="{left + w + 4:.1f}" y="{y + bar_h - 7}" font-family="monospace" '
            f'font-size="12">{r.speedup:.2f}x</text>'
        )
        y += bar_h + gap
    parts.append("</svg>")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(parts) + "\n")
