"""Command-line entry point.

Exit codes: 0 success, 1 failed check, 2 usage/parse error.  Thread count
(--threads, falling back to NARROWBERT_THREADS) is applied to the BLAS
environment variables before NumPy loads, so the heavy imports happen
inside the subcommand handlers.
"""

import argparse
import os
import sys


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="narrowbert",
        description="Narrowed transformer-encoder lab: parse layouts, pretrain, "
        "benchmark, and verify the narrowing machinery.",
    )
    parser.add_argument("--threads", type=int, default=None, help="BLAS thread count (env fallback: NARROWBERT_THREADS)")
    parser.add_argument("--backend", choices=("auto", "compiled", "pure"), default=None, help="kernel backend")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, *, seed=True, precision=True):
        if seed:
            p.add_argument("--seed", type=int, default=0)
        if precision:
            p.add_argument("--precision", type=int, choices=(32, 64), default=32)

    p = sub.add_parser("parse", help="expand a layout and print its FLOP model")
    p.add_argument("layout", help="layout notation, e.g. '{12,sf}' or 'sf:{5,sf}'")
    p.add_argument("--seq-len", type=int, default=512)
    p.add_argument("--mask-fraction", type=float, default=0.15)
    p.add_argument("--hidden", type=int, default=768)
    p.add_argument("--heads", type=int, default=12)
    p.add_argument("--ffn-inner", type=int, default=3072)

    p = sub.add_parser("pretrain", help="toy masked-language-model pretraining")
    p.add_argument("--corpus", required=True, help="UTF-8 text, one document per line")
    p.add_argument("--layout", default=None)
    p.add_argument("--config", default=None, help="flat key=value config file")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--seq-len", type=int, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--accum", type=int, default=None)
    p.add_argument("--vocab-size", type=int, default=None)
    p.add_argument("--out", default=None, help="training log CSV path")
    p.add_argument("--save", default=None, help="checkpoint output path")
    common(p)

    p = sub.add_parser("bench", help="wall-clock layout comparison")
    p.add_argument("--layouts", nargs="+", default=None,
                   help="layouts to compare (default: the six standard configs)")
    p.add_argument("--mode", choices=("pretrain-step", "inference-forward", "classify-forward"),
                   default="pretrain-step")
    p.add_argument("--seq-len", type=int, default=128)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--hidden", type=int, default=128)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--ffn-inner", type=int, default=512)
    p.add_argument("--vocab-size", type=int, default=2048)
    p.add_argument("--mask-fraction", type=float, default=0.15)
    p.add_argument("--iters", type=int, default=5)
    p.add_argument("--warmup", type=int, default=2)
    p.add_argument("--out", default=None, help="CSV output path")
    p.add_argument("--svg", default=None, help="optional SVG bar chart path")
    p.add_argument("--compare-backends", action="store_true",
                   help="run under every available kernel backend")
    common(p)

    p = sub.add_parser("eval-equiv", help="run the narrowing exactness oracles")
    p.add_argument("--trials", type=int, default=100)
    common(p, precision=False)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--max-entries", type=int, default=None,
                   help="cap checked entries per parameter (default: all)")
    common(p, precision=False)

    p = sub.add_parser("finetune", help="train a classifier head from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="TSV: text TAB integer-label")
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--seq-len", type=int, default=None, help="default: checkpoint max_len")
    p.add_argument("--save", default=None)
    common(p, precision=False)

    return parser


def _apply_threads(args):
    threads = args.threads
    if threads is None:
        env = os.environ.get("NARROWBERT_THREADS")
        threads = int(env) if env else None
    if threads is not None:
        for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(threads)


def _apply_backend(args):
    if args.backend:
        from . import backends

        backends.use_backend(args.backend)


def _cmd_parse(args):
    from .layout import Atom, LayoutError, estimate_flops, parse_layout, render_layout, validate_layout
    from .model import ModelDims

    try:
        layout = parse_layout(args.layout)
    except LayoutError as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return 2
    names = {Atom.ATTENTION: "attention", Atom.FEEDFORWARD: "feedforward", Atom.NARROW: "narrow"}
    print(f"layout: {args.layout}")
    print(f"canonical: {render_layout(layout)}")
    print(f"atoms ({len(layout.atoms)}):")
    for i, atom in enumerate(layout.atoms):
        print(f"  [{i:2d}] {names[atom]}")
    violations = validate_layout(layout)
    if violations:
        for v in violations:
            print(f"violation: {v}", file=sys.stderr)
        return 1
    dims = ModelDims(args.hidden, args.heads, args.ffn_inner, 30522, max(args.seq_len, 1))
    report = estimate_flops(layout, dims, args.seq_len, args.mask_fraction)
    print(f"flops per sequence (L={args.seq_len}, d={args.hidden}, d_ff={args.ffn_inner}, "
          f"mask={args.mask_fraction}):")
    for i, flops in report.per_atom_flops:
        print(f"  [{i:2d}] {flops:,}")
    print(f"total without narrowing: {report.total_full:,}")
    print(f"total with narrowing:    {report.total_narrowed:,}")
    print(f"ratio: {report.ratio} = {float(report.ratio):.3f}")
    return 0


def _cmd_pretrain(args):
    import numpy as np

    from .checkpoint import save_checkpoint
    from .data import build_vocab
    from .layout import parse_layout, validate_layout
    from .model import Model, ModelDims
    from .training import (
        TrainConfig,
        corpus_stream,
        load_config,
        make_dev_batches,
        split_corpus,
        train_loop,
    )

    cfg = TrainConfig()
    if args.config:
        cfg = load_config(args.config, cfg)
    overrides = {
        "layout": args.layout,
        "total_steps": args.steps,
        "seq_len": args.seq_len,
        "micro_batch": args.batch,
        "learning_rate": args.lr,
        "accum_steps": args.accum,
        "vocab_size": args.vocab_size,
        "seed": args.seed,
        "precision": args.precision,
    }
    from dataclasses import replace

    cfg = replace(cfg, **{k: v for k, v in overrides.items() if v is not None})

    with open(args.corpus, encoding="utf-8") as fh:
        lines = [line.rstrip("\n") for line in fh if line.strip()]
    vocab = build_vocab(lines, cfg.vocab_size)
    layout = parse_layout(cfg.layout)
    violations = validate_layout(layout)
    if violations:
        print(f"invalid layout: {violations}", file=sys.stderr)
        return 2
    train_lines, dev_lines = split_corpus(lines, cfg.dev_fraction, cfg.seed)
    dev = make_dev_batches(dev_lines, vocab, cfg)
    dims = ModelDims(cfg.hidden, cfg.heads, cfg.ffn_inner, len(vocab), cfg.seq_len)
    model = Model(dims, layout, seed=cfg.seed, dtype=cfg.dtype)
    print(f"pretraining {cfg.layout} for {cfg.total_steps} steps "
          f"(|vocab|={len(vocab)}, ln|V|={np.log(len(vocab)):.3f})")
    log = train_loop(model, corpus_stream(train_lines, vocab, cfg), cfg, dev, log_path=args.out)
    last = log.records[-1]
    print(f"final step {last.step}: loss {last.loss:.4f}, {last.tokens_per_sec:.0f} tokens/s")
    if log.dev_records:
        print(f"final dev loss: {log.final_dev_loss:.4f}")
    if args.save:
        save_checkpoint(model, args.save, vocab=vocab)
        print(f"checkpoint written to {args.save}")
    return 0


def _cmd_bench(args):
    from .bench import BenchConfig, compare_backends, emit_report, run_benchmark
    from .model import ModelDims

    layouts = tuple(args.layouts) if args.layouts else None
    dims = ModelDims(args.hidden, args.heads, args.ffn_inner, args.vocab_size,
                     max(args.seq_len, 8))
    kwargs = dict(
        dims=dims,
        seq_len=args.seq_len,
        batch_size=args.batch,
        mask_fraction=args.mask_fraction,
        mode=args.mode,
        warmup_iters=args.warmup,
        measured_iters=args.iters,
        precision=args.precision,
        seed=args.seed,
    )
    if layouts:
        kwargs["layouts"] = layouts
    config = BenchConfig(**kwargs)

    def show(report, tag=""):
        if tag:
            print(f"--- backend: {tag}")
        print(f"environment: {report.environment}")
        for r in report.rows:
            print(f"  {r.layout:24s} {r.mean_ms:9.2f} ms  ±{r.std_ms:7.2f}  "
                  f"{r.tokens_per_sec:10.0f} tok/s  speedup {r.speedup:.2f}x")

    if args.compare_backends:
        reports = compare_backends(config)
        for name, report in reports.items():
            show(report, tag=name)
            if args.out:
                emit_report(report, f"{args.out}.{name}.csv")
        return 0
    report = run_benchmark(config)
    show(report)
    if args.out:
        emit_report(report, args.out, svg_path=args.svg)
    elif args.svg:
        emit_report(report, os.devnull, svg_path=args.svg)
    return 0


def _cmd_eval_equiv(args):
    from .equivalence import run_all

    results = run_all(seed=args.seed, trials=args.trials)
    ok = True
    for res in results:
        print(res.line())
        ok = ok and res.passed
    return 0 if ok else 1


def _cmd_gradcheck(args):
    from .gradcheck import DEFAULT_TOL, run_suite

    suites = run_suite(seed=args.seed, max_entries=args.max_entries)
    ok = True
    for variant, checks in suites.items():
        worst = max(c.max_rel_err for c in checks)
        passed = all(c.ok() for c in checks)
        ok = ok and passed
        status = "PASS" if passed else "FAIL"
        print(f"{status} {variant}: max rel err {worst:.2e} over "
              f"{sum(c.checked for c in checks)} entries (tol {DEFAULT_TOL})")
        if not passed:
            for c in checks:
                if not c.ok():
                    print(f"  FAIL {c.name}: {c.max_rel_err:.2e}")
    return 0 if ok else 1


def _cmd_finetune(args):
    import numpy as np

    from .checkpoint import load_checkpoint, save_checkpoint
    from .data import load_labeled_tsv, make_classify_batches
    from .training import AdamState, adam_step, clip_global_norm
    from . import numerics as nm

    model, vocab, _ = load_checkpoint(args.checkpoint)
    if vocab is None:
        print("checkpoint has no vocab; cannot tokenize", file=sys.stderr)
        return 2
    texts, labels = load_labeled_tsv(args.data)
    num_classes = max(labels) + 1
    model.add_classifier(num_classes, seed=args.seed)
    seq_len = args.seq_len or model.dims.max_len
    batches = make_classify_batches(texts, labels, vocab, seq_len, args.batch)
    if not batches:
        print("no usable rows in the labeled data", file=sys.stderr)
        return 2

    params = model.parameters()
    adam = AdamState(params)
    rng = np.random.default_rng(args.seed)
    for step in range(1, args.steps + 1):
        batch, y = batches[int(rng.integers(len(batches)))]
        model.zero_grads()
        logits, ctx = model.classify_logits(batch)
        total, probs = nm.cross_entropy_total(logits, y)
        d_logits = nm.cross_entropy_backward(probs, y, 1.0)
        model.classify_backward_sum(ctx, d_logits)
        model.combine_tied_grads()
        inv = model.dtype.type(1.0 / len(y))
        for p in params:
            p.grad *= inv
        clip_global_norm(params, 1.0)
        adam_step(params, adam, args.lr)
        if step % max(1, args.steps // 10) == 0 or step == 1:
            print(f"step {step}: loss {total / len(y):.4f}")

    correct = total_n = 0
    for batch, y in batches:
        logits, _ = model.classify_logits(batch)
        correct += int((logits.argmax(axis=1) == y).sum())
        total_n += len(y)
    print(f"training-set accuracy: {correct}/{total_n} = {correct / total_n:.3f}")
    if args.save:
        save_checkpoint(model, args.save, vocab=vocab)
        print(f"checkpoint written to {args.save}")
    return 0


_HANDLERS = {
    "parse": _cmd_parse,
    "pretrain": _cmd_pretrain,
    "bench": _cmd_bench,
    "eval-equiv": _cmd_eval_equiv,
    "gradcheck": _cmd_gradcheck,
    "finetune": _cmd_finetune,
}


def main(argv=None):
    parser = _build_parser()
    args = parser.parse_args(argv)
    _apply_threads(args)
    _apply_backend(args)
    try:
        return _HANDLERS[args.command](args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
