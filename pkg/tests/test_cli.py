import numpy as np
import pytest

from narrowbert.cli import main


def toy_corpus_file(tmp_path, n_lines=300):
    rng = np.random.default_rng(0)
    words = [f"w{i}" for i in range(20)]
    lines = []
    for _ in range(n_lines):
        w = int(rng.integers(20))
        partner = (w * 7 + 3) % 20
        lines.append(" ".join([words[w], words[partner]] * int(rng.integers(5, 12))))
    path = tmp_path / "corpus.txt"
    path.write_text("\n".join(lines) + "\n")
    return path


def test_parse_baseline_exits_zero(capsys):
    assert main(["parse", "{12,sf}"]) == 0
    out = capsys.readouterr().out
    assert "atoms (24)" in out
    assert "ratio" in out


def test_parse_narrowed_reports_ratio(capsys):
    assert main(["parse", "sf:{5,sf}", "--seq-len", "512", "--mask-fraction", "0.15"]) == 0
    out = capsys.readouterr().out
    assert "narrow" in out
    assert "total with narrowing" in out


def test_parse_error_exits_two(capsys):
    assert main(["parse", "sf::"]) == 2
    assert "offset" in capsys.readouterr().err


def test_unknown_subcommand_exits_two():
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2


def test_eval_equiv_passes(capsys):
    assert main(["eval-equiv", "--trials", "5", "--seed", "3"]) == 0
    out = capsys.readouterr().out
    assert out.count("PASS") == 6
    assert "FAIL" not in out


def test_gradcheck_passes(capsys):
    assert main(["gradcheck", "--max-entries", "4", "--seed", "1"]) == 0
    out = capsys.readouterr().out
    assert out.count("PASS") == 3


def test_bench_writes_csv_and_svg(tmp_path, capsys):
    out_csv = tmp_path / "bench.csv"
    svg = tmp_path / "bench.svg"
    code = main([
        "bench", "--layouts", "{2,sf}", "sf:{1,sf}", "--mode", "inference-forward",
        "--seq-len", "16", "--batch", "2", "--hidden", "16", "--heads", "2",
        "--ffn-inner", "32", "--vocab-size", "64", "--iters", "5", "--warmup", "2",
        "--out", str(out_csv), "--svg", str(svg),
    ])
    assert code == 0
    lines = out_csv.read_text().splitlines()
    assert lines[0].startswith("layout,mode,")
    assert len(lines) == 3
    assert svg.read_text().startswith("<svg")


def test_pretrain_then_finetune_end_to_end(tmp_path, capsys):
    corpus = toy_corpus_file(tmp_path)
    log = tmp_path / "train.csv"
    ckpt = tmp_path / "model.nbrt"
    code = main([
        "pretrain", "--corpus", str(corpus), "--layout", "sf:{1,sf}",
        "--steps", "8", "--seq-len", "24", "--batch", "4", "--vocab-size", "64",
        "--out", str(log), "--save", str(ckpt), "--seed", "1",
    ])
    assert code == 0
    rows = log.read_text().splitlines()
    assert rows[0] == "step,loss,lr,tokens_per_sec,wall_ms"
    assert len(rows) == 9
    assert ckpt.exists()

    tsv = tmp_path / "labels.tsv"
    tsv.write_text("w0 w3 w0 w3\t0\nw1 w10 w1 w10\t1\nw0 w3\t0\nw1 w10\t1\n")
    code = main([
        "finetune", "--checkpoint", str(ckpt), "--data", str(tsv),
        "--steps", "5", "--batch", "2", "--seq-len", "12", "--seed", "0",
    ])
    assert code == 0
    assert "accuracy" in capsys.readouterr().out


def test_pretrain_rejects_invalid_layout(tmp_path, capsys):
    corpus = toy_corpus_file(tmp_path, n_lines=40)
    code = main([
        "pretrain", "--corpus", str(corpus), "--layout", ":sf", "--steps", "1",
    ])
    assert code == 2


def test_backend_flag_smoke(capsys):
    assert main(["--backend", "pure", "parse", "sf"]) == 0
    from narrowbert import backends

    backends.use_backend("auto")


def test_threads_env_fallback(monkeypatch):
    import os

    monkeypatch.setenv("NARROWBERT_THREADS", "1")
    monkeypatch.delenv("OPENBLAS_NUM_THREADS", raising=False)
    assert main(["parse", "sf"]) == 0
    assert os.environ.get("OPENBLAS_NUM_THREADS") == "1"
