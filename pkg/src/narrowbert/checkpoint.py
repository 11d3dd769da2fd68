"""Single-file binary checkpoints.

Wire format (all integers little-endian):

    magic   4 bytes  "NBRT"
    version u32      currently 1
    dims    u32 x5   hidden, heads, ffn_inner, vocab, max_len
    ln_eps  f64
    layout  u32 length + utf-8 notation string
    vocab   u32 count, then per non-special token: u16 length + utf-8
    flags   u8       bit0: Adam state present
    blobs   u32 count, then per blob:
              u16 name length + utf-8 name
              u8 ndim, u32 x ndim shape
              float32 little-endian values, C order
    adam    (if flagged) u64 step count, then 2*count blobs (first moments
            in parameter order, then second moments)

Values are stored as float32 regardless of the model's compute precision,
so the bit-exact round-trip guarantee applies to float32 models (the
training/benchmark default); float64 models are downcast on save.
"""

import struct
import numpy as np

from .data import NUM_SPECIALS, Vocab
from .layout import parse_layout
from .model import Model, ModelDims

MAGIC = b"NBRT"
VERSION = 1


class CheckpointError(RuntimeError):
    def __init__(self, kind, message):
        super().__init__(message)
        self.kind = kind


def _read(fh, n, what):
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointError("truncated", f"truncated checkpoint while reading {what}")
    return data


def _write_blob(fh, name, arr):
    name_b = name.encode("utf-8")
    fh.write(struct.pack("<H", len(name_b)))
    fh.write(name_b)
    fh.write(struct.pack("<B", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_blob(fh):
    (name_len,) = struct.unpack("<H", _read(fh, 2, "blob name length"))
    name = _read(fh, name_len, "blob name").decode("utf-8")
    (ndim,) = struct.unpack("<B", _read(fh, 1, f"blob {name} ndim"))
    shape = struct.unpack(f"<{ndim}I", _read(fh, 4 * ndim, f"blob {name} shape"))
    count = int(np.prod(shape)) if ndim else 1
    data = _read(fh, 4 * count, f"blob {name} data")
    arr = np.frombuffer(data, dtype="<f4").reshape(shape).astype(np.float32)
    return name, arr


def save_checkpoint(model, path, vocab=None, adam=None):
    """Write model (and optionally vocab + Adam state) to path."""
    dims = model.dims
    params = model.parameters()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(
            struct.pack(
                "<5I", dims.hidden, dims.heads, dims.ffn_inner, dims.vocab, dims.max_len
            )
        )
        fh.write(struct.pack("<d", dims.ln_eps))
        layout_b = model.layout.source_text.encode("utf-8")
        fh.write(struct.pack("<I", len(layout_b)))
        fh.write(layout_b)
        tokens = vocab.id_to_token[NUM_SPECIALS:] if vocab is not None else []
        fh.write(struct.pack("<I", len(tokens)))
        for tok in tokens:
            tok_b = tok.encode("utf-8")
            fh.write(struct.pack("<H", len(tok_b)))
            fh.write(tok_b)
        fh.write(struct.pack("<B", 1 if adam is not None else 0))
        fh.write(struct.pack("<I", len(params)))
        for p in params:
            _write_blob(fh, p.name, p.value)
        if adam is not None:
            fh.write(struct.pack("<Q", adam.t))
            for p in params:
                _write_blob(fh, p.name, adam.m[p.name])
            for p in params:
                _write_blob(fh, p.name, adam.v[p.name])


def load_checkpoint(path):
    """Read a checkpoint; returns (model, vocab_or_None, adam_state_or_None).

    The model is rebuilt in float32; every parameter is bit-identical to
    what was saved.
    """
    from .training import AdamState

    with open(path, "rb") as fh:
        magic = _read(fh, 4, "magic")
        if magic != MAGIC:
            raise CheckpointError("bad_magic", f"bad magic {magic!r}")
        (version,) = struct.unpack("<I", _read(fh, 4, "version"))
        if version != VERSION:
            raise CheckpointError("bad_version", f"unsupported version {version}")
        hidden, heads, ffn_inner, vocab_size, max_len = struct.unpack(
            "<5I", _read(fh, 20, "dims")
        )
        (ln_eps,) = struct.unpack("<d", _read(fh, 8, "ln_eps"))
        (layout_len,) = struct.unpack("<I", _read(fh, 4, "layout length"))
        layout_text = _read(fh, layout_len, "layout").decode("utf-8")
        (n_tokens,) = struct.unpack("<I", _read(fh, 4, "vocab count"))
        tokens = []
        for _ in range(n_tokens):
            (tl,) = struct.unpack("<H", _read(fh, 2, "token length"))
            tokens.append(_read(fh, tl, "token").decode("utf-8"))
        (flags,) = struct.unpack("<B", _read(fh, 1, "flags"))
        (n_blobs,) = struct.unpack("<I", _read(fh, 4, "blob count"))
        blobs = [_read_blob(fh) for _ in range(n_blobs)]

        dims = ModelDims(hidden, heads, ffn_inner, vocab_size, max_len, ln_eps)
        layout = parse_layout(layout_text)
        model = Model(dims, layout, seed=0, dtype=np.float32)
        blob_map = dict(blobs)
        if "cls.w" in blob_map:
            model.add_classifier(blob_map["cls.w"].shape[1])
        params = {p.name: p for p in model.parameters()}
        for name, arr in blobs:
            if name not in params:
                raise CheckpointError("bad_blob", f"unknown parameter blob {name!r}")
            p = params[name]
            if tuple(arr.shape) != tuple(p.value.shape):
                raise CheckpointError(
                    "shape_mismatch",
                    f"blob {name!r} has shape {arr.shape}, model expects {p.value.shape}",
                )
            p.value[...] = arr

        adam = None
        if flags & 1:
            (t,) = struct.unpack("<Q", _read(fh, 8, "adam step"))
            adam = AdamState(model.parameters())
            adam.t = t
            for store in (adam.m, adam.v):
                for _ in range(n_blobs):
                    name, arr = _read_blob(fh)
                    if name not in store or store[name].shape != arr.shape:
                        raise CheckpointError(
                            "shape_mismatch", f"adam blob {name!r} mismatch"
                        )
                    store[name][...] = arr

        vocab = Vocab(tokens) if tokens else None
        if vocab is not None and len(vocab) != vocab_size:
            raise CheckpointError(
                "shape_mismatch",
                f"vocab has {len(vocab)} entries, header says {vocab_size}",
            )
        return model, vocab, adam
