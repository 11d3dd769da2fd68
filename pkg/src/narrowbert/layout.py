"""Layer-layout notation: parsing, rendering, validation, FLOP model.

Grammar (ASCII, no whitespace):

    layout := item+
    item   := 's' | 'f' | ':' | '{' INT ',' unit+ '}'
    unit   := 's' | 'f'

's' is a self-attention layer, 'f' a feedforward layer, ':' the narrowing
point (gather the active positions; every layer after it runs on the
narrowed rows, attention layers against frozen full-sequence keys/values).
'{n,us}' repeats the unit string n times, e.g. "{12,sf}" is 12 interleaved
attention/feedforward pairs and "sf:{5,sf}" narrows after the first pair.
"""

import enum
import math
from dataclasses import dataclass
from fractions import Fraction


class Atom(enum.Enum):
    ATTENTION = "s"
    FEEDFORWARD = "f"
    NARROW = ":"


class LayoutError(ValueError):
    """Parse failure; `kind` names the rule broken, `offset` the byte."""

    def __init__(self, kind, offset, message):
        super().__init__(f"{message} (at offset {offset})")
        self.kind = kind
        self.offset = offset


@dataclass(frozen=True)
class Layout:
    atoms: tuple
    source_text: str = ""

    def __len__(self):
        return len(self.atoms)

    @property
    def narrow_index(self):
        """Index of the narrow marker, or None."""
        for i, a in enumerate(self.atoms):
            if a is Atom.NARROW:
                return i
        return None

    def layer_atoms(self):
        """(atom_index, atom) for the compute atoms, narrow marker skipped."""
        return [(i, a) for i, a in enumerate(self.atoms) if a is not Atom.NARROW]


def parse_layout(text):
    """Parse a notation string into a Layout.

    Raises LayoutError with a byte offset on malformed input; the errors are
    distinguished by `kind`: unknown_char, malformed, zero_count,
    duplicate_narrow, early_narrow.
    """
    if not isinstance(text, str) or not text:
        raise LayoutError("malformed", 0, "empty layout string")
    try:
        text.encode("ascii")
    except UnicodeEncodeError as exc:
        raise LayoutError("unknown_char", exc.start, "non-ASCII character") from None

    atoms = []
    seen_narrow = False
    i = 0
    n = len(text)
    while i < n:
        ch = text[i]
        if ch == "s":
            atoms.append(Atom.ATTENTION)
            i += 1
        elif ch == "f":
            atoms.append(Atom.FEEDFORWARD)
            i += 1
        elif ch == ":":
            if seen_narrow:
                raise LayoutError("duplicate_narrow", i, "more than one ':'")
            if Atom.ATTENTION not in atoms or Atom.FEEDFORWARD not in atoms:
                raise LayoutError(
                    "early_narrow", i, "':' before both an 's' and an 'f'"
                )
            atoms.append(Atom.NARROW)
            seen_narrow = True
            i += 1
        elif ch == "{":
            start = i
            i += 1
            num_start = i
            while i < n and text[i].isdigit():
                i += 1
            if i == num_start:
                raise LayoutError("malformed", i, "expected repetition count")
            count = int(text[num_start:i])
            if count == 0:
                raise LayoutError("zero_count", num_start, "zero repetition count")
            if i >= n or text[i] != ",":
                raise LayoutError("malformed", i, "expected ',' in group")
            i += 1
            unit = []
            while i < n and text[i] in "sf":
                unit.append(Atom.ATTENTION if text[i] == "s" else Atom.FEEDFORWARD)
                i += 1
            if not unit:
                raise LayoutError("malformed", i, "group unit must be 's'/'f'")
            if i >= n or text[i] != "}":
                raise LayoutError("malformed", i if i < n else n, "unterminated group")
            i += 1
            atoms.extend(unit * count)
        else:
            raise LayoutError("unknown_char", i, f"unknown character {ch!r}")
    if not atoms:
        raise LayoutError("malformed", 0, "layout expands to no layers")
    return Layout(tuple(atoms), text)


def render_layout(layout):
    """Canonical notation: maximal runs collapsed to {n,unit} when n >= 2.

    At each position the longest-spanning repetition wins, shortest unit on
    ties; parse(render(L)) reproduces the atoms exactly.
    """
    chars = [a.value for a in layout.atoms]
    out = []
    i = 0
    n = len(chars)
    while i < n:
        if chars[i] == ":":
            out.append(":")
            i += 1
            continue
        # no group may span the narrow marker
        end = i
        while end < n and chars[end] != ":":
            end += 1
        best_u, best_reps = 0, 0
        for u in range(1, (end - i) // 2 + 1):
            unit = chars[i : i + u]
            reps = 1
            while i + (reps + 1) * u <= end and chars[i + reps * u : i + (reps + 1) * u] == unit:
                reps += 1
            if reps >= 2 and reps * u > best_reps * best_u:
                best_u, best_reps = u, reps
        if best_reps >= 2:
            out.append("{%d,%s}" % (best_reps, "".join(chars[i : i + best_u])))
            i += best_u * best_reps
        else:
            out.append(chars[i])
            i += 1
    return "".join(out)


def validate_layout(layout, mode="pretrain"):
    """Check the structural invariants; returns a list of violation strings.

    Valid for both modes when empty.  Attention after the narrow is always
    legal (it runs against the frozen key/value source), so `mode` does not
    currently add constraints beyond the shared ones.
    """
    if mode not in ("pretrain", "classify"):
        raise ValueError(f"unknown mode {mode!r}")
    violations = []
    atoms = layout.atoms
    if not atoms:
        violations.append("layout has no layers")
        return violations
    narrows = [i for i, a in enumerate(atoms) if a is Atom.NARROW]
    if len(narrows) > 1:
        violations.append(f"{len(narrows)} narrow markers (at most one allowed)")
    if narrows:
        head = atoms[: narrows[0]]
        if Atom.ATTENTION not in head or Atom.FEEDFORWARD not in head:
            violations.append(
                "narrow marker before both an attention and a feedforward layer"
            )
    if all(a is Atom.NARROW for a in atoms):
        violations.append("no compute layers")
    return violations


@dataclass(frozen=True)
class FlopReport:
    """Forward multiply-accumulate counts (2 flops per MAC) for one sequence.

    softmax/layer-norm/bias terms are O(L*d) noise and are not counted.
    `total_full` prices the same atoms with no narrowing; `ratio` is exact.
    """

    per_atom_flops: tuple  # ((atom_index, flops), ...)
    total_full: int
    total_narrowed: int
    ratio: Fraction


def _attention_flops_wide(L, d):
    return 8 * L * d * d + 4 * L * L * d


def _attention_flops_narrowed(L, m, d):
    # queries + output proj on m rows; keys/values re-projected from the
    # frozen L-row source; scores and weighted sum are m x L
    return 2 * m * d * d + 4 * L * d * d + 2 * d * d * m + 4 * m * L * d


def _feedforward_flops(rows, d, d_ff):
    return 4 * rows * d * d_ff


def estimate_flops(layout, dims, seq_len, active_frac):
    """FLOP model for one sequence of seq_len tokens under this layout.

    active_frac is the fraction of positions kept by the narrow;
    m = ceil(active_frac * seq_len), at least 1.
    """
    if not 0.0 < active_frac <= 1.0:
        raise ValueError(f"active_frac must be in (0, 1], got {active_frac}")
    if seq_len < 1:
        raise ValueError("seq_len must be >= 1")
    L = int(seq_len)
    m = max(1, math.ceil(active_frac * L))
    d, d_ff = dims.hidden, dims.ffn_inner

    per_atom = []
    total_full = 0
    total_narrowed = 0
    narrowed = False
    for i, atom in enumerate(layout.atoms):
        if atom is Atom.NARROW:
            per_atom.append((i, 0))
            narrowed = True
            continue
        if atom is Atom.ATTENTION:
            full = _attention_flops_wide(L, d)
            cost = _attention_flops_narrowed(L, m, d) if narrowed else full
        else:
            full = _feedforward_flops(L, d, d_ff)
            cost = _feedforward_flops(m if narrowed else L, d, d_ff)
        per_atom.append((i, cost))
        total_full += full
        total_narrowed += cost
    return FlopReport(
        per_atom_flops=tuple(per_atom),
        total_full=total_full,
        total_narrowed=total_narrowed,
        ratio=Fraction(total_full, total_narrowed),
    )
