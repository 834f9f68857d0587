"""Synthetic compositional datasets.

Panel tasks: nine 8x8 binary panels in three row-groups; each row-group is
filled from a :class:`RuleTemplate` with its own three glyphs (A, B, C).
Each panel splits into four 4x4 quadrant tokens, giving 36 tokens.

Symbolic tasks: three sequences of three steps over four integer features
(mod 8); each feature follows one of eight rules, and a task is labelled by
the 4-tuple of rule ids.
"""

from __future__ import annotations

import hashlib
import itertools
import struct
from dataclasses import dataclass

import numpy as np

N_GLYPHS = 16
QUADRANTS = ("TL", "TR", "BL", "BR")
EMPTY = -1

# 16 distinct, non-empty 4x4 bitmaps; rows top to bottom
_GLYPH_ART = (
    "1111 1001 1001 1111",
    "0110 1111 1111 0110",
    "1000 0100 0010 0001",
    "0001 0010 0100 1000",
    "1001 0110 0110 1001",
    "0110 0110 0110 0110",
    "0000 1111 1111 0000",
    "1000 1100 1110 1111",
    "1111 0111 0011 0001",
    "1010 0101 1010 0101",
    "1100 1100 0011 0011",
    "0100 1110 0100 0000",
    "1111 1000 1000 1000",
    "0000 0110 0110 0000",
    "1110 0010 0010 0000",
    "0101 0101 0101 0101",
)

GLYPHS = np.array(
    [[[int(c) for c in row] for row in art.split()] for art in _GLYPH_ART], dtype=np.uint8
)


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class RuleTemplate:
    """Three quadrant patterns over the symbols A, B, C (``None`` = empty)."""

    name: str
    patterns: tuple

    @classmethod
    def parse(cls, name: str, layout: str) -> "RuleTemplate":
        """``"A..B B..C C..A"``: one 4-character word per panel, ``.`` for empty."""
        words = layout.split()
        patterns = tuple(tuple(None if ch == "." else ch for ch in w) for w in words)
        return cls(name, patterns)

    def __post_init__(self):
        if len(self.patterns) != 3 or any(len(p) != 4 for p in self.patterns):
            raise DataError("a template has three patterns of four slots")
        for p in self.patterns:
            if any(s not in (None, "A", "B", "C") for s in p):
                raise DataError(f"bad symbol in pattern {p}")
        filled = {tuple(s is not None for s in p) for p in self.patterns}
        if len(filled) != 1:
            raise DataError("non-empty slot positions must agree across the three patterns")


RULE_A = RuleTemplate.parse("a", "A..B B..C C..A")
RULE_B = RuleTemplate.parse("b", ".AB. .BC. .CA.")
PANEL_RULES = {"a": RULE_A, "b": RULE_B}


@dataclass(frozen=True, eq=False)
class PanelTask:
    rule: str
    elements: tuple  # 9 distinct glyph indices, (A, B, C) per row-group
    quadrants: np.ndarray  # (9, 4) glyph index per quadrant, EMPTY for none
    panels: np.ndarray  # (9, 8, 8) uint8 in {0, 1}

    def __eq__(self, other):
        return (
            isinstance(other, PanelTask)
            and self.rule == other.rule
            and tuple(self.elements) == tuple(other.elements)
            and np.array_equal(self.quadrants, other.quadrants)
            and np.array_equal(self.panels, other.panels)
        )


def _item_rng(seed: int, index: int | None = None) -> np.random.Generator:
    entropy = [int(seed)] if index is None else [int(seed), int(index)]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def render_panel(quadrant_glyphs) -> np.ndarray:
    panel = np.zeros((8, 8), dtype=np.uint8)
    for q, g in enumerate(quadrant_glyphs):
        if g != EMPTY:
            r, c = divmod(q, 2)
            panel[4 * r:4 * r + 4, 4 * c:4 * c + 4] = GLYPHS[g]
    return panel


def gen_panel_task(rule: RuleTemplate | str, seed: int, index: int | None = None) -> PanelTask:
    """Sample 9 distinct glyphs and lay out three row-groups under ``rule``."""
    if isinstance(rule, str):
        rule = PANEL_RULES[rule]
    rng = _item_rng(seed, index)
    elements = tuple(int(e) for e in rng.choice(N_GLYPHS, size=9, replace=False))
    return build_panel_task(rule, elements)


def build_panel_task(rule: RuleTemplate, elements) -> PanelTask:
    if len(set(elements)) != 9 or not all(0 <= e < N_GLYPHS for e in elements):
        raise DataError("need 9 distinct glyph indices")
    quads = np.full((9, 4), EMPTY, dtype=np.int64)
    for group in range(3):
        sym = dict(zip("ABC", elements[3 * group:3 * group + 3]))
        for j, pattern in enumerate(rule.patterns):
            quads[3 * group + j] = [EMPTY if s is None else sym[s] for s in pattern]
    panels = np.stack([render_panel(q) for q in quads])
    return PanelTask(rule.name, tuple(int(e) for e in elements), quads, panels)


def gen_panel_dataset(rule, count: int, seed: int) -> list[PanelTask]:
    return [gen_panel_task(rule, seed, i) for i in range(count)]


def tokenize_panels(task: PanelTask, mode: str = "pixels", mask_target: bool = False) -> np.ndarray:
    """36 tokens, panel-major then quadrant (TL, TR, BL, BR).

    ``pixels``: each token is its flattened 4x4 quadrant (36 x 16).
    ``onehot``: one-hot glyph index, column 16 marks an empty quadrant (36 x 17).
    """
    if mode == "pixels":
        p = task.panels.reshape(9, 2, 4, 2, 4).transpose(0, 1, 3, 2, 4)
        tokens = p.reshape(36, 16).astype(np.float64)
    elif mode == "onehot":
        tokens = np.zeros((36, N_GLYPHS + 1))
        idx = task.quadrants.reshape(-1).copy()
        idx[idx == EMPTY] = N_GLYPHS
        tokens[np.arange(36), idx] = 1.0
    else:
        raise DataError(f"unknown token mode {mode!r}")
    if mask_target:
        tokens[32:] = 0.0
    return tokens


def panel_from_tokens(tokens: np.ndarray) -> np.ndarray:
    """Inverse of pixel tokenization for one panel's four tokens."""
    t = np.asarray(tokens).reshape(2, 2, 4, 4)
    return t.transpose(0, 2, 1, 3).reshape(8, 8)


def verify_panel_task(task: PanelTask, rule: RuleTemplate) -> bool:
    """Independent re-check: each row-group is a consistent substitution into ``rule``."""
    for group in range(3):
        binding: dict[str, int] = {}
        for j, pattern in enumerate(rule.patterns):
            panel = task.panels[3 * group + j]
            for q, sym in enumerate(pattern):
                r, c = divmod(q, 2)
                block = panel[4 * r:4 * r + 4, 4 * c:4 * c + 4]
                if sym is None:
                    if block.any():
                        return False
                    continue
                matches = [g for g in range(N_GLYPHS) if np.array_equal(GLYPHS[g], block)]
                if len(matches) != 1 or binding.setdefault(sym, matches[0]) != matches[0]:
                    return False
        if len(set(binding.values())) != len(binding):
            return False
    return True


# --- symbolic rule-combination tasks --------------------------------------

MODULUS = 8
N_FEATURES = 4
RULE_NAMES = (
    "constant",
    "progression+1",
    "progression+2",
    "progression-1",
    "cyclic_shift",
    "distribute_three",
    "xor",
    "mirror",
)


@dataclass(frozen=True, eq=False)
class SymbolicTask:
    combo: tuple  # one rule id per feature
    grid: np.ndarray  # (3 sequences, 3 steps, 4 features)

    @property
    def target(self) -> tuple:
        return tuple(int(v) for v in self.grid[2, 2])

    def __eq__(self, other):
        return isinstance(other, SymbolicTask) and tuple(self.combo) == tuple(other.combo) and np.array_equal(
            self.grid, other.grid
        )


def _unroll(rule: int, rng: np.random.Generator) -> np.ndarray:
    m = MODULUS
    t = np.arange(3)
    name = RULE_NAMES[rule]
    if name == "constant":
        return np.repeat(rng.integers(0, m, size=(3, 1)), 3, axis=1)
    if name.startswith("progression"):
        step = {"progression+1": 1, "progression+2": 2, "progression-1": -1}[name]
        return (rng.integers(0, m, size=(3, 1)) + step * t) % m
    if name == "cyclic_shift":
        vals = rng.integers(0, m, size=3)
        return np.array([[vals[(k - s) % 3] for k in t] for s in range(3)])
    if name == "distribute_three":
        vals = rng.choice(m, size=3, replace=False)
        return np.array([[vals[(k + s) % 3] for k in t] for s in range(3)])
    if name == "xor":
        a, b = rng.integers(0, m, size=(2, 3))
        return np.stack([a, b, a ^ b], axis=1)
    v = rng.integers(0, m, size=3)
    return np.stack([v, m - 1 - v, v], axis=1)


def gen_symbolic_task(combo, seed: int, index: int | None = None) -> SymbolicTask:
    combo = tuple(int(r) for r in combo)
    if len(combo) != N_FEATURES or not all(0 <= r < len(RULE_NAMES) for r in combo):
        raise DataError(f"invalid rule combination {combo}")
    rng = _item_rng(seed, index)
    grid = np.stack([_unroll(r, rng) for r in combo], axis=-1).astype(np.int64)
    return SymbolicTask(combo, grid)


def rule_holds(rule: int, column: np.ndarray) -> bool:
    """Check a (3 sequences x 3 steps) column against one named rule."""
    c = np.asarray(column) % MODULUS
    name = RULE_NAMES[rule]
    rows = [list(r) for r in c]
    if name == "constant":
        return all(r[0] == r[1] == r[2] for r in rows)
    if name in ("progression+1", "progression+2", "progression-1"):
        k = int(name[-2:]) % MODULUS
        return all((r[1] - r[0]) % MODULUS == k and (r[2] - r[1]) % MODULUS == k for r in rows)
    if name == "cyclic_shift":
        return all(rows[s + 1] == [rows[s][2], rows[s][0], rows[s][1]] for s in range(2))
    if name == "distribute_three":
        return len(set(rows[0])) == 3 and all(rows[s + 1] == rows[s][1:] + rows[s][:1] for s in range(2))
    if name == "xor":
        return all(r[2] == (r[0] ^ r[1]) for r in rows)
    return all(r[1] == MODULUS - 1 - r[0] and r[2] == r[0] for r in rows)


def verify_symbolic_task(task: SymbolicTask) -> bool:
    return all(rule_holds(r, task.grid[:, :, f]) for f, r in enumerate(task.combo))


def all_rule_combos() -> list[tuple]:
    return list(itertools.product(range(len(RULE_NAMES)), repeat=N_FEATURES))


def _combo_key(combo, seed: int) -> bytes:
    return hashlib.sha256(f"{seed}:{','.join(map(str, combo))}".encode()).digest()


def split_rule_combos(combos, holdout_frac: float = 0.25, seed: int = 0):
    """Hash-ordered partition into ``(train, test)``; ``round(frac * len)`` combos are held out."""
    if not 0 < holdout_frac < 1:
        raise DataError("holdout_frac must lie strictly between 0 and 1")
    combos = [tuple(c) for c in combos]
    ranked = sorted(combos, key=lambda c: _combo_key(c, seed))
    n_test = int(round(holdout_frac * len(combos)))
    test = set(ranked[:n_test])
    return [c for c in combos if c not in test], [c for c in combos if c in test]


def gen_symbolic_dataset(combos, count: int, seed: int) -> list[SymbolicTask]:
    """Task ``i`` draws its combo and its values from an RNG keyed by ``(seed, i)``."""
    combos = list(combos)
    return [symbolic_item(combos, seed, i) for i in range(count)]


def symbolic_item(combos, seed: int, index: int) -> SymbolicTask:
    rng = _item_rng(seed, index)
    combo = combos[int(rng.integers(len(combos)))]
    return gen_symbolic_task(combo, int(rng.integers(2**63 - 1)))


def symbolic_stream(combos, seed: int, batch_size: int):
    """``make_batch(step)`` over an unbounded task stream; batch ``b`` holds items ``b*batch_size ...``.

    The first ``n`` streamed items equal ``gen_symbolic_dataset(combos, n, seed)``.
    """
    combos = list(combos)

    def make_batch(step: int):
        start = step * batch_size
        return symbolic_arrays([symbolic_item(combos, seed, i) for i in range(start, start + batch_size)])

    return make_batch


def tokenize_symbolic(task: SymbolicTask, mask_target: bool = True) -> np.ndarray:
    """9 tokens (sequence-major), each the concatenated one-hot of its 4 features."""
    tokens = np.zeros((9, N_FEATURES * MODULUS))
    flat = task.grid.reshape(9, N_FEATURES)
    for f in range(N_FEATURES):
        tokens[np.arange(9), f * MODULUS + flat[:, f]] = 1.0
    if mask_target:
        tokens[8] = 0.0
    return tokens


# --- array views for training ---------------------------------------------

def panel_arrays(tasks, mode: str = "pixels"):
    """``(inputs, targets)``: masked tokens in ``mode`` and unmasked pixel tokens."""
    inputs = np.stack([tokenize_panels(t, mode, mask_target=True) for t in tasks])
    targets = np.stack([tokenize_panels(t, "pixels") for t in tasks])
    return inputs, targets


def symbolic_arrays(tasks):
    """``(inputs, labels)`` with labels of shape ``(count, 4)``."""
    inputs = np.stack([tokenize_symbolic(t) for t in tasks])
    labels = np.array([t.target for t in tasks], dtype=np.int64)
    return inputs, labels


# --- dataset file -----------------------------------------------------------

DATASET_MAGIC = b"SCAD"
DATASET_VERSION = 1
KIND_PANEL, KIND_SYMBOLIC = 0, 1
_RULE_CODES = {name: i for i, name in enumerate(PANEL_RULES)}


class DatasetFormatError(DataError):
    pass


class CorruptHeaderError(DatasetFormatError):
    pass


class TruncatedFileError(DatasetFormatError):
    pass


class VersionMismatchError(DatasetFormatError):
    pass


def _encode(task) -> bytes:
    if isinstance(task, PanelTask):
        return bytes([_RULE_CODES[task.rule], *task.elements]) + task.panels.astype(np.uint8).tobytes()
    return bytes(task.combo) + task.grid.astype(np.uint8).tobytes()


def save_dataset(tasks, path, kind: str | None = None) -> None:
    """Header ``SCAD | u32 version | u8 kind | u32 count`` then ``u32 length | payload`` records.

    Panel payload: rule code, 9 element indices, 9*64 pixel bytes.
    Symbolic payload: 4 rule ids, 36 grid values (sequence, step, feature order).
    """
    tasks = list(tasks)
    if kind is None:
        kind = "symbolic" if tasks and isinstance(tasks[0], SymbolicTask) else "panel"
    code = KIND_PANEL if kind == "panel" else KIND_SYMBOLIC
    chunks = [DATASET_MAGIC, struct.pack("<IBI", DATASET_VERSION, code, len(tasks))]
    for task in tasks:
        payload = _encode(task)
        chunks.append(struct.pack("<I", len(payload)) + payload)
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def dataset_kind(path) -> str:
    with open(path, "rb") as fh:
        head = fh.read(13)
    if len(head) < 13 or head[:4] != DATASET_MAGIC:
        raise CorruptHeaderError("not a dataset file")
    return "panel" if head[8] == KIND_PANEL else "symbolic"


def load_dataset(path) -> list:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 13:
        if data[:4] == DATASET_MAGIC[: len(data[:4])] and len(data) >= 4:
            raise TruncatedFileError("dataset header is truncated")
        raise CorruptHeaderError("not a dataset file")
    if data[:4] != DATASET_MAGIC:
        raise CorruptHeaderError("bad magic bytes")
    version, code, count = struct.unpack_from("<IBI", data, 4)
    if version != DATASET_VERSION:
        raise VersionMismatchError(f"dataset version {version}, expected {DATASET_VERSION}")
    if code not in (KIND_PANEL, KIND_SYMBOLIC):
        raise CorruptHeaderError(f"unknown task kind {code}")
    rules = list(PANEL_RULES)
    pos, tasks = 13, []
    for _ in range(count):
        if pos + 4 > len(data):
            raise TruncatedFileError("dataset ends inside a record header")
        (length,) = struct.unpack_from("<I", data, pos)
        pos += 4
        if pos + length > len(data):
            raise TruncatedFileError("dataset ends inside a record")
        rec = data[pos:pos + length]
        pos += length
        if code == KIND_PANEL:
            if length != 10 + 9 * 64:
                raise CorruptHeaderError(f"panel record of length {length}")
            rule = PANEL_RULES[rules[rec[0]]]
            task = build_panel_task(rule, tuple(rec[1:10]))
            stored = np.frombuffer(rec[10:], dtype=np.uint8).reshape(9, 8, 8)
            if not np.array_equal(stored, task.panels):
                raise CorruptHeaderError("panel pixels disagree with the recorded elements")
        else:
            if length != 4 + 36:
                raise CorruptHeaderError(f"symbolic record of length {length}")
            grid = np.frombuffer(rec[4:], dtype=np.uint8).reshape(3, 3, 4).astype(np.int64)
            task = SymbolicTask(tuple(rec[:4]), grid)
        tasks.append(task)
    if pos != len(data):
        raise CorruptHeaderError("trailing bytes after the last record")
    return tasks
