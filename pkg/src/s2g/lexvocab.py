"""Tokenization, number-to-slot extraction, and source/target vocabularies."""
from __future__ import annotations

import json
import math
import re
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

from .optree import (OPERATORS, PI, Constant, FormulaRegistry, NodeKind,
                     NumberSlot, Operator, SLOT_RE, format_number, parse_number, slot_token)

MAX_SLOTS = 10
CONSTANTS = (1.0, 2.0, PI)

PAD, UNK, NUM = "<pad>", "<unk>", "<num>"

_CJK = "㐀-䶿一-鿿豈-﫿　-〿＀-￯"
_NUMBER = r"(?:\d+(?:\.\d+)?|\.\d+)(?:/(?:\d+(?:\.\d+)?|\.\d+))?%?"
_PIECE_RE = re.compile(rf"{_NUMBER}|[{_CJK}]|[A-Za-z_]+|[^\s{_CJK}A-Za-z_\d]")
_NUMBER_TOKEN_RE = re.compile(rf"^{_NUMBER}$")


class LexError(Exception):
    pass


class TooManyNumbers(LexError):
    pass


class UnmappableNumber(LexError):
    def __init__(self, value: float):
        super().__init__(f"{format_number(value)} is neither a problem number nor a constant")
        self.value = value


def tokenize(text: str) -> list[str]:
    """Whitespace tokens, further split into numbers, single CJK characters,
    letter runs and single punctuation marks (``"5m."`` -> ``5 m .``)."""
    out: list[str] = []
    for chunk in text.split():
        out.extend(_PIECE_RE.findall(chunk))
    return out


def number_value(token: str) -> float | None:
    """Value of a numeric token: integer, decimal, ``x%`` or ``a/b``."""
    if not _NUMBER_TOKEN_RE.match(token):
        return None
    if "/" in token:
        num, den = token.rstrip("%").split("/")
        den_v = float(den)
        if den_v == 0:
            return None
        value = float(num) / den_v
        return value / 100.0 if token.endswith("%") else value
    return parse_number(token)


@dataclass(frozen=True)
class NumberSlots:
    values: tuple[float, ...]
    positions: tuple[int, ...]

    def __post_init__(self):
        if len(self.values) != len(self.positions):
            raise ValueError("values and positions differ in length")
        if any(b <= a for a, b in zip(self.positions, self.positions[1:])):
            raise ValueError("slot positions must be strictly increasing")

    def __len__(self):
        return len(self.values)

    def env(self) -> dict[int, float]:
        return dict(enumerate(self.values))


def extract_numbers(tokens: Sequence[str], max_slots: int = MAX_SLOTS) -> tuple[list[str], NumberSlots]:
    masked, values, positions = [], [], []
    for pos, tok in enumerate(tokens):
        value = number_value(tok)
        if value is None:
            masked.append(tok)
            continue
        if len(values) == max_slots:
            raise TooManyNumbers(f"more than {max_slots} numbers in problem")
        masked.append(slot_token(len(values)))
        values.append(value)
        positions.append(pos)
    return masked, NumberSlots(tuple(values), tuple(positions))


class SourceVocab:
    """Token -> index with ``<pad>``=0, ``<unk>``=1 and ``<num>``=2 reserved."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.itos = [PAD, UNK, NUM]
        for t in tokens:
            if t not in self.itos:
                self.itos.append(t)
        self.stoi = {t: i for i, t in enumerate(self.itos)}

    def __len__(self):
        return len(self.itos)

    def __contains__(self, token):
        return token in self.stoi

    def index(self, token: str) -> int:
        if SLOT_RE.match(token):
            return self.stoi[NUM]
        return self.stoi.get(token, self.stoi[UNK])

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.index(t) for t in tokens]

    def to_json(self) -> dict[str, int]:
        return dict(self.stoi)

    @classmethod
    def from_json(cls, mapping: dict[str, int]) -> "SourceVocab":
        ordered = sorted(mapping, key=mapping.get)
        if ordered[:3] != [PAD, UNK, NUM] or [mapping[t] for t in ordered] != list(range(len(ordered))):
            raise ValueError("vocabulary indices must be dense with reserved tokens first")
        return cls(ordered[3:])


def build_source_vocab(corpus: Iterable[str | Sequence[str]], min_freq: int = 1) -> SourceVocab:
    """Index every token seen at least ``min_freq`` times, most frequent first.

    Items of ``corpus`` are raw strings (tokenized here) or token lists; slot
    tokens ``<Ni>`` are folded into the reserved ``<num>`` entry.
    """
    if min_freq < 1:
        raise ValueError("min_freq must be >= 1")
    counts: Counter = Counter()
    for item in corpus:
        toks = tokenize(item) if isinstance(item, str) else item
        counts.update(t for t in toks if not SLOT_RE.match(t))
    kept = [t for t, c in counts.items() if c >= min_freq and t not in (PAD, UNK, NUM)]
    kept.sort(key=lambda t: (-counts[t], t))
    return SourceVocab(kept)


class TargetVocab:
    """Operators, constants, formula names, then number slots ``<N0>..<N(M-1)>``.

    The first three segments are the static vocabulary scored by the output
    layer; the slot segment is scored dynamically against encoder states.
    """

    def __init__(self, reg: FormulaRegistry, max_slots: int = MAX_SLOTS,
                 constants: Sequence[float] = CONSTANTS):
        self.reg = reg
        self.max_slots = max_slots
        self.constants = tuple(float(c) for c in constants)
        self.kinds: list[NodeKind] = (
            [Operator(op) for op in OPERATORS]
            + [Constant(c) for c in self.constants]
            + [reg.call(name) for name in reg.names()]
            + [NumberSlot(i) for i in range(max_slots)])
        self.itos = [self._token(k) for k in self.kinds]
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        n_op, n_const, n_form = len(OPERATORS), len(self.constants), len(reg)
        self.segments = {
            "operator": range(0, n_op),
            "constant": range(n_op, n_op + n_const),
            "formula": range(n_op + n_const, n_op + n_const + n_form),
            "number": range(n_op + n_const + n_form, len(self.itos)),
        }
        self.num_static = n_op + n_const + n_form
        self.arities = [k.arity for k in self.kinds]

    @staticmethod
    def _token(kind: NodeKind) -> str:
        if isinstance(kind, Operator):
            return kind.symbol
        if isinstance(kind, Constant):
            return format_number(kind.value)
        if isinstance(kind, NumberSlot):
            return slot_token(kind.index)
        return kind.name

    def __len__(self):
        return len(self.itos)

    def segment_of(self, index: int) -> str:
        for name, rng in self.segments.items():
            if index in rng:
                return name
        raise IndexError(index)

    def slot_index(self, slot: int) -> int:
        return self.segments["number"][slot]

    def kind(self, index: int) -> NodeKind:
        return self.kinds[index]

    def decode(self, indices: Sequence[int]) -> list[str]:
        return [self.itos[i] for i in indices]

    def to_json(self) -> dict[str, int]:
        return dict(self.stoi)


def encode_target(prefix: Sequence[str], slots: NumberSlots, vocab: TargetVocab) -> list[int]:
    """Map prefix tokens to target indices, resolving numeric literals to slots first.

    A literal goes to the first slot holding an equal value (within 1e-9), else to
    an equal constant; anything else raises ``UnmappableNumber``.
    """
    out = []
    for tok in prefix:
        if tok in vocab.stoi and vocab.segment_of(vocab.stoi[tok]) != "constant":
            m = SLOT_RE.match(tok)
            if m and int(m.group(1)) >= len(slots):
                raise LexError(f"{tok} refers to a missing problem number")
            out.append(vocab.stoi[tok])
            continue
        value = parse_number(tok)
        if value is None:
            raise KeyError(f"token {tok!r} not in target vocabulary")
        idx = _resolve_number(value, slots, vocab)
        if idx is None:
            raise UnmappableNumber(value)
        out.append(idx)
    return out


def _resolve_number(value: float, slots: NumberSlots, vocab: TargetVocab) -> int | None:
    for i, v in enumerate(slots.values):
        if i < vocab.max_slots and math.isclose(v, value, rel_tol=0.0, abs_tol=1e-9):
            return vocab.slot_index(i)
    for j, c in enumerate(vocab.constants):
        if math.isclose(c, value, rel_tol=0.0, abs_tol=1e-9):
            return vocab.segments["constant"][j]
    return None


def dump_vocab(mapping: dict[str, int], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(mapping, fh, ensure_ascii=False, indent=1)
