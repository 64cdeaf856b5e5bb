"""Problem datasets: JSONL ingestion with validation, folds, a synthetic generator, metrics."""
from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .lexvocab import (MAX_SLOTS, LexError, NumberSlots, TargetVocab, encode_target,
                       extract_numbers, tokenize)
from .ndgrad import make_rng
from .optree import (ExecutionError, FormulaRegistry, OpTreeError, default_registry, evaluate,
                     from_prefix, parse_infix, to_prefix)

log = logging.getLogger(__name__)

CLASSES = ("formula-annotated", "other-shape", "no-formula-needed")
_CLASS_ALIASES = {"formula": "formula-annotated", "annotated": "formula-annotated",
                  "other": "other-shape", "no-formula": "no-formula-needed",
                  "none": "no-formula-needed"}
REQUIRED_KEYS = ("id", "text", "equation", "answer")


class MalformedLine(ValueError):
    def __init__(self, lineno: int, why: str):
        super().__init__(f"line {lineno}: {why}")
        self.lineno = lineno


def answers_match(value: float, answer: float, tol: float = 1e-4) -> bool:
    return abs(value - answer) <= tol * max(1.0, abs(answer))


@dataclass
class ProblemInstance:
    id: str
    text: str
    equation: str
    answer: float
    cls: str
    tokens: list[str] = field(default_factory=list)          # number-masked tokens
    slots: NumberSlots = NumberSlots((), ())
    prefix: list[str] | None = None                           # slot-normalized gold prefix

    def record(self) -> dict:
        return {"id": self.id, "text": self.text, "equation": self.equation,
                "answer": self.answer, "class": self.cls}


@dataclass
class Dataset:
    instances: list[ProblemInstance]
    rejects: list[dict] = field(default_factory=list)        # {"id", "reason"}

    def __len__(self):
        return len(self.instances)

    def __iter__(self):
        return iter(self.instances)

    def __getitem__(self, i):
        return self.instances[i]

    @property
    def class_counts(self) -> dict[str, int]:
        counts = Counter(inst.cls for inst in self.instances)
        return {c: counts.get(c, 0) for c in CLASSES}

    def subset(self, ids: Iterable[str]) -> "Dataset":
        by_id = {inst.id: inst for inst in self.instances}
        return Dataset([by_id[i] for i in ids])


def validate_instance(inst: ProblemInstance, reg: FormulaRegistry | None = None) -> str | None:
    """``None`` when the gold prefix executes to the answer, else a reason string."""
    if not inst.prefix:
        return "MissingPrefix"
    try:
        value = evaluate(from_prefix(inst.prefix, reg), inst.slots.env(), reg)
    except ExecutionError:
        return "ExecutionError"
    except OpTreeError:
        return "ParseError"
    return None if answers_match(value, inst.answer) else "AnswerMismatch"


def _normalize_class(raw, equation_tree, reg) -> str | None:
    if raw is None:
        uses_formula = any(t in reg for t in to_prefix(equation_tree))
        return "formula-annotated" if uses_formula else "no-formula-needed"
    raw = str(raw).strip().lower()
    raw = _CLASS_ALIASES.get(raw, raw)
    return raw if raw in CLASSES else None


def build_instance(rec: dict, reg: FormulaRegistry, vocab: TargetVocab) -> tuple[ProblemInstance | None, str | None]:
    """Turn one raw record into an instance, or return the rejection reason."""
    ident = str(rec["id"])
    try:
        answer = float(rec["answer"])
    except (TypeError, ValueError):
        return None, "BadAnswer"
    try:
        masked, slots = extract_numbers(tokenize(str(rec["text"])), vocab.max_slots)
    except LexError:
        return None, "TooManyNumbers"
    try:
        tree = parse_infix(str(rec["equation"]), reg)
    except OpTreeError:
        return None, "ParseError"
    cls = _normalize_class(rec.get("class"), tree, reg)
    if cls is None:
        return None, "BadClass"
    try:
        prefix = vocab.decode(encode_target(to_prefix(tree), slots, vocab))
    except (LexError, KeyError):
        return None, "UnmappableNumber"
    inst = ProblemInstance(ident, str(rec["text"]), str(rec["equation"]), answer, cls,
                           masked, slots, prefix)
    reason = validate_instance(inst, reg)
    return (inst, None) if reason is None else (None, reason)


def problem_from_text(text: str, max_slots: int = MAX_SLOTS) -> ProblemInstance:
    """Unlabelled instance for inference; raises ``LexError`` on too many numbers."""
    masked, slots = extract_numbers(tokenize(text), max_slots)
    return ProblemInstance("query", text, "", float("nan"), "unlabelled", masked, slots, None)


def load_records(records: Iterable[dict], reg: FormulaRegistry | None = None,
                 max_slots: int = MAX_SLOTS) -> Dataset:
    reg = default_registry() if reg is None else reg
    vocab = TargetVocab(reg, max_slots)
    out, rejects, seen = [], [], set()
    for rec in records:
        ident = str(rec["id"])
        if ident in seen:
            rejects.append({"id": ident, "reason": "DuplicateId"})
            continue
        seen.add(ident)
        inst, reason = build_instance(rec, reg, vocab)
        if inst is None:
            rejects.append({"id": ident, "reason": reason})
        else:
            out.append(inst)
    if rejects:
        log.info("%d of %d records rejected", len(rejects), len(out) + len(rejects))
    return Dataset(out, rejects)


def read_jsonl(path) -> list[dict]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedLine(lineno, exc.msg) from None
            if not isinstance(rec, dict):
                raise MalformedLine(lineno, "not a JSON object")
            missing = [k for k in REQUIRED_KEYS if k not in rec]
            if missing:
                raise MalformedLine(lineno, f"missing {', '.join(missing)}")
            records.append(rec)
    return records


def load_jsonl(path, reg: FormulaRegistry | None = None, max_slots: int = MAX_SLOTS) -> Dataset:
    return load_records(read_jsonl(path), reg, max_slots)


def dump_jsonl(instances: Iterable[ProblemInstance], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for inst in instances:
            fh.write(json.dumps(inst.record(), ensure_ascii=False) + "\n")


def write_rejects(rejects: Sequence[dict], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in rejects:
            fh.write(json.dumps({"id": r["id"], "reason": r["reason"]}) + "\n")


# ---------------------------------------------------------------- splits

@dataclass(frozen=True)
class FoldSplit:
    folds: tuple[tuple[str, ...], ...]
    seed: int

    def train_test(self, i: int) -> tuple[list[str], list[str]]:
        test = list(self.folds[i])
        train = [x for j, f in enumerate(self.folds) if j != i for x in f]
        return train, test


def kfold(ids: Sequence[str] | Dataset, k: int = 5, seed: int = 0) -> FoldSplit:
    """Seeded shuffle, then contiguous folds whose sizes differ by at most one."""
    if isinstance(ids, Dataset):
        ids = [inst.id for inst in ids]
    ids = list(ids)
    if not 1 <= k <= len(ids):
        raise ValueError(f"need 1 <= k <= {len(ids)}")
    order = make_rng(seed).permutation(len(ids))
    return FoldSplit(tuple(tuple(ids[i] for i in part) for part in np.array_split(order, k)), seed)


def holdout_split(data: Dataset, test_fraction: float = 0.2, seed: int = 0) -> tuple[Dataset, Dataset]:
    order = make_rng(seed).permutation(len(data))
    n_test = int(round(test_fraction * len(data)))
    test = [data.instances[i] for i in sorted(order[:n_test])]
    train = [data.instances[i] for i in sorted(order[n_test:])]
    return Dataset(train), Dataset(test)


# ---------------------------------------------------------------- synthetic problems
#
# Each template: (equation over a, b, c, d with formula calls, text variants, constraint).
# Equations are written with the literal numbers, as in annotated corpora.

_OBJECTS = {
    "square": ["tile", "garden", "table top", "field", "photo frame"],
    "circle": ["pond", "flower bed", "clock face", "table", "fountain"],
    "rectangle": ["garden", "playground", "classroom floor", "sheet of paper", "lawn"],
    "cuboid": ["box", "water tank", "brick", "room", "container"],
    "triangle": ["sail", "flag", "plot of land", "signboard", "roof panel"],
    "cube": ["box", "block", "container", "dice", "crate"],
}
_UNITS = ["m", "cm", "dm"]

_FORMULA_TEMPLATES = [
    ("square_area({a})", "square", [
        "A square {obj} has a side length of {a} {u} . What is its area ?",
        "Each side of a square {obj} is {a} {u} long . Find the area of the {obj} .",
        "The side of a square {obj} measures {a} {u} . How large is its area ?"]),
    ("square_perimeter({a})", "square", [
        "A square {obj} has a side length of {a} {u} . What is its perimeter ?",
        "Each side of a square {obj} is {a} {u} long . How long is the fence around it ?",
        "The side of a square {obj} measures {a} {u} . Find its perimeter ."]),
    ("cubic_volume({a})", "cube", [
        "A cube shaped {obj} has an edge of {a} {u} . What is its volume ?",
        "The edge length of a cubic {obj} is {a} {u} . Find the volume of the {obj} .",
        "How much space does a cube {obj} with edges of {a} {u} take up ?"]),
    ("circle_area({a})", "circle", [
        "The radius of a circular {obj} is {a} {u} . What is its area ?",
        "A round {obj} has a radius of {a} {u} . Find the area it covers .",
        "A circle with radius {a} {u} is drawn on the ground . How large is its area ?"]),
    ("circumference_r({a})", "circle", [
        "The radius of a circular {obj} is {a} {u} . What is its circumference ?",
        "A round {obj} has a radius of {a} {u} . How long is the edge around it ?",
        "A circle has a radius of {a} {u} . Find the length of the circle ."]),
    ("circumference_d({a})", "circle", [
        "The diameter of a circular {obj} is {a} {u} . What is its circumference ?",
        "A round {obj} is {a} {u} across its diameter . How long is the edge around it ?",
        "A circle has a diameter of {a} {u} . Find its circumference ."]),
    ("triangle_area({a}, {b})", "triangle", [
        "A triangular {obj} has a base of {a} {u} and a height of {b} {u} . What is its area ?",
        "The base of a triangle {obj} is {a} {u} and its height is {b} {u} . Find its area .",
        "A triangle has base {a} {u} and height {b} {u} . How large is the triangle ?"]),
    ("rectangle_area({a}, {b})", "rectangle", [
        "A rectangular {obj} is {a} {u} long and {b} {u} wide . What is its area ?",
        "The length of a rectangular {obj} is {a} {u} and the width is {b} {u} . Find its area .",
        "A rectangle has length {a} {u} and width {b} {u} . How large is its area ?"]),
    ("rectangle_perimeter({a}, {b})", "rectangle", [
        "A rectangular {obj} is {a} {u} long and {b} {u} wide . What is its perimeter ?",
        "The length of a rectangular {obj} is {a} {u} and the width is {b} {u} . How long is the fence around it ?",
        "A rectangle has length {a} {u} and width {b} {u} . Find its perimeter ."]),
    ("cuboid_volume({a}, {b}, {c})", "cuboid", [
        "A cuboid {obj} is {a} {u} long , {b} {u} wide and {c} {u} high . What is its volume ?",
        "The length , width and height of a rectangular {obj} are {a} {u} , {b} {u} and {c} {u} . Find its volume .",
        "How much can a cuboid {obj} hold if it is {a} {u} long , {b} {u} wide and {c} {u} high ?"]),
    ("cuboid_surface({a}, {b}, {c})", "cuboid", [
        "A cuboid {obj} is {a} {u} long , {b} {u} wide and {c} {u} high . What is its surface area ?",
        "The length , width and height of a rectangular {obj} are {a} {u} , {b} {u} and {c} {u} . Find the area of all its faces .",
        "How much paper covers a cuboid {obj} that is {a} {u} long , {b} {u} wide and {c} {u} high ?"]),
    ("circle_area({a}) - circle_area({b})", "circle", [
        "The outer radius and the inner radius of a circular annulus are {a} {u} and {b} {u} . Find the area of the annulus .",
        "A round path has outer radius {a} {u} and inner radius {b} {u} . What is the area of the path ?"]),
    ("rectangle_area({a}, {b}) - square_area({c})", "rectangle", [
        "A rectangular {obj} is {a} {u} long and {b} {u} wide . A square pool with side {c} {u} is dug in it . What area is left ?",
        "From a rectangle {a} {u} by {b} {u} a square of side {c} {u} is cut out . Find the remaining area ."]),
    ("cuboid_volume({a}, {b}, {c}) + cubic_volume({d})", "cuboid", [
        "A cuboid box is {a} {u} long , {b} {u} wide and {c} {u} high , and a cube box has edge {d} {u} . What is their total volume ?"]),
    ("triangle_area({a}, {b}) * 2", "triangle", [
        "Two identical triangular {obj}s each have a base of {a} {u} and a height of {b} {u} . What is their total area ?"]),
    ("circumference_r({a}) * {b}", "circle", [
        "A runner goes around a circular track with radius {a} {u} for {b} laps . How far does the runner go ?"]),
]

_PLAIN_TEMPLATES = [
    ("{a} / {b}", "rectangle", [
        "The perimeter of a rectangular swimming pool is {a} {u} . If you place a chair every {b} {u} all the way around its perimeter , how many chairs do you need ?",
        "A rectangular {obj} is {a} {u} long and is cut into pieces of {b} {u} each . How many pieces are there ?"]),
    ("{a} * {b}", "square", [
        "A square {obj} is fenced by {a} workers , each building {b} {u} of fence . How long is the fence ?",
        "Each triangular {obj} costs {a} dollars . How much do {b} of them cost ?"]),
    ("{a} + {b}", "circle", [
        "A circular {obj} has {a} fish and {b} more fish are put in . How many fish are there now ?",
        "The perimeter of a square is {a} {u} , which is {b} {u} shorter than the perimeter of a rectangle . What is the perimeter of the rectangle ?"]),
    ("{a} - {b}", "cube", [
        "A cube shaped {obj} weighs {a} kg . After {b} kg of sand is removed , how heavy is it ?",
        "A rectangular {obj} has {a} flowers and {b} of them are picked . How many flowers remain ?"]),
    ("({a} - {b}) * {c}", "rectangle", [
        "A rectangular classroom had {a} desks , {b} desks were removed , and each remaining desk holds {c} books . How many books are there ?"]),
    ("{a} * {b} / {c}", "circle", [
        "A circular {obj} needs {a} bags of soil per row for {b} rows , shared equally by {c} gardeners . How many bags does each gardener carry ?"]),
]


def _fill(rng: np.random.Generator, equation: str, variants: list[str], shape: str,
          constants: Sequence[float]) -> tuple[str, str]:
    needed = [v for v in "abcd" if "{" + v + "}" in equation]
    pool = [x for x in range(1, 51) if x not in constants]
    while True:
        vals = [int(x) for x in rng.choice(pool, size=len(needed), replace=False)]
        env = dict(zip(needed, vals))
        if equation.startswith("{a} / {b}"):
            env["a"] = env["b"] * int(rng.integers(2, 11))
            if env["a"] == env["b"] or env["a"] in constants:
                continue
        if evaluate(parse_infix(equation.format(**env))) > 0:
            break
    text = variants[int(rng.integers(len(variants)))]
    obj = _OBJECTS[shape][int(rng.integers(len(_OBJECTS[shape])))]
    unit = _UNITS[int(rng.integers(len(_UNITS)))]
    fmt = {k: str(v) for k, v in env.items()}
    return text.format(obj=obj, u=unit, **fmt), equation.format(**fmt)


def synth_records(n: int, seed: int = 0, formula_share: float = 0.6) -> list[dict]:
    """Templated problems: formula problems with probability ``formula_share``, distractors otherwise."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = make_rng(seed)
    records = []
    for i in range(n):
        is_formula = rng.random() < formula_share
        table = _FORMULA_TEMPLATES if is_formula else _PLAIN_TEMPLATES
        equation, shape, variants = table[int(rng.integers(len(table)))]
        constants = (1, 2) if "* 2" in equation else ()
        text, eq = _fill(rng, equation, variants, shape, constants)
        answer = evaluate(parse_infix(eq))
        records.append({"id": f"syn-{seed}-{i:05d}", "text": text, "equation": eq,
                        "answer": round(answer, 6),
                        "class": "formula-annotated" if is_formula else "no-formula-needed"})
    return records


def synth_generate(n: int, seed: int = 0, reg: FormulaRegistry | None = None) -> Dataset:
    return load_records(synth_records(n, seed), reg)


# ---------------------------------------------------------------- metrics

@dataclass
class Metrics:
    n: int
    answer_correct: int
    exact_correct: int
    failures: int
    per_class: dict[str, dict] = field(default_factory=dict)

    @property
    def answer_acc(self) -> float:
        return self.answer_correct / self.n if self.n else 0.0

    @property
    def exact_match(self) -> float:
        return self.exact_correct / self.n if self.n else 0.0

    def as_dict(self) -> dict:
        return {"n": self.n, "answer_acc": self.answer_acc, "exact_match": self.exact_match,
                "failures": self.failures, "per_class": self.per_class}


def score_predictions(instances: Sequence[ProblemInstance], predictions: Sequence[list[str] | None],
                      reg: FormulaRegistry | None = None) -> Metrics:
    """Compare predicted prefix token lists (``None`` = decode failure) against gold."""
    reg = default_registry() if reg is None else reg
    per: dict[str, list[int]] = {}
    ans = exact = fail = 0
    for inst, pred in zip(instances, predictions, strict=True):
        ok_a = ok_e = False
        if pred is None:
            fail += 1
        else:
            ok_e = list(pred) == list(inst.prefix or [])
            try:
                ok_a = answers_match(evaluate(from_prefix(pred, reg), inst.slots.env(), reg), inst.answer)
            except OpTreeError:
                ok_a = False
        ans += ok_a
        exact += ok_e
        c = per.setdefault(inst.cls, [0, 0, 0])
        c[0] += 1
        c[1] += ok_a
        c[2] += ok_e
    per_class = {k: {"n": v[0], "answer_acc": v[1] / v[0], "exact_match": v[2] / v[0]}
                 for k, v in sorted(per.items())}
    return Metrics(len(instances), ans, exact, fail, per_class)


def evaluate_model(model, data: Sequence[ProblemInstance], beam: int = 5, max_nodes: int = 50) -> Metrics:
    from .model import DecodeError

    preds = []
    for inst in data:
        try:
            tokens, _ = model.decode(model.example(inst), beam=beam, max_nodes=max_nodes)
            preds.append(model.tgt.decode(tokens))
        except DecodeError:
            preds.append(None)
    return score_predictions(data, preds, model.reg)


def majority_template(train: Sequence[ProblemInstance]) -> list[str]:
    counts = Counter(tuple(inst.prefix) for inst in train)
    return list(max(counts.items(), key=lambda kv: (kv[1], kv[0]))[0])


def majority_baseline(train: Sequence[ProblemInstance], test: Sequence[ProblemInstance],
                      reg: FormulaRegistry | None = None) -> Metrics:
    """Answer every test problem with the most frequent training prefix."""
    template = majority_template(train)
    return score_predictions(test, [template] * len(test), reg)
