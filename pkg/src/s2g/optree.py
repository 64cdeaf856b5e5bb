"""Operation trees: nodes that are operators, constants, number slots or formula calls.

Trees are stored as an immutable arena of nodes in pre-order.  A formula's body is
itself an ``OpTree`` whose ``NumberSlot(i)`` leaves stand for the formula's i-th
argument, so expanding a formula is plain substitution and one evaluator serves both.
"""
from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from typing import Iterable, Iterator, Mapping, Sequence, Union

OPERATORS = ("+", "-", "*", "/", "^")
PRECEDENCE = {"+": 1, "-": 1, "*": 2, "/": 2, "^": 3}
RIGHT_ASSOC = {"^"}
PI = 3.14

SLOT_RE = re.compile(r"^<N(\d+)>$")
NUMBER_RE = re.compile(r"^(\d+\.?\d*|\.\d+)(%?)$")


# ---------------------------------------------------------------- errors

class OpTreeError(Exception):
    pass


class InvalidTree(OpTreeError):
    pass


class ParseError(OpTreeError):
    pass


class ExprSyntaxError(ParseError):
    def __init__(self, message: str, position: int):
        super().__init__(f"{message} at position {position}")
        self.position = position


class UnknownFormula(ParseError):
    def __init__(self, name: str):
        super().__init__(f"unknown formula {name!r}")
        self.name = name


class WrongArgCount(ParseError):
    def __init__(self, name: str, expected: int, got: int):
        super().__init__(f"{name} takes {expected} argument(s), got {got}")
        self.name, self.expected, self.got = name, expected, got


class IncompleteTree(ParseError):
    pass


class TrailingTokens(ParseError):
    pass


class UnknownToken(ParseError):
    def __init__(self, token: str):
        super().__init__(f"unknown token {token!r}")
        self.token = token


class ExecutionError(OpTreeError):
    pass


class DivisionByZero(ExecutionError):
    pass


class MissingSlot(ExecutionError):
    def __init__(self, index: int):
        super().__init__(f"no value bound for <N{index}>")
        self.index = index


class NonFiniteResult(ExecutionError):
    pass


class RegistryError(OpTreeError):
    pass


class DuplicateName(RegistryError):
    pass


class ArityLabelMismatch(RegistryError):
    pass


# ---------------------------------------------------------------- node kinds

@dataclass(frozen=True)
class Operator:
    symbol: str

    def __post_init__(self):
        if self.symbol not in PRECEDENCE:
            raise ValueError(f"not an operator: {self.symbol!r}")

    arity = property(lambda self: 2)


@dataclass(frozen=True)
class Constant:
    value: float

    arity = property(lambda self: 0)


@dataclass(frozen=True)
class NumberSlot:
    index: int

    def __post_init__(self):
        if self.index < 0:
            raise ValueError("slot index must be non-negative")

    arity = property(lambda self: 0)


@dataclass(frozen=True)
class FormulaCall:
    name: str
    arity: int


NodeKind = Union[Operator, Constant, NumberSlot, FormulaCall]


@dataclass(frozen=True)
class Node:
    kind: NodeKind
    children: tuple[int, ...] = ()


def format_number(value: float) -> str:
    value = float(value)
    if value.is_integer() and abs(value) < 1e15:
        return str(int(value))
    return repr(value)


def slot_token(index: int) -> str:
    return f"<N{index}>"


def kind_token(kind: NodeKind) -> str:
    if isinstance(kind, Operator):
        return kind.symbol
    if isinstance(kind, Constant):
        return format_number(kind.value)
    if isinstance(kind, NumberSlot):
        return slot_token(kind.index)
    return kind.name


def parse_number(text: str) -> float | None:
    """Numeric value of a literal such as ``300``, ``3.14`` or ``50%``; ``None`` otherwise."""
    m = NUMBER_RE.match(text)
    if not m:
        return None
    value = float(m.group(1))
    return value / 100.0 if m.group(2) else value


# ---------------------------------------------------------------- tree

@dataclass(frozen=True, eq=False)
class OpTree:
    nodes: tuple[Node, ...]
    root: int = 0

    def __post_init__(self):
        n = len(self.nodes)
        if n == 0 or not 0 <= self.root < n:
            raise InvalidTree("tree needs a root node")
        parents = [0] * n
        for node in self.nodes:
            if len(node.children) != node.kind.arity:
                raise InvalidTree(
                    f"{kind_token(node.kind)} needs {node.kind.arity} children, has {len(node.children)}")
            for c in node.children:
                if not 0 <= c < n:
                    raise InvalidTree(f"child index {c} out of range")
                parents[c] += 1
        if parents[self.root] != 0:
            raise InvalidTree("root has a parent")
        if any(p != 1 for i, p in enumerate(parents) if i != self.root):
            raise InvalidTree("every non-root node needs exactly one parent")
        # one parent each + root unparented: reachability rules out cycles
        seen, stack = 0, [self.root]
        while stack:
            seen += 1
            stack.extend(self.nodes[stack.pop()].children)
            if seen > n:
                raise InvalidTree("cycle")
        if seen != n:
            raise InvalidTree("unreachable nodes")

    def __len__(self) -> int:
        return len(self.nodes)

    def key(self, i: int | None = None):
        """Hashable structural key of the subtree at ``i`` (root by default)."""
        node = self.nodes[self.root if i is None else i]
        return (node.kind, tuple(self.key(c) for c in node.children))

    def __eq__(self, other):
        if not isinstance(other, OpTree):
            return NotImplemented
        return self.key() == other.key()

    def __hash__(self):
        return hash(self.key())

    def iter_preorder(self) -> Iterator[int]:
        stack = [self.root]
        while stack:
            i = stack.pop()
            yield i
            stack.extend(reversed(self.nodes[i].children))

    def kinds(self) -> list[NodeKind]:
        return [self.nodes[i].kind for i in self.iter_preorder()]

    @classmethod
    def leaf(cls, kind: NodeKind) -> "OpTree":
        return cls((Node(kind),))

    @classmethod
    def from_nested(cls, nested) -> "OpTree":
        """Build from ``(kind, [child, ...])`` nesting; arena is laid out in pre-order."""
        nodes: list = []

        def walk(item) -> int:
            kind, kids = item
            idx = len(nodes)
            nodes.append(None)
            nodes[idx] = Node(kind, tuple(walk(k) for k in kids))
            return idx

        walk(nested)
        return cls(tuple(nodes))

    def to_nested(self, i: int | None = None):
        node = self.nodes[self.root if i is None else i]
        return (node.kind, [self.to_nested(c) for c in node.children])

    def __repr__(self):
        return f"OpTree({' '.join(to_prefix(self))})"


# ---------------------------------------------------------------- registry

@dataclass(frozen=True)
class FormulaDef:
    name: str
    arity: int
    arg_labels: tuple[str, ...]
    body: OpTree

    def __post_init__(self):
        if self.arity < 1:
            raise ArityLabelMismatch(f"{self.name}: arity must be positive")
        if len(self.arg_labels) != self.arity:
            raise ArityLabelMismatch(
                f"{self.name}: {len(self.arg_labels)} labels for arity {self.arity}")
        used = {k.index for k in self.body.kinds() if isinstance(k, NumberSlot)}
        if used != set(range(self.arity)):
            raise ArityLabelMismatch(f"{self.name}: body must use arguments 0..{self.arity - 1}")

    @classmethod
    def from_infix(cls, name: str, arg_labels: Sequence[str], body: str,
                   arity: int | None = None, reg: "FormulaRegistry | None" = None) -> "FormulaDef":
        labels = tuple(arg_labels)
        names = {label: i for i, label in enumerate(labels)}
        tree = parse_infix(body, reg if reg is not None else FormulaRegistry(), names=names)
        return cls(name, len(labels) if arity is None else arity, labels, tree)


class FormulaRegistry:
    """Insertion-ordered, name-unique collection of formulas."""

    def __init__(self, defs: Iterable[FormulaDef] = ()):
        self._defs: dict[str, FormulaDef] = {}
        self._order: list[str] = []
        for d in defs:
            self.register(d)

    def register(self, defn: FormulaDef) -> int:
        if defn.name in self._defs:
            raise DuplicateName(defn.name)
        if defn.name in PRECEDENCE or SLOT_RE.match(defn.name) or parse_number(defn.name) is not None:
            raise RegistryError(f"reserved name {defn.name!r}")
        self._defs[defn.name] = defn
        self._order.append(defn.name)
        return len(self._order) - 1

    def __getitem__(self, name: str) -> FormulaDef:
        return self._defs[name]

    def by_id(self, formula_id: int) -> FormulaDef:
        return self._defs[self._order[formula_id]]

    def id_of(self, name: str) -> int:
        return self._order.index(name)

    def __contains__(self, name) -> bool:
        return name in self._defs

    def __iter__(self) -> Iterator[FormulaDef]:
        return (self._defs[n] for n in self._order)

    def __len__(self) -> int:
        return len(self._order)

    def names(self) -> list[str]:
        return list(self._order)

    def call(self, name: str) -> FormulaCall:
        return FormulaCall(name, self._defs[name].arity)

    @classmethod
    def from_records(cls, records: Iterable[Mapping]) -> "FormulaRegistry":
        reg = cls()
        for rec in records:
            reg.register(FormulaDef.from_infix(rec["name"], rec["args"], rec["body"],
                                               arity=int(rec["arity"]), reg=reg))
        return reg

    @classmethod
    def from_json(cls, path) -> "FormulaRegistry":
        with open(path, encoding="utf-8") as fh:
            return cls.from_records(json.load(fh))

    def to_records(self) -> list[dict]:
        return [{"name": d.name, "arity": d.arity, "args": list(d.arg_labels),
                 "body": to_infix(d.body, arg_names=d.arg_labels)} for d in self]


@lru_cache(maxsize=1)
def default_registry() -> FormulaRegistry:
    """The eleven geometry formulas shipped in ``data/formulas.json``."""
    text = resources.files("s2g").joinpath("data/formulas.json").read_text(encoding="utf-8")
    return FormulaRegistry.from_records(json.loads(text))


# ---------------------------------------------------------------- infix parsing

_TOKEN_RE = re.compile(r"""
    (?P<ws>\s+)
  | (?P<slot><N\d+>)
  | (?P<num>(?:\d+\.?\d*|\.\d+)%?)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<op>\*\*|[-+*/^(),\[\]])
""", re.VERBOSE)


_ALIASES = {"**": "^", "[": "(", "]": ")"}


def _lex_infix(text: str) -> list[tuple[str, str, int]]:
    out, pos = [], 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if not m:
            raise ExprSyntaxError(f"unexpected character {text[pos]!r}", pos)
        if m.lastgroup != "ws":
            tok = _ALIASES.get(m.group(), m.group())
            out.append((m.lastgroup, tok, pos))
        pos = m.end()
    return out


def _strip_lhs(text: str) -> str:
    m = re.match(r"^\s*x\s*=(?!=)", text)
    return text[m.end():] if m else text


def parse_infix(text: str, reg: FormulaRegistry | None = None,
                names: Mapping[str, int] | None = None) -> OpTree:
    """Parse an infix equation into an arity-valid tree (shunting-yard).

    ``^`` binds tightest and is right-associative; the other operators are
    left-associative.  A leading ``x =`` is ignored.  ``names`` maps bare
    identifiers to argument slots and is used for formula bodies.
    """
    reg = default_registry() if reg is None else reg
    names = names or {}
    tokens = _lex_infix(_strip_lhs(text))
    if not tokens:
        raise ExprSyntaxError("empty expression", 0)

    output: list = []                 # nested (kind, children) items
    ops: list = []                    # ("op", sym, pos) | ("(", None, pos) | ("call", name, pos)
    argc: list[int] = []              # comma counts for open call parens
    expect_operand = True

    def reduce_top():
        _, sym, pos = ops.pop()
        if len(output) < 2:
            raise ExprSyntaxError("missing operand", pos)
        right, left = output.pop(), output.pop()
        output.append((Operator(sym), [left, right]))

    i = 0
    while i < len(tokens):
        kind, tok, pos = tokens[i]
        nxt = tokens[i + 1][1] if i + 1 < len(tokens) else None
        if kind in ("num", "slot") or (kind == "ident" and nxt != "("):
            if not expect_operand:
                raise ExprSyntaxError(f"unexpected operand {tok!r}", pos)
            if kind == "num":
                output.append((Constant(parse_number(tok)), []))
            elif kind == "slot":
                output.append((NumberSlot(int(tok[2:-1])), []))
            elif tok in names:
                output.append((NumberSlot(names[tok]), []))
            elif tok in reg:
                raise WrongArgCount(tok, reg[tok].arity, 0)
            else:
                raise ExprSyntaxError(f"unknown identifier {tok!r}", pos)
            expect_operand = False
        elif kind == "ident":
            if not expect_operand:
                raise ExprSyntaxError(f"unexpected call {tok!r}", pos)
            if tok not in reg:
                raise UnknownFormula(tok)
            ops.append(("call", tok, pos))
            ops.append(("(", tok, tokens[i + 1][2]))
            argc.append(0)
            i += 1
            if i + 1 < len(tokens) and tokens[i + 1][1] == ")":
                raise WrongArgCount(tok, reg[tok].arity, 0)
        elif tok == "(":
            if not expect_operand:
                raise ExprSyntaxError("unexpected '('", pos)
            ops.append(("(", None, pos))
        elif tok in (")", ","):
            if expect_operand:
                raise ExprSyntaxError(f"unexpected {tok!r}", pos)
            while ops and ops[-1][0] == "op":
                reduce_top()
            if not ops:
                raise ExprSyntaxError(f"unmatched {tok!r}", pos)
            func = ops[-1][1]
            if tok == ",":
                if func is None:
                    raise ExprSyntaxError("',' outside a formula call", pos)
                argc[-1] += 1
                expect_operand = True
            else:
                ops.pop()
                if func is not None:
                    ops.pop()
                    got = argc.pop() + 1
                    arity = reg[func].arity
                    if got != arity:
                        raise WrongArgCount(func, arity, got)
                    args = output[-got:]
                    del output[-got:]
                    output.append((FormulaCall(func, arity), args))
        else:
            if expect_operand:
                raise ExprSyntaxError(f"unexpected operator {tok!r}", pos)
            prec = PRECEDENCE[tok]
            while ops and ops[-1][0] == "op":
                top = PRECEDENCE[ops[-1][1]]
                if top > prec or (top == prec and tok not in RIGHT_ASSOC):
                    reduce_top()
                else:
                    break
            ops.append(("op", tok, pos))
            expect_operand = True
        i += 1

    if expect_operand:
        raise ExprSyntaxError("expression ends early", len(text))
    while ops:
        if ops[-1][0] != "op":
            raise ExprSyntaxError("unclosed '('", ops[-1][2])
        reduce_top()
    if len(output) != 1:
        raise ExprSyntaxError("dangling operands", 0)
    return OpTree.from_nested(output[0])


# ---------------------------------------------------------------- prefix form

def to_prefix(tree: OpTree) -> list[str]:
    return [kind_token(tree.nodes[i].kind) for i in tree.iter_preorder()]


def token_kind(token: str, reg: FormulaRegistry | None = None) -> NodeKind:
    reg = default_registry() if reg is None else reg
    if token in PRECEDENCE:
        return Operator(token)
    m = SLOT_RE.match(token)
    if m:
        return NumberSlot(int(m.group(1)))
    if token in reg:
        return reg.call(token)
    value = parse_number(token)
    if value is None:
        raise UnknownToken(token)
    return Constant(value)


def from_prefix(tokens: Sequence[str], reg: FormulaRegistry | None = None) -> OpTree:
    """Rebuild the unique tree whose pre-order is ``tokens``, driven by arities."""
    reg = default_registry() if reg is None else reg
    if not tokens:
        raise IncompleteTree("no tokens")
    nodes: list[list] = []
    open_slots: list[int] = []        # indices of nodes still missing children
    for pos, tok in enumerate(tokens):
        if pos > 0 and not open_slots:
            raise TrailingTokens(f"tree complete after {pos} tokens, {len(tokens) - pos} left")
        kind = token_kind(tok, reg)
        idx = len(nodes)
        nodes.append([kind, []])
        if open_slots:
            parent = nodes[open_slots[-1]]
            parent[1].append(idx)
            if len(parent[1]) == parent[0].arity:
                open_slots.pop()
        if kind.arity:
            open_slots.append(idx)
    if open_slots:
        raise IncompleteTree(f"{len(open_slots)} node(s) still need children")
    return OpTree(tuple(Node(k, tuple(c)) for k, c in nodes))


# ---------------------------------------------------------------- infix rendering

def to_infix(tree: OpTree, arg_names: Sequence[str] | None = None) -> str:
    """Render with the fewest parentheses that still parse back to the same tree."""

    def render(i: int) -> tuple[str, float]:
        node = tree.nodes[i]
        kind = node.kind
        if isinstance(kind, Operator):
            prec = PRECEDENCE[kind.symbol]
            (ls, lp), (rs, rp) = render(node.children[0]), render(node.children[1])
            right_assoc = kind.symbol in RIGHT_ASSOC
            if lp < prec or (lp == prec and right_assoc):
                ls = f"({ls})"
            if rp < prec or (rp == prec and not right_assoc):
                rs = f"({rs})"
            return f"{ls} {kind.symbol} {rs}", prec
        if isinstance(kind, FormulaCall):
            args = ", ".join(render(c)[0] for c in node.children)
            return f"{kind.name}({args})", math.inf
        if isinstance(kind, NumberSlot) and arg_names is not None:
            return arg_names[kind.index], math.inf
        return kind_token(kind), math.inf

    return render(tree.root)[0]


# ---------------------------------------------------------------- evaluation

def _apply(sym: str, a: float, b: float) -> float:
    try:
        if sym == "+":
            r = a + b
        elif sym == "-":
            r = a - b
        elif sym == "*":
            r = a * b
        elif sym == "/":
            if b == 0:
                raise DivisionByZero(f"{format_number(a)} / 0")
            r = a / b
        else:
            r = a ** b
    except ZeroDivisionError:
        raise DivisionByZero(f"{format_number(a)} ^ {format_number(b)}") from None
    except OverflowError:
        raise NonFiniteResult(f"overflow in {sym}") from None
    if isinstance(r, complex) or not math.isfinite(r):
        raise NonFiniteResult(f"{format_number(a)} {sym} {format_number(b)} is not a finite real")
    return r


def evaluate(tree: OpTree, numbers: Mapping[int, float] | Sequence[float] | None = None,
             reg: FormulaRegistry | None = None) -> float:
    """Execute ``tree``; ``numbers`` binds slot index to value."""
    reg = default_registry() if reg is None else reg
    if numbers is None:
        env: Mapping[int, float] = {}
    elif isinstance(numbers, Mapping):
        env = numbers
    else:
        env = dict(enumerate(numbers))

    def ev(i: int) -> float:
        node = tree.nodes[i]
        kind = node.kind
        if isinstance(kind, Constant):
            return float(kind.value)
        if isinstance(kind, NumberSlot):
            if kind.index not in env:
                raise MissingSlot(kind.index)
            return float(env[kind.index])
        args = [ev(c) for c in node.children]
        if isinstance(kind, Operator):
            return _apply(kind.symbol, *args)
        defn = reg[kind.name]
        if defn.arity != kind.arity:
            raise InvalidTree(f"{kind.name} registered with arity {defn.arity}")
        return evaluate(defn.body, dict(enumerate(args)), reg)

    return ev(tree.root)


def expand_formulas(tree: OpTree, reg: FormulaRegistry | None = None) -> OpTree:
    """Replace every formula call by its body over the call's argument subtrees."""
    reg = default_registry() if reg is None else reg

    def substitute(nested, args):
        kind, kids = nested
        if isinstance(kind, NumberSlot):
            return args[kind.index]
        return (kind, [substitute(k, args) for k in kids])

    def expand(nested):
        kind, kids = nested
        kids = [expand(k) for k in kids]
        if isinstance(kind, FormulaCall):
            return expand(substitute(reg[kind.name].body.to_nested(), kids))
        return (kind, kids)

    return OpTree.from_nested(expand(tree.to_nested()))


def render_tree(tree: OpTree, indent: str = "  ") -> str:
    """Indented one-node-per-line view, children below their parent."""
    lines: list[str] = []

    def walk(i: int, depth: int):
        lines.append(indent * depth + kind_token(tree.nodes[i].kind))
        for c in tree.nodes[i].children:
            walk(c, depth + 1)

    walk(tree.root, 0)
    return "\n".join(lines)
