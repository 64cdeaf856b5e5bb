"""Independent reference implementations and random generators shared by the tests.

Nothing here imports the parser or evaluator under test; the recursive-descent
parser and closed-form formulas are written from the definitions directly.
"""
from __future__ import annotations

import math
import random
import re

from s2g.optree import (Constant, NumberSlot, Operator, OpTree, default_registry)

OPS = ("+", "-", "*", "/", "^")
PI = 3.14

FORMULA_ORACLE = {
    "square_area": lambda s: s * s,
    "square_perimeter": lambda s: 4 * s,
    "cubic_volume": lambda s: s ** 3,
    "circle_area": lambda r: PI * r ** 2,
    "circumference_r": lambda r: 2 * PI * r,
    "circumference_d": lambda d: PI * d,
    "triangle_area": lambda b, h: b * h / 2,
    "rectangle_area": lambda l, w: l * w,
    "rectangle_perimeter": lambda l, w: 2 * (l + w),
    "cuboid_volume": lambda l, w, h: l * w * h,
    "cuboid_surface": lambda l, w, h: 2 * (l * w + w * h + l * h),
}


class OracleError(Exception):
    pass


def _apply(op, a, b):
    try:
        r = {"+": lambda: a + b, "-": lambda: a - b, "*": lambda: a * b,
             "/": lambda: a / b, "^": lambda: a ** b}[op]()
    except (ZeroDivisionError, OverflowError) as exc:
        raise OracleError(str(exc)) from None
    if isinstance(r, complex) or not math.isfinite(r):
        raise OracleError("non-finite")
    return r


# ---------------------------------------------------------------- random trees

def random_tree(rng: random.Random, max_depth: int = 6, reg=None) -> OpTree:
    """Arity-valid tree drawing every node kind; depth counts edges from the root."""
    reg = default_registry() if reg is None else reg
    names = reg.names()

    def leaf():
        r = rng.random()
        if r < 0.4:
            return (NumberSlot(rng.randrange(10)), [])
        if r < 0.6:
            return (Constant(rng.choice([1.0, 2.0, 3.14])), [])
        if r < 0.8:
            return (Constant(float(rng.randrange(1000))), [])
        return (Constant(round(rng.uniform(0, 100), rng.randrange(1, 4))), [])

    def node(depth):
        if depth >= max_depth or rng.random() < 0.3:
            return leaf()
        if rng.random() < 0.6:
            return (Operator(rng.choice(OPS)), [node(depth + 1), node(depth + 1)])
        name = rng.choice(names)
        call = reg.call(name)
        return (call, [node(depth + 1) for _ in range(call.arity)])

    return OpTree.from_nested(node(0))


def tree_depth(tree: OpTree, i=None) -> int:
    kids = tree.nodes[tree.root if i is None else i].children
    return 0 if not kids else 1 + max(tree_depth(tree, c) for c in kids)


# ---------------------------------------------------------------- random infix

def random_infix(rng: random.Random, depth: int = 4, reg=None) -> str:
    """Random well-formed infix text with random spacing and redundant parentheses."""
    reg = default_registry() if reg is None else reg
    names = reg.names()

    def sp():
        return rng.choice(["", " ", "  "])

    def expr(d):
        r = rng.random()
        if d == 0 or r < 0.25:
            kind = rng.random()
            if kind < 0.3:
                return f"<N{rng.randrange(4)}>"
            if kind < 0.5:
                return rng.choice(["1", "2", "3.14", "0.5", "12.25"])
            return str(rng.randrange(0, 20))
        if r < 0.4:
            name = rng.choice(names)
            args = [expr(d - 1) for _ in range(reg[name].arity)]
            return f"{name}({sp()}{(',' + sp()).join(args)}{sp()})"
        if r < 0.5:
            return f"({sp()}{expr(d - 1)}{sp()})"
        op = rng.choice(OPS)
        return f"{expr(d - 1)}{sp()}{op}{sp()}{expr(d - 1)}"

    return expr(depth)


# ---------------------------------------------------------------- recursive-descent oracle

_TOK = re.compile(r"\s*(<N\d+>|\d+\.\d+|\d+|[A-Za-z_]\w*|[-+*/^(),])")


def _lex(text):
    pos, out = 0, []
    text = text.rstrip()
    while pos < len(text):
        m = _TOK.match(text, pos)
        if not m:
            raise OracleError(f"bad char at {pos}")
        out.append(m.group(1))
        pos = m.end()
    return out


class RecursiveDescent:
    """expr := term (('+'|'-') term)* ; term := power (('*'|'/') power)* ;
    power := atom ('^' power)? ; atom := number | slot | name '(' expr {',' expr} ')' | '(' expr ')'

    Produces prefix token lists directly.
    """

    def __init__(self, text, arities):
        self.toks = _lex(text)
        self.i = 0
        self.arities = arities

    def peek(self):
        return self.toks[self.i] if self.i < len(self.toks) else None

    def take(self, expected=None):
        tok = self.peek()
        if tok is None or (expected is not None and tok != expected):
            raise OracleError(f"expected {expected!r}, got {tok!r}")
        self.i += 1
        return tok

    def parse(self):
        out = self.expr()
        if self.peek() is not None:
            raise OracleError("trailing input")
        return out

    def expr(self):
        left = self.term()
        while self.peek() in ("+", "-"):
            op = self.take()
            left = [op] + left + self.term()
        return left

    def term(self):
        left = self.power()
        while self.peek() in ("*", "/"):
            op = self.take()
            left = [op] + left + self.power()
        return left

    def power(self):
        base = self.atom()
        if self.peek() == "^":
            self.take()
            return ["^"] + base + self.power()
        return base

    def atom(self):
        tok = self.take()
        if tok == "(":
            inner = self.expr()
            self.take(")")
            return inner
        if tok in self.arities:
            self.take("(")
            args = [self.expr()]
            while self.peek() == ",":
                self.take()
                args.append(self.expr())
            self.take(")")
            if len(args) != self.arities[tok]:
                raise OracleError("arity")
            return [tok] + [t for a in args for t in a]
        if tok.startswith("<N") or tok[0].isdigit():
            return [tok]
        raise OracleError(f"unexpected {tok!r}")


def oracle_prefix(text: str, reg=None) -> list[str]:
    reg = default_registry() if reg is None else reg
    return RecursiveDescent(text, {d.name: d.arity for d in reg}).parse()


def oracle_eval_prefix(tokens: list[str], env, reg=None) -> float:
    """Evaluate a prefix token list with the closed-form formula table."""
    reg = default_registry() if reg is None else reg
    it = iter(tokens)

    def ev():
        tok = next(it)
        if tok in OPS:
            a = ev()
            b = ev()
            return _apply(tok, a, b)
        if tok in FORMULA_ORACLE:
            args = [ev() for _ in range(reg[tok].arity)]
            try:
                r = FORMULA_ORACLE[tok](*args)
            except OverflowError:
                raise OracleError("overflow") from None
            if not math.isfinite(r):
                raise OracleError("non-finite")
            return r
        if tok.startswith("<N"):
            return float(env[int(tok[2:-1])])
        return float(tok)

    return ev()


def normalize_number_token(tok: str) -> str:
    """Numeric literal in the canonical form the library prints (``12.0`` -> ``12``)."""
    try:
        v = float(tok)
    except ValueError:
        return tok
    return str(int(v)) if v.is_integer() else repr(v)
