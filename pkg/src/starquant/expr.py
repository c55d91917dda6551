"""Parser and evaluator for the generating-function DSL.

Grammar (whitespace-insensitive, ASCII only)::

    expr   := term (('+'|'-') term)*
    term   := factor (('*'|'/') factor)*
    factor := '-' factor | atom ('^' number)*
    atom   := number | ident | fname '(' expr ')' | '(' expr ')'

Precedence: ^  >  unary minus  >  * /  >  + -.  Exponents are numeric
literals only; a chain like x1^2^3 associates to the right and collapses
into a single literal exponent at parse time.

Variables are x1..xn for the base plus p1..pn (cotangent bundle) or
y1..yn (tangent bundle) for the fiber.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from .errors import JetDomainError, ParseError, UnknownVariable
from .jets import Jet, apply_unary, jet_const

FUNCTION_NAMES = ("sin", "cos", "exp", "log", "sqrt")

BUNDLE_FIBER_LETTER = {"cotangent": "p", "tangent": "y"}


@dataclass(frozen=True)
class Const:
    value: float


@dataclass(frozen=True)
class Var:
    name: str
    slot: int  # position in the flattened (base..., fiber...) variable list


@dataclass(frozen=True)
class Neg:
    arg: object


@dataclass(frozen=True)
class Add:
    left: object
    right: object


@dataclass(frozen=True)
class Sub:
    left: object
    right: object


@dataclass(frozen=True)
class Mul:
    left: object
    right: object


@dataclass(frozen=True)
class Div:
    left: object
    right: object


@dataclass(frozen=True)
class Pow:
    base: object
    exponent: float


@dataclass(frozen=True)
class Call:
    fname: str
    arg: object


_NUMBER = re.compile(r"(?:\d+(?:\.\d*)?|\.\d+)(?:[eE][+-]?\d+)?")
_IDENT = re.compile(r"[A-Za-z][A-Za-z0-9]*")
_VARNAME = re.compile(r"([xpy])([1-9]\d*)\Z")


class _Parser:
    def __init__(self, src, n, bundle):
        if bundle not in BUNDLE_FIBER_LETTER:
            raise ValueError(f"unknown bundle tag {bundle!r}")
        self.src = src
        self.n = n
        self.fiber_letter = BUNDLE_FIBER_LETTER[bundle]
        self.pos = 0

    def error(self, expected):
        if self.pos >= len(self.src):
            found = "end of input"
            offset = len(self.src)
        else:
            found = f"{self.src[self.pos]!r}"
            offset = self.pos
        raise ParseError(offset, expected, found)

    def skip_ws(self):
        while self.pos < len(self.src) and self.src[self.pos] in " \t\r\n":
            self.pos += 1

    def peek(self):
        self.skip_ws()
        return self.src[self.pos] if self.pos < len(self.src) else ""

    def accept(self, ch):
        if self.peek() == ch:
            self.pos += 1
            return True
        return False

    def expect(self, ch):
        if not self.accept(ch):
            self.error(f"{ch!r}")

    def number(self):
        self.skip_ws()
        m = _NUMBER.match(self.src, self.pos)
        if not m:
            self.error("number")
        self.pos = m.end()
        return float(m.group())

    def parse(self):
        self.skip_ws()
        if self.pos >= len(self.src):
            self.error("expression")
        node = self.expr()
        self.skip_ws()
        if self.pos < len(self.src):
            self.error("operator or end of input")
        return node

    def expr(self):
        node = self.term()
        while True:
            if self.accept("+"):
                node = Add(node, self.term())
            elif self.accept("-"):
                node = Sub(node, self.term())
            else:
                return node

    def term(self):
        node = self.factor()
        while True:
            if self.accept("*"):
                node = Mul(node, self.factor())
            elif self.accept("/"):
                node = Div(node, self.factor())
            else:
                return node

    def factor(self):
        if self.accept("-"):
            return Neg(self.factor())
        node = self.atom()
        exponents = []
        while self.accept("^"):
            exponents.append(self.number())
        if exponents:
            # literal chain folds right to left: x^2^3 = x^(2^3)
            acc = exponents[-1]
            for e in reversed(exponents[:-1]):
                acc = e**acc
            node = Pow(node, acc)
        return node

    def atom(self):
        ch = self.peek()
        if ch == "(":
            self.pos += 1
            node = self.expr()
            self.expect(")")
            return node
        if ch.isdigit() or ch == ".":
            return Const(self.number())
        if ch.isalpha():
            start = self.pos
            m = _IDENT.match(self.src, self.pos)
            name = m.group()
            self.pos = m.end()
            if name in FUNCTION_NAMES:
                self.expect("(")
                arg = self.expr()
                self.expect(")")
                return Call(name, arg)
            return self.variable(name, start)
        self.error("number, variable, function, or '('")

    def variable(self, name, offset):
        m = _VARNAME.match(name)
        if not m:
            raise UnknownVariable(name, offset)
        letter, idx = m.group(1), int(m.group(2))
        if idx > self.n:
            raise UnknownVariable(name, offset)
        if letter == "x":
            return Var(name, idx - 1)
        if letter == self.fiber_letter:
            return Var(name, self.n + idx - 1)
        raise UnknownVariable(name, offset)


def parse(src, n, bundle="cotangent"):
    """Parse DSL text into an AST with variables resolved for (n, bundle)."""
    return _Parser(src, n, bundle).parse()


def _format_number(v):
    if v == int(v) and abs(v) < 1e15:
        return str(int(v))
    return repr(v)


_PREC_ADD, _PREC_MUL, _PREC_NEG, _PREC_POW, _PREC_ATOM = 1, 2, 3, 4, 5


def _pp(node):
    # returns (text, precedence of the outermost operator)
    if isinstance(node, Const):
        return _format_number(node.value), _PREC_ATOM
    if isinstance(node, Var):
        return node.name, _PREC_ATOM
    if isinstance(node, Neg):
        text, prec = _pp(node.arg)
        if prec < _PREC_NEG:
            text = f"({text})"
        return f"-{text}", _PREC_NEG
    if isinstance(node, (Add, Sub)):
        op = "+" if isinstance(node, Add) else "-"
        lt, lp = _pp(node.left)
        rt, rp = _pp(node.right)
        if lp < _PREC_ADD:
            lt = f"({lt})"
        # right operand needs parens at equal precedence: a - (b + c)
        if rp <= _PREC_ADD:
            rt = f"({rt})"
        return f"{lt} {op} {rt}", _PREC_ADD
    if isinstance(node, (Mul, Div)):
        op = "*" if isinstance(node, Mul) else "/"
        lt, lp = _pp(node.left)
        rt, rp = _pp(node.right)
        if lp < _PREC_MUL:
            lt = f"({lt})"
        if rp <= _PREC_MUL:
            rt = f"({rt})"
        return f"{lt}{op}{rt}", _PREC_MUL
    if isinstance(node, Pow):
        bt, bp = _pp(node.base)
        if bp < _PREC_ATOM:
            bt = f"({bt})"
        return f"{bt}^{_format_number(node.exponent)}", _PREC_POW
    if isinstance(node, Call):
        at, _ = _pp(node.arg)
        return f"{node.fname}({at})", _PREC_ATOM
    raise TypeError(f"not an AST node: {node!r}")


def pretty(node):
    """Render an AST back to DSL text with minimal parentheses."""
    return _pp(node)[0]


def _scalar_call(fname, v):
    if fname in ("log", "sqrt"):
        if v <= 0 and fname == "log":
            raise JetDomainError(f"log needs a positive value, got {v}")
        if v < 0 and fname == "sqrt":
            raise JetDomainError(f"sqrt needs a non-negative value, got {v}")
    return {
        "sin": np.sin,
        "cos": np.cos,
        "exp": np.exp,
        "log": np.log,
        "sqrt": np.sqrt,
    }[fname](v)


def evaluate(node, values):
    """Evaluate an AST over a flat (base..., fiber...) variable list.

    Values may be jets (derivative propagation) or plain numbers.
    """
    jet_mode = any(isinstance(v, Jet) for v in values)
    space = next((v.space for v in values if isinstance(v, Jet)), None)

    def walk(nd):
        if isinstance(nd, Const):
            return jet_const(space, nd.value) if jet_mode else nd.value
        if isinstance(nd, Var):
            return values[nd.slot]
        if isinstance(nd, Neg):
            return -walk(nd.arg)
        if isinstance(nd, Add):
            return walk(nd.left) + walk(nd.right)
        if isinstance(nd, Sub):
            return walk(nd.left) - walk(nd.right)
        if isinstance(nd, Mul):
            return walk(nd.left) * walk(nd.right)
        if isinstance(nd, Div):
            den = walk(nd.right)
            if not jet_mode and den == 0:
                raise JetDomainError("division by zero")
            return walk(nd.left) / den
        if isinstance(nd, Pow):
            e = nd.exponent
            if float(e).is_integer():
                e = int(e)
            base = walk(nd.base)
            if not jet_mode and base == 0 and e < 0:
                raise JetDomainError("zero raised to a negative power")
            if not jet_mode and not isinstance(e, int) and base < 0:
                raise JetDomainError(f"fractional power of negative value {base}")
            return base**e
        if isinstance(nd, Call):
            arg = walk(nd.arg)
            if jet_mode:
                return apply_unary(arg, nd.fname)
            return _scalar_call(nd.fname, arg)
        raise TypeError(f"not an AST node: {nd!r}")

    return walk(node)


def eval_jet(node, point, order):
    """K-jet of the expression at a bundle point."""
    _, base, fiber = point.jets(order)
    return evaluate(node, list(base) + list(fiber))


def jet_function(node):
    """Wrap an AST as f(base_jets, fiber_jets) -> Jet for the geometry layer."""

    def f(base, fiber):
        return evaluate(node, list(base) + list(fiber))

    return f
