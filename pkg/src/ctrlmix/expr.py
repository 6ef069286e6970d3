"""Arithmetic expressions over coordinates, with forward-mode dual numbers.

Grammar (EBNF)::

    expr   = term { ("+" | "-") term } ;
    term   = unary { ("*" | "/") unary } ;
    unary  = ("+" | "-") unary | power ;
    power  = atom [ "^" unary ] ;                 (* right associative *)
    atom   = number | "pi" | variable | func "(" expr ")" | "(" expr ")" ;
    func   = "sin" | "cos" | "exp" | "log" | "sqrt" ;
    variable = "x1" | "x2" | ... ;                 (* up to the field dimension *)
    number = digits [ "." digits ] [ ("e" | "E") [ "+" | "-" ] digits ] ;

Compiled expressions evaluate on floats, numpy arrays or :class:`Dual` numbers,
so the same closure serves plain evaluation and automatic differentiation.
"""

from __future__ import annotations

import itertools
import math
import re

import numpy as np

_tag_counter = itertools.count(1)


def new_tag() -> int:
    return next(_tag_counter)


class Dual:
    """Dual number ``re + eps * e`` carrying a perturbation tag.

    Components may themselves be duals with older (smaller) tags, which gives
    nested differentiation without perturbation confusion: in a mixed
    operation the dual with the newest tag is the outer layer.
    """

    __slots__ = ("re", "eps", "tag")
    __array_ufunc__ = None  # make numpy defer to the reflected operators

    def __init__(self, re, eps, tag: int):
        self.re = re
        self.eps = eps
        self.tag = tag

    def __repr__(self):
        return f"Dual({self.re!r}, {self.eps!r}, tag={self.tag})"

    def __neg__(self):
        return Dual(-self.re, -self.eps, self.tag)

    def __pos__(self):
        return self

    def __add__(self, other):
        t = _top(self, other)
        a, b = split(self, t)
        c, e = split(other, t)
        return Dual(a + c, b + e, t)

    __radd__ = __add__

    def __sub__(self, other):
        t = _top(self, other)
        a, b = split(self, t)
        c, e = split(other, t)
        return Dual(a - c, b - e, t)

    def __rsub__(self, other):
        return (-self).__add__(other)

    def __mul__(self, other):
        t = _top(self, other)
        a, b = split(self, t)
        c, e = split(other, t)
        return Dual(a * c, a * e + b * c, t)

    __rmul__ = __mul__

    def __truediv__(self, other):
        t = _top(self, other)
        a, b = split(self, t)
        c, e = split(other, t)
        q = a / c
        return Dual(q, (b - q * e) / c, t)

    def __rtruediv__(self, other):
        t = self.tag
        a, b = self.re, self.eps
        q = other / a
        return Dual(q, -q * b / a, t)

    def __pow__(self, other):
        return power(self, other)

    def __rpow__(self, other):
        return power(other, self)


def _top(x, y) -> int:
    tx = x.tag if isinstance(x, Dual) else 0
    ty = y.tag if isinstance(y, Dual) else 0
    return tx if tx > ty else ty


def split(x, tag: int):
    """(value, perturbation) of ``x`` with respect to ``tag``."""
    if isinstance(x, Dual) and x.tag == tag:
        return x.re, x.eps
    return x, 0.0


def tangent(x, tag: int):
    return x.eps if isinstance(x, Dual) and x.tag == tag else 0.0


def sin(x):
    if isinstance(x, Dual):
        return Dual(sin(x.re), cos(x.re) * x.eps, x.tag)
    if isinstance(x, np.ndarray):
        return np.sin(x)
    return math.sin(x)


def cos(x):
    if isinstance(x, Dual):
        return Dual(cos(x.re), -sin(x.re) * x.eps, x.tag)
    if isinstance(x, np.ndarray):
        return np.cos(x)
    return math.cos(x)


def exp(x):
    if isinstance(x, Dual):
        v = exp(x.re)
        return Dual(v, v * x.eps, x.tag)
    if isinstance(x, np.ndarray):
        return np.exp(x)
    return math.exp(x)


def log(x):
    if isinstance(x, Dual):
        return Dual(log(x.re), x.eps / x.re, x.tag)
    if isinstance(x, np.ndarray):
        return np.log(x)
    return math.log(x)


def sqrt(x):
    if isinstance(x, Dual):
        v = sqrt(x.re)
        return Dual(v, x.eps / (2.0 * v), x.tag)
    if isinstance(x, np.ndarray):
        return np.sqrt(x)
    return math.sqrt(x)


def power(x, y):
    if isinstance(y, Dual):
        return exp(y * log(x))
    if isinstance(x, Dual):
        if y == 0:
            return 1.0
        return Dual(power(x.re, y), y * power(x.re, y - 1) * x.eps, x.tag)
    if isinstance(x, np.ndarray) or isinstance(y, np.ndarray):
        return np.power(x, y)
    if float(y).is_integer() and abs(y) < 64:
        return float(x) ** int(y)
    return math.pow(x, y)


FUNCTIONS = {"sin": sin, "cos": cos, "exp": exp, "log": log, "sqrt": sqrt}
CONSTANTS = {"pi": math.pi}


class ExprError(ValueError):
    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        super().__init__(message if offset is None else f"{message} at offset {offset}")


class ExprSyntaxError(ExprError):
    pass


class UnknownIdentifierError(ExprError):
    pass


_TOKEN = re.compile(r"(\d+\.?\d*(?:[eE][+-]?\d+)?|\.\d+(?:[eE][+-]?\d+)?)|([A-Za-z_]\w*)|(.)")


def tokenize(text: str):
    out = []
    pos = 0
    while True:
        while pos < len(text) and text[pos].isspace():
            pos += 1
        if pos >= len(text):
            break
        m = _TOKEN.match(text, pos)
        num, ident, op = m.groups()
        start = pos
        if num is not None:
            out.append(("num", num, start))
        elif ident is not None:
            out.append(("id", ident, start))
        elif op is not None:
            if op not in "+-*/^()":
                raise ExprSyntaxError(f"unexpected character {op!r}", start)
            out.append(("op", op, start))
        pos = m.end()
    out.append(("end", "", len(text)))
    return out


class Expression:
    """A compiled expression: ``expr(xs)`` evaluates with ``xs[i]`` bound to ``x{i+1}``."""

    def __init__(self, text: str, fn, constant: bool):
        self.text = text
        self._fn = fn
        self.constant = constant

    def __call__(self, xs):
        return self._fn(xs)

    def __repr__(self):
        return f"Expression({self.text!r})"


class _Parser:
    def __init__(self, text, nvars):
        self.text = text
        self.nvars = nvars
        self.toks = tokenize(text)
        self.i = 0

    def peek(self):
        return self.toks[self.i]

    def take(self):
        tok = self.toks[self.i]
        self.i += 1
        return tok

    def expect(self, op):
        kind, val, pos = self.take()
        if kind != "op" or val != op:
            what = "end of input" if kind == "end" else repr(val)
            raise ExprSyntaxError(f"expected {op!r}, found {what}", pos)

    # each rule returns (closure, is_constant)
    def parse(self):
        node = self.expr()
        kind, val, pos = self.peek()
        if kind != "end":
            raise ExprSyntaxError(f"unexpected {val!r}", pos)
        return node

    def expr(self):
        f, c = self.term()
        while self.peek()[:2] in (("op", "+"), ("op", "-")):
            op = self.take()[1]
            g, d = self.term()
            f = _binary(op, f, g)
            c = c and d
        return f, c

    def term(self):
        f, c = self.unary()
        while self.peek()[:2] in (("op", "*"), ("op", "/")):
            op = self.take()[1]
            g, d = self.unary()
            f = _binary(op, f, g)
            c = c and d
        return f, c

    def unary(self):
        if self.peek()[:2] == ("op", "-"):
            self.take()
            f, c = self.unary()
            return (lambda xs, f=f: -f(xs)), c
        if self.peek()[:2] == ("op", "+"):
            self.take()
            return self.unary()
        return self.power()

    def power(self):
        f, c = self.atom()
        if self.peek()[:2] == ("op", "^"):
            self.take()
            g, d = self.unary()
            return _binary("^", f, g), c and d
        return f, c

    def atom(self):
        kind, val, pos = self.take()
        if kind == "num":
            v = float(val)
            return (lambda xs, v=v: v), True
        if kind == "op" and val == "(":
            node = self.expr()
            self.expect(")")
            return node
        if kind == "id":
            if val in FUNCTIONS:
                fn = FUNCTIONS[val]
                self.expect("(")
                f, c = self.expr()
                self.expect(")")
                return (lambda xs, f=f, fn=fn: fn(f(xs))), c
            if val in CONSTANTS:
                v = CONSTANTS[val]
                return (lambda xs, v=v: v), True
            m = re.fullmatch(r"x([1-9]\d*)", val)
            if m and int(m.group(1)) <= self.nvars:
                k = int(m.group(1)) - 1
                return (lambda xs, k=k: xs[k]), False
            raise UnknownIdentifierError(f"unknown identifier {val!r}", pos)
        if kind == "end":
            raise ExprSyntaxError("unexpected end of input", pos)
        raise ExprSyntaxError(f"unexpected {val!r}", pos)


def _binary(op, f, g):
    if op == "+":
        return lambda xs: f(xs) + g(xs)
    if op == "-":
        return lambda xs: f(xs) - g(xs)
    if op == "*":
        return lambda xs: f(xs) * g(xs)
    if op == "/":
        return lambda xs: f(xs) / g(xs)
    return lambda xs: power(f(xs), g(xs))


def parse(text: str, nvars: int) -> Expression:
    """Compile ``text`` into an :class:`Expression` in the variables ``x1..x{nvars}``."""
    fn, constant = _Parser(text, nvars).parse()
    if constant:
        v = fn(())
        fn = lambda xs, v=v: v  # noqa: E731
    return Expression(text, fn, constant)
