"""Tiny arithmetic-expression evaluator for config files.

Grammar (documented in the README):

* variables ``x``, ``y`` (space) and ``t`` (time), constant ``pi``;
* operators ``+ - * / **`` with usual precedence, parentheses, unary minus;
* functions ``sin cos exp sqrt abs`` and ``pow(a, b)``;
* conditionals ``if <a> <cmp> <b> then <expr> else <expr>`` with
  comparators ``<= < >= > ==``; nesting is allowed.

The legacy component syntax ``x[0]``/``x[1]`` is accepted and mapped to
``x``/``y``.  Compiled expressions evaluate vectorized over numpy arrays.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass

import numpy as np


class ExpressionError(Exception):
    """Syntax error or unknown name in an expression."""


_FUNCS = {
    "sin": np.sin,
    "cos": np.cos,
    "exp": np.exp,
    "sqrt": np.sqrt,
    "abs": np.abs,
}

_TOKEN_RE = re.compile(
    r"\s*(?:(?P<num>\d+\.\d*(?:[eE][+-]?\d+)?|\.\d+(?:[eE][+-]?\d+)?"
    r"|\d+(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>\*\*|<=|>=|==|[-+*/(),<>]))"
)


def _tokenize(text):
    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if not m or m.end() == pos:
            rest = text[pos:].strip()
            if not rest:
                break
            raise ExpressionError(
                f"cannot read expression at ...{text[pos:pos + 12]!r}"
            )
        if m.group("num") is not None:
            tokens.append(("num", float(m.group("num"))))
        elif m.group("name") is not None:
            tokens.append(("name", m.group("name")))
        else:
            tokens.append(("op", m.group("op")))
        pos = m.end()
    tokens.append(("end", None))
    return tokens


@dataclass
class Expression:
    """A compiled expression; call with keyword variables (x=, y=, t=)."""

    source: str
    variables: tuple
    _eval: callable

    def __call__(self, **kwargs):
        missing = set(self.variables) - set(kwargs)
        if missing:
            raise ExpressionError(
                f"expression {self.source!r} needs {sorted(missing)}"
            )
        return self._eval(kwargs)


class _Parser:
    def __init__(self, tokens, variables):
        self.tokens = tokens
        self.pos = 0
        self.variables = variables

    def peek(self):
        return self.tokens[self.pos]

    def next(self):
        tok = self.tokens[self.pos]
        self.pos += 1
        return tok

    def expect(self, op):
        kind, val = self.next()
        if kind != "op" or val != op:
            raise ExpressionError(f"expected {op!r}, found {val!r}")

    def expect_name(self, name):
        kind, val = self.next()
        if kind != "name" or val != name:
            raise ExpressionError(f"expected {name!r}, found {val!r}")

    # expr := 'if' cmp 'then' expr 'else' expr | sum
    def expr(self):
        kind, val = self.peek()
        if kind == "name" and val == "if":
            self.next()
            cond = self.comparison()
            self.expect_name("then")
            a = self.expr()
            self.expect_name("else")
            b = self.expr()
            return lambda env: np.where(cond(env), a(env), b(env))
        return self.sum()

    def comparison(self):
        lhs = self.sum()
        kind, val = self.next()
        ops = {"<=": np.less_equal, "<": np.less, ">=": np.greater_equal,
               ">": np.greater, "==": np.equal}
        if kind != "op" or val not in ops:
            raise ExpressionError(f"expected a comparison, found {val!r}")
        cmp = ops[val]
        rhs = self.sum()
        return lambda env: cmp(lhs(env), rhs(env))

    def sum(self):
        node = self.term()
        while True:
            kind, val = self.peek()
            if kind == "op" and val in "+-":
                self.next()
                rhs = self.term()
                if val == "+":
                    node = (lambda a, b: lambda env: a(env) + b(env))(node, rhs)
                else:
                    node = (lambda a, b: lambda env: a(env) - b(env))(node, rhs)
            else:
                return node

    def term(self):
        node = self.unary()
        while True:
            kind, val = self.peek()
            if kind == "op" and val in "*/":
                self.next()
                rhs = self.unary()
                if val == "*":
                    node = (lambda a, b: lambda env: a(env) * b(env))(node, rhs)
                else:
                    node = (lambda a, b: lambda env: a(env) / b(env))(node, rhs)
            else:
                return node

    def unary(self):
        kind, val = self.peek()
        if kind == "op" and val in "+-":
            self.next()
            operand = self.unary()
            if val == "-":
                return lambda env: -operand(env)
            return operand
        return self.power()

    def power(self):
        base = self.atom()
        kind, val = self.peek()
        if kind == "op" and val == "**":
            self.next()
            exponent = self.unary()
            return lambda env: base(env) ** exponent(env)
        return base

    def atom(self):
        kind, val = self.next()
        if kind == "num":
            return lambda env, v=val: v
        if kind == "op" and val == "(":
            inner = self.expr()
            self.expect(")")
            return inner
        if kind == "name":
            if val == "pi":
                return lambda env: math.pi
            if val in _FUNCS:
                self.expect("(")
                arg = self.expr()
                self.expect(")")
                f = _FUNCS[val]
                return lambda env: f(arg(env))
            if val == "pow":
                self.expect("(")
                a = self.expr()
                self.expect(",")
                b = self.expr()
                self.expect(")")
                return lambda env: a(env) ** b(env)
            if val in self.variables:
                return lambda env, v=val: env[v]
            raise ExpressionError(f"unknown name {val!r}")
        raise ExpressionError(f"unexpected token {val!r}")


def compile_expression(text, variables=("x", "y")):
    """Compile ``text`` into an :class:`Expression` over ``variables``."""
    source = text
    text = text.replace("x[0]", "x").replace("x[1]", "y")
    parser = _Parser(_tokenize(text), tuple(variables))
    try:
        fn = parser.expr()
        kind, val = parser.next()
        if kind != "end":
            raise ExpressionError(f"trailing input at {val!r}")
    except ExpressionError as err:
        raise ExpressionError(f"in {source!r}: {err}") from None
    return Expression(source=source, variables=tuple(variables), _eval=fn)


def spatial(text):
    """Compile an expression of (x, y) into a plain ``f(x, y)`` callable."""
    expr = compile_expression(text, variables=("x", "y"))

    def fn(x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        out = np.asarray(expr(x=x, y=y), dtype=float)
        if out.shape != x.shape:
            out = np.broadcast_to(out, x.shape).copy()
        return out

    return fn


def temporal(text):
    """Compile an expression of t into a scalar ``f(t)`` callable."""
    expr = compile_expression(text, variables=("t",))
    return lambda t: float(expr(t=float(t)))
