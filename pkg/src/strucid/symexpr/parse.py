"""Recursive-descent parser and infix renderer for expressions.

Grammar::

    expr   := term (('+' | '-') term)*
    term   := factor (('*' | '/') factor)*
    factor := ('-' | '+') factor | base ('^' factor)?
    base   := number | ident | '(' expr ')' | func '(' expr ')'

Numbers are decimals (optionally with an exponent); ``p/q`` rationals come
out of constant folding.  ``pi`` is the circle constant.
"""

from __future__ import annotations

import re
from fractions import Fraction

from ..errors import ParseError
from .core import (
    FUNCTIONS,
    Add,
    Const,
    Func,
    Mul,
    Pow,
    Var,
    add,
    const,
    func,
    mul,
    neg,
    power,
    var,
)

_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)|(?P<id>[A-Za-z_][A-Za-z0-9_]*)|(?P<op>[-+*/^()]))"
)


class _Lexer:
    def __init__(self, text: str):
        self.text = text
        self.tokens = []
        raw = text.encode("utf-8")
        pos = 0
        while pos < len(text):
            if text[pos:].strip() == "":
                break
            m = _TOKEN.match(text, pos)
            if not m or m.end() == pos:
                bad = pos + (len(text[pos:]) - len(text[pos:].lstrip()))
                raise ParseError(f"unexpected character {text[bad]!r}", _byte(text, bad), text)
            kind = m.lastgroup
            start = m.start(kind)
            self.tokens.append((kind, m.group(kind), _byte(text, start)))
            pos = m.end()
        self.tokens.append(("end", "", len(raw)))
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def take(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok


def _byte(text: str, index: int) -> int:
    return len(text[:index].encode("utf-8"))


def parse(text: str):
    if not isinstance(text, str):
        raise TypeError("expression text must be a string")
    lx = _Lexer(text)
    if lx.peek()[0] == "end":
        raise ParseError("empty expression", 0, text)
    e = _expr(lx)
    kind, val, off = lx.peek()
    if kind != "end":
        raise ParseError(f"unexpected token {val!r}", off, text)
    return e


def _expr(lx):
    left = _term(lx)
    while True:
        kind, val, _ = lx.peek()
        if kind == "op" and val in "+-":
            lx.take()
            right = _term(lx)
            left = add(left, right) if val == "+" else add(left, neg(right))
        else:
            return left


def _term(lx):
    left = _factor(lx)
    while True:
        kind, val, _ = lx.peek()
        if kind == "op" and val in "*/":
            lx.take()
            right = _factor(lx)
            if val == "*":
                left = mul(left, right)
            else:
                if type(right) is Const and right.value == 0:
                    raise ParseError("division by zero constant", lx.tokens[lx.i - 1][2], lx.text)
                left = mul(left, power(right, -1))
        else:
            return left


def _factor(lx):
    kind, val, off = lx.peek()
    if kind == "op" and val in "+-":
        lx.take()
        inner = _factor(lx)
        return inner if val == "+" else neg(inner)
    b = _base(lx)
    kind, val, off = lx.peek()
    if kind == "op" and val == "^":
        lx.take()
        e = _factor(lx)
        if type(b) is Const and b.value == 0 and type(e) is Const and e.value < 0:
            raise ParseError("zero raised to a negative power", off, lx.text)
        return power(b, e)
    return b


def _base(lx):
    kind, val, off = lx.take()
    if kind == "num":
        return const(Fraction(val))
    if kind == "id":
        nxt = lx.peek()
        if nxt[0] == "op" and nxt[1] == "(":
            if val not in FUNCTIONS:
                raise ParseError(f"unknown function {val!r}", off, lx.text)
            lx.take()
            arg = _expr(lx)
            _expect(lx, ")")
            return func(val, arg)
        return var(val)
    if kind == "op" and val == "(":
        e = _expr(lx)
        _expect(lx, ")")
        return e
    if kind == "end":
        raise ParseError("unexpected end of input", off, lx.text)
    raise ParseError(f"unexpected token {val!r}", off, lx.text)


def _expect(lx, sym):
    kind, val, off = lx.take()
    if kind != "op" or val != sym:
        shown = val if kind != "end" else "end of input"
        raise ParseError(f"expected {sym!r}, found {shown!r}", off, lx.text)


# -- rendering -----------------------------------------------------------

_PREC_ADD, _PREC_MUL, _PREC_NEG, _PREC_POW, _PREC_ATOM = 1, 2, 3, 4, 5


def render(e) -> str:
    """Infix text that ``parse`` maps back to the same expression."""
    memo: dict = {}
    return _render(e, memo)[0]


def _render_const(v: Fraction):
    if v.denominator == 1:
        s = str(v.numerator)
        return s, (_PREC_NEG if v < 0 else _PREC_ATOM)
    s = f"{v.numerator}/{v.denominator}"
    return s, _PREC_MUL if v > 0 else _PREC_NEG


def _wrap(part, prec, need):
    s, p = part
    return s if p >= need else f"({s})"


def _render(e, memo):
    hit = memo.get(e.uid)
    if hit is not None:
        return hit
    tp = type(e)
    if tp is Const:
        out = _render_const(e.value)
    elif tp is Var:
        out = (e.name, _PREC_ATOM)
    elif tp is Func:
        out = (f"{e.name}({_render(e.arg, memo)[0]})", _PREC_ATOM)
    elif tp is Pow:
        k = e.exp
        if type(k) is Const and k.value < 0:
            inv = power(e.base, const(-k.value))
            out = (f"1/{_wrap(_render(inv, memo), 0, _PREC_POW)}", _PREC_MUL)
        else:
            b = _wrap(_render(e.base, memo), 0, _PREC_ATOM)
            x = _wrap(_render(k, memo), 0, _PREC_POW if type(k) is not Const else _PREC_ATOM)
            out = (f"{b}^{x}", _PREC_POW)
    elif tp is Mul:
        out = _render_mul(e, memo)
    else:
        pieces = []
        for i, t in enumerate(e.terms):
            negative = (type(t) is Mul and t.coeff < 0) or (type(t) is Const and t.value < 0)
            if i > 0 and negative:
                pieces.append(" - " + _wrap(_render(neg(t), memo), 0, _PREC_MUL))
            else:
                body = _wrap(_render(t, memo), 0, _PREC_MUL)
                pieces.append(body if i == 0 else " + " + body)
        out = ("".join(pieces), _PREC_ADD)
    memo[e.uid] = out
    return out


def _render_mul(e, memo):
    c = e.coeff
    num, den = [], []
    for f in e.factors:
        if type(f) is Pow and type(f.exp) is Const and f.exp.value < 0:
            den.append(power(f.base, const(-f.exp.value)))
        else:
            num.append(f)
    sign = "-" if c < 0 else ""
    c = abs(c)
    num_parts = [_wrap(_render(f, memo), 0, _PREC_POW) for f in num]
    if c.numerator != 1 or not num_parts:
        num_parts.insert(0, str(c.numerator))
    den_parts = [_wrap(_render(f, memo), 0, _PREC_POW) for f in den]
    if c.denominator != 1:
        den_parts.insert(0, str(c.denominator))
    s = "*".join(num_parts)
    if den_parts:
        s += "/" + (den_parts[0] if len(den_parts) == 1 else "(" + "*".join(den_parts) + ")")
    if sign:
        return "-" + s, _PREC_NEG
    return s, _PREC_MUL


__all__ = ["parse", "render", "Add", "Mul", "Pow", "Var", "Func", "Const"]
