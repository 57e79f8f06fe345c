"""Immutable, hash-consed expression trees with light canonical simplification.

Every node is interned: two structurally equal expressions are the same
Python object, so ``a is b`` (and ``a == b``) is structural equality.

Canonical form:
  * ``Add`` is flat, like terms are collected (``2*x + 3*x -> 5*x``), constants
    are folded into one term, children are sorted.
  * ``Mul`` is flat, keeps a rational coefficient apart from its factors,
    merges equal bases by adding exponents, sorts factors.  A rational
    coefficient times a single sum is distributed.
  * ``Pow`` folds numeric cases, ``(a^b)^n -> a^(b n)`` and
    ``(a b)^n -> a^n b^n`` for integer ``n``.  An integer power of a sum
    pulls out the sum's rational content: ``(2 + 2 x)^-1 -> 1/2 (1 + x)^-1``.
  * Negation is ``-1 * e`` and reciprocal is ``e^-1``.
"""

from __future__ import annotations

import itertools
import math
import sys
import zlib
from fractions import Fraction
from numbers import Rational

from ..errors import DivisionByZero

sys.setrecursionlimit(max(sys.getrecursionlimit(), 20000))

FUNCTIONS = ("sin", "cos", "log", "exp")
TIME = "t"
PI = "pi"

_table: dict = {}
_serial = itertools.count()


def _crc(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


class Expr:
    __slots__ = ("uid", "digest", "sort", "_free", "_dcache", "_rational", "__weakref__")

    # -- arithmetic sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, neg(other))

    def __rsub__(self, other):
        return add(other, neg(self))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return mul(self, power(other, MINUS_ONE))

    def __rtruediv__(self, other):
        return mul(other, power(self, MINUS_ONE))

    def __pow__(self, other):
        return power(self, other)

    def __rpow__(self, other):
        return power(other, self)

    def __neg__(self):
        return neg(self)

    def __pos__(self):
        return self

    # -- structure -------------------------------------------------------
    @property
    def args(self) -> tuple:
        return ()

    @property
    def free(self) -> frozenset:
        f = self._free
        if f is None:
            f = frozenset().union(*(a.free for a in self.args)) if self.args else frozenset()
            self._free = f
        return f

    def is_const(self, value=None) -> bool:
        return False

    def __repr__(self):
        from .parse import render

        return f"Expr({render(self)})"

    def __str__(self):
        from .parse import render

        return render(self)

    def __reduce__(self):
        from .parse import render
        from .parse import parse as _parse

        return (_parse, (render(self),))


class Const(Expr):
    __slots__ = ("value",)

    def is_const(self, value=None):
        return value is None or self.value == value

    @property
    def free(self):
        return frozenset()


class Var(Expr):
    __slots__ = ("name",)

    @property
    def free(self):
        return self._free


class Add(Expr):
    __slots__ = ("terms",)

    @property
    def args(self):
        return self.terms


class Mul(Expr):
    __slots__ = ("coeff", "factors", "_rest")

    @property
    def args(self):
        return self.factors

    @property
    def rest(self) -> Expr:
        """The coefficient-free part."""
        r = self._rest
        if r is None:
            if len(self.factors) == 1:
                r = self.factors[0]
            else:
                r = _make_mul(Fraction(1), self.factors)
            self._rest = r
        return r


class Pow(Expr):
    __slots__ = ("base", "exp")

    @property
    def args(self):
        return (self.base, self.exp)


class Func(Expr):
    __slots__ = ("name", "arg")

    @property
    def args(self):
        return (self.arg,)


def _new(cls, key, digest, sort):
    node = object.__new__(cls)
    node.uid = next(_serial)
    node.digest = digest
    node.sort = sort
    node._free = None
    node._dcache = None
    node._rational = None
    _table[key] = node
    return node


def const(value) -> Const:
    if isinstance(value, Const):
        return value
    if not isinstance(value, Fraction):
        if isinstance(value, float):
            value = Fraction(repr(value))
        else:
            value = Fraction(value)
    key = ("c", value)
    node = _table.get(key)
    if node is None:
        node = _new(Const, key, hash((1, value.numerator, value.denominator)), (0, "", value, 0))
        node.value = value
    return node


def var(name: str) -> Var:
    key = ("v", name)
    node = _table.get(key)
    if node is None:
        node = _new(Var, key, hash((2, _crc(name))), (1, name, 0, 0))
        node.name = name
        node._free = frozenset() if name == PI else frozenset((name,))
    return node


ZERO = const(0)
ONE = const(1)
MINUS_ONE = const(-1)


def sympify(x) -> Expr:
    if isinstance(x, Expr):
        return x
    if isinstance(x, (int, Rational, float)):
        return const(x)
    if isinstance(x, str):
        from .parse import parse

        return parse(x)
    raise TypeError(f"cannot convert {type(x).__name__} to an expression")


def _make_add(terms: tuple) -> Add:
    key = ("+",) + tuple(t.uid for t in terms)
    node = _table.get(key)
    if node is None:
        digest = hash((3,) + tuple(t.digest for t in terms))
        node = _new(Add, key, digest, (5, "", 0, digest))
        node.terms = terms
    return node


def _make_mul(coeff: Fraction, factors: tuple) -> Mul:
    key = ("*", coeff) + tuple(f.uid for f in factors)
    node = _table.get(key)
    if node is None:
        digest = hash((4, coeff.numerator, coeff.denominator) + tuple(f.digest for f in factors))
        lead = factors[0].sort
        node = _new(Mul, key, digest, (lead[0], lead[1], lead[2], digest))
        node.coeff = coeff
        node.factors = factors
        node._rest = None
    return node


def _make_pow(base: Expr, exp: Expr) -> Pow:
    key = ("^", base.uid, exp.uid)
    node = _table.get(key)
    if node is None:
        digest = hash((5, base.digest, exp.digest))
        b = base.sort
        node = _new(Pow, key, digest, (b[0], b[1], b[2], digest))
        node.base = base
        node.exp = exp
    return node


def _make_func(name: str, arg: Expr) -> Func:
    key = ("f", name, arg.uid)
    node = _table.get(key)
    if node is None:
        digest = hash((6, _crc(name), arg.digest))
        node = _new(Func, key, digest, (2, name, 0, digest))
        node.name = name
        node.arg = arg
    return node


def _scaled(core: Expr, c: Fraction) -> Expr:
    if c == 1:
        return core
    if type(core) is Mul:
        return _make_mul(c * core.coeff, core.factors)
    return _make_mul(c, (core,))


def add(*args) -> Expr:
    constant = Fraction(0)
    coeffs: dict = {}
    stack = list(reversed(args))
    while stack:
        a = stack.pop()
        if not isinstance(a, Expr):
            a = sympify(a)
        tp = type(a)
        if tp is Const:
            constant += a.value
        elif tp is Add:
            stack.extend(reversed(a.terms))
        elif tp is Mul:
            core = a.rest
            coeffs[core] = coeffs.get(core, 0) + a.coeff
        else:
            coeffs[a] = coeffs.get(a, 0) + 1
    terms = [_scaled(core, c) for core, c in coeffs.items() if c != 0]
    if constant != 0:
        terms.append(const(constant))
    if not terms:
        return ZERO
    if len(terms) == 1:
        return terms[0]
    terms.sort(key=_sortkey)
    return _make_add(tuple(terms))


def _sortkey(e: Expr):
    return e.sort


def _add_exp(a: Expr | None, b: Expr) -> Expr:
    if a is None:
        return b
    if type(a) is Const and type(b) is Const:
        return const(a.value + b.value)
    return add(a, b)


def mul(*args) -> Expr:
    coeff = Fraction(1)
    exps: dict = {}
    for a in args:
        if not isinstance(a, Expr):
            a = sympify(a)
        tp = type(a)
        if tp is Const:
            coeff *= a.value
            continue
        if tp is Mul:
            coeff *= a.coeff
            items = a.factors
        else:
            items = (a,)
        for f in items:
            if type(f) is Pow:
                exps[f.base] = _add_exp(exps.get(f.base), f.exp)
            else:
                exps[f] = _add_exp(exps.get(f), ONE)
    if coeff == 0:
        return ZERO
    factors = []
    again = False
    for base, e in exps.items():
        p = power(base, e)
        tp = type(p)
        if tp is Const:
            coeff *= p.value
        elif tp is Mul:
            coeff *= p.coeff
            factors.extend(p.factors)
            again = True
        else:
            factors.append(p)
    if coeff == 0:
        return ZERO
    if again:
        return mul(const(coeff), *factors)
    if not factors:
        return const(coeff)
    if len(factors) == 1:
        f = factors[0]
        if coeff == 1:
            return f
        if type(f) is Add:
            return add(*(_scaled_term(t, coeff) for t in f.terms))
        return _make_mul(coeff, (f,))
    factors.sort(key=_sortkey)
    return _make_mul(coeff, tuple(factors))


def _scaled_term(t: Expr, c: Fraction) -> Expr:
    if type(t) is Const:
        return const(t.value * c)
    if type(t) is Mul:
        return _make_mul(t.coeff * c, t.factors)
    return _make_mul(c, (t,))


def _term_coeff(t: Expr) -> Fraction:
    if type(t) is Const:
        return t.value
    if type(t) is Mul:
        return t.coeff
    return Fraction(1)


def _core_key(t: Expr):
    if type(t) is Const:
        return ONE.sort
    return (t.rest if type(t) is Mul else t).sort


def _content(s: Add) -> Fraction:
    """Rational content of a sum, signed so the quotient's leading coefficient is positive.

    The leading term is chosen by its coefficient-free part, which rescaling
    leaves alone, so the quotient has content 1.
    """
    cs = [_term_coeff(t) for t in s.terms]
    num = math.gcd(*(c.numerator for c in cs))
    den = math.lcm(*(c.denominator for c in cs))
    c = Fraction(num, den)
    lead = min(s.terms, key=_core_key)
    return -c if _term_coeff(lead) < 0 else c


def power(base, exp) -> Expr:
    base = sympify(base)
    exp = sympify(exp)
    if type(exp) is Const:
        k = exp.value
        if k == 0:
            return ONE
        if k == 1:
            return base
        tb = type(base)
        if tb is Const:
            b = base.value
            if b == 0:
                if k < 0:
                    raise DivisionByZero("zero raised to a negative power")
                return ZERO
            if b == 1:
                return ONE
            if k.denominator == 1:
                return const(b ** int(k))
            return _make_pow(base, exp)
        if k.denominator == 1:
            if tb is Pow:
                return power(base.base, mul(base.exp, exp))
            if tb is Mul:
                n = int(k)
                return mul(const(base.coeff ** n), *(power(f, exp) for f in base.factors))
            if tb is Add:
                c = _content(base)
                if c != 1:
                    prim = add(*(_scaled_term(t, 1 / c) for t in base.terms))
                    return mul(const(c ** int(k)), _make_pow(prim, exp))
        return _make_pow(base, exp)
    if type(base) is Const and base.value == 1:
        return ONE
    return _make_pow(base, exp)


def func(name: str, arg) -> Expr:
    if name not in FUNCTIONS:
        raise ValueError(f"unknown function {name!r}")
    arg = sympify(arg)
    if type(arg) is Const:
        v = arg.value
        if v == 0:
            if name == "sin":
                return ZERO
            if name in ("cos", "exp"):
                return ONE
        if v == 1 and name == "log":
            return ZERO
    if type(arg) is Func:
        if name == "exp" and arg.name == "log":
            return arg.arg
        if name == "log" and arg.name == "exp":
            return arg.arg
    return _make_func(name, arg)


def neg(e) -> Expr:
    return mul(MINUS_ONE, e)


def recip(e) -> Expr:
    return power(e, MINUS_ONE)


def sin(e):
    return func("sin", e)


def cos(e):
    return func("cos", e)


def exp(e):
    return func("exp", e)


def log(e):
    return func("log", e)


def symbols(names: str) -> list[Var]:
    return [var(n) for n in names.replace(",", " ").split()]


# -- calculus ------------------------------------------------------------


def diff(e: Expr, v: str) -> Expr:
    """Partial derivative of ``e`` with respect to the variable named ``v``."""
    if v not in e.free:
        return ZERO
    cache = e._dcache
    if cache is None:
        cache = e._dcache = {}
    else:
        hit = cache.get(v)
        if hit is not None:
            return hit
    tp = type(e)
    if tp is Var:
        out = ONE
    elif tp is Add:
        out = add(*(diff(t, v) for t in e.terms))
    elif tp is Mul:
        fs = e.factors
        parts = []
        for i, f in enumerate(fs):
            if v not in f.free:
                continue
            parts.append(mul(const(e.coeff), diff(f, v), *fs[:i], *fs[i + 1:]))
        out = add(*parts)
    elif tp is Pow:
        b, k = e.base, e.exp
        if v not in k.free:
            out = mul(k, power(b, add(k, MINUS_ONE)), diff(b, v))
        else:
            db = diff(b, v)
            out = mul(e, add(mul(diff(k, v), log(b)), mul(k, db, power(b, MINUS_ONE))))
    elif tp is Func:
        a = e.arg
        da = diff(a, v)
        if e.name == "sin":
            out = mul(cos(a), da)
        elif e.name == "cos":
            out = mul(MINUS_ONE, sin(a), da)
        elif e.name == "exp":
            out = mul(e, da)
        else:
            out = mul(da, power(a, MINUS_ONE))
    else:
        out = ZERO
    cache[v] = out
    return out


def gradient(e: Expr, coords) -> list[Expr]:
    return [diff(e, c) for c in coords]


def substitute(e: Expr, mapping: dict) -> Expr:
    """Replace variables by expressions; ``mapping`` is keyed by name."""
    if not mapping:
        return e
    mapping = {k: sympify(v) for k, v in mapping.items()}
    keys = frozenset(mapping)
    memo: dict = {}

    def go(node: Expr) -> Expr:
        if not (node.free & keys) and not (type(node) is Var and node.name in keys):
            return node
        hit = memo.get(node.uid)
        if hit is not None:
            return hit
        tp = type(node)
        if tp is Var:
            out = mapping[node.name]
        elif tp is Add:
            out = add(*(go(t) for t in node.terms))
        elif tp is Mul:
            out = mul(const(node.coeff), *(go(f) for f in node.factors))
        elif tp is Pow:
            out = power(go(node.base), go(node.exp))
        elif tp is Func:
            out = func(node.name, go(node.arg))
        else:
            out = node
        memo[node.uid] = out
        return out

    return go(e)


def is_rational(e: Expr) -> bool:
    """True when ``e`` can be evaluated exactly over the rationals."""
    r = e._rational
    if r is not None:
        return r
    tp = type(e)
    if tp is Const:
        r = True
    elif tp is Var:
        r = e.name != PI
    elif tp is Func:
        r = False
    elif tp is Pow:
        r = type(e.exp) is Const and e.exp.value.denominator == 1 and is_rational(e.base)
    else:
        r = all(is_rational(a) for a in e.args)
    e._rational = r
    return r


def walk(e: Expr, known=None):
    """Every distinct node of the DAG once, children before parents.

    Subtrees whose root uid is in ``known`` are skipped entirely.
    """
    seen = set()
    order = []
    stack = [(e, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if node.uid in seen or (known is not None and node.uid in known):
            continue
        seen.add(node.uid)
        stack.append((node, True))
        for a in node.args:
            if a.uid not in seen:
                stack.append((a, False))
    return order


def walk_many(exprs):
    seen = set()
    order = []
    for e in exprs:
        stack = [(e, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if node.uid in seen:
                continue
            seen.add(node.uid)
            stack.append((node, True))
            for a in node.args:
                if a.uid not in seen:
                    stack.append((a, False))
    return order


def size(e: Expr) -> int:
    """Number of distinct nodes in the DAG."""
    return len(walk(e))


def contains_symbol(e: Expr, name: str) -> bool:
    return name in e.free or (name == PI and any(type(n) is Var and n.name == PI for n in walk(e)))


def together(e: Expr) -> tuple[Expr, Expr]:
    """Split into (numerator, denominator) without cancelling common factors.

    Denominators are kept as products of powers so that a common multiple can
    be formed syntactically.
    """
    memo: dict = {}

    def go(node: Expr):
        hit = memo.get(node.uid)
        if hit is not None:
            return hit
        tp = type(node)
        if tp is Pow and type(node.exp) is Const and node.exp.value < 0:
            n, d = go(node.base)
            k = -node.exp.value
            out = (power(d, const(k)), power(n, const(k)))
        elif tp is Mul:
            nums, dens = [const(node.coeff)], []
            for f in node.factors:
                n, d = go(f)
                nums.append(n)
                dens.append(d)
            out = (mul(*nums), mul(*dens))
        elif tp is Add:
            parts = [go(t) for t in node.terms]
            den = lcm_products([d for _, d in parts])
            num = add(*(mul(n, quotient_products(den, d)) for n, d in parts))
            out = (num, den)
        else:
            out = (node, ONE)
        memo[node.uid] = out
        return out

    return go(e)


def _factor_powers(e: Expr) -> tuple[Fraction, dict]:
    """View ``e`` as coeff * prod(base^k) with integer k."""
    if type(e) is Const:
        return e.value, {}
    items = e.factors if type(e) is Mul else (e,)
    coeff = e.coeff if type(e) is Mul else Fraction(1)
    out: dict = {}
    for f in items:
        if type(f) is Pow and type(f.exp) is Const and f.exp.value.denominator == 1:
            out[f.base] = out.get(f.base, 0) + int(f.exp.value)
        else:
            out[f] = out.get(f, 0) + 1
    return coeff, out


def lcm_products(items) -> Expr:
    """Syntactic least common multiple of products of powers."""
    best: dict = {}
    order = []
    for it in items:
        _, fp = _factor_powers(it)
        for b, k in fp.items():
            if b not in best:
                order.append(b)
                best[b] = k
            else:
                best[b] = max(best[b], k)
    return mul(*(power(b, const(best[b])) for b in order))


def quotient_products(a: Expr, b: Expr) -> Expr:
    """a / b where b's factors are known to divide a syntactically."""
    return mul(a, power(b, MINUS_ONE))
