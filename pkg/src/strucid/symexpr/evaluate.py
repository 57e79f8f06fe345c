"""Numeric evaluation: exact rationals, IEEE floats, and compiled kernels."""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Mapping

from ..errors import DivisionByZero, DomainError, InconclusiveSingular
from .core import PI, Add, Const, Expr, Func, Mul, Pow, Var, is_rational, walk, walk_many

FLOAT_ZERO_TOL = 1e-9
DEFAULT_SEED = 20240607


@dataclass
class EvaluationPoint:
    """Variable bindings plus the arithmetic mode used to evaluate them."""

    values: dict
    exact: bool = True
    seed: int | None = None

    def get(self, name):
        return self.values[name]


def evaluate(e: Expr, point: EvaluationPoint | Mapping, exact: bool | None = None):
    """Evaluate ``e`` at ``point``.

    Exact mode returns a ``Fraction`` and needs rational bindings and integer
    exponents; float mode returns a Python float.
    """
    if isinstance(point, EvaluationPoint):
        values = point.values
        if exact is None:
            exact = point.exact
    else:
        values = point
        if exact is None:
            exact = all(isinstance(v, (int, Fraction)) for v in values.values()) and is_rational(e)
    if exact:
        return _eval_exact(e, values)
    return _eval_float(e, values)[0]


def evaluate_scaled(e: Expr, values: Mapping) -> tuple[float, float]:
    """Float value together with a magnitude bound of the computation.

    The bound grows with every sum of large terms, so a value much smaller
    than it is indistinguishable from zero at double precision.
    """
    return _eval_float(e, values, scaled=True)


def _lookup(values, name):
    if name == PI:
        return values.get(PI, math.pi)
    try:
        return values[name]
    except KeyError:
        raise KeyError(f"no binding for variable {name!r}") from None


def _eval_exact(e: Expr, values: Mapping, memo: dict | None = None):
    if memo is None:
        memo = {}
    elif e.uid in memo:
        return memo[e.uid]
    for node in walk(e, memo):
        tp = type(node)
        if tp is Const:
            v = node.value
        elif tp is Var:
            v = _lookup(values, node.name)
            if isinstance(v, float):
                raise DomainError("float binding in exact evaluation")
            v = Fraction(v)
        elif tp is Add:
            v = sum((memo[t.uid] for t in node.terms), Fraction(0))
        elif tp is Mul:
            v = node.coeff
            for f in node.factors:
                v *= memo[f.uid]
                if v == 0:
                    break
        elif tp is Pow:
            b = memo[node.base.uid]
            k = memo[node.exp.uid]
            if k.denominator != 1:
                raise DomainError("non-integer power in exact mode")
            if b == 0 and k < 0:
                raise DivisionByZero("division by zero")
            v = b ** int(k)
        else:
            raise DomainError(f"{node.name} is not exact")
        memo[node.uid] = v
    return memo[e.uid]


def _eval_float(e: Expr, values: Mapping, scaled: bool = False, memo: dict | None = None,
                mag: dict | None = None):
    if memo is None:
        memo, mag = {}, {}
    elif e.uid in memo and (not scaled or e.uid in mag):
        return memo[e.uid], (mag[e.uid] if scaled else None)
    for node in walk(e, mag if scaled else memo):
        uid = node.uid
        tp = type(node)
        if tp is Const:
            v = float(node.value)
            s = abs(v)
        elif tp is Var:
            v = float(_lookup(values, node.name))
            s = abs(v)
        elif tp is Add:
            v = 0.0
            s = 0.0
            for t in node.terms:
                v += memo[t.uid]
                if scaled:
                    s += mag[t.uid]
        elif tp is Mul:
            v = float(node.coeff)
            s = abs(v)
            for f in node.factors:
                v *= memo[f.uid]
                if scaled:
                    s *= mag[f.uid]
        elif tp is Pow:
            b = memo[node.base.uid]
            k = memo[node.exp.uid]
            v = _fpow(b, k, type(node.exp) is Const and node.exp.value.denominator == 1)
            if scaled:
                mb = mag[node.base.uid]
                if type(node.exp) is Const:
                    try:
                        d = abs(k) * abs(b) ** (k - 1) * mb if b != 0 else mb
                    except OverflowError:
                        d = math.inf
                    s = max(abs(v), d)
                else:
                    s = abs(v) * max(1.0, mag[node.exp.uid] * abs(math.log(abs(b))) if b else 1.0)
        else:
            a = memo[node.arg.uid]
            v = _ffunc(node.name, a)
            if node.name == "exp":
                s = abs(v) * max(1.0, mag[node.arg.uid]) if scaled else 0.0
            else:
                s = max(abs(v), 1.0)
        if v != v or v in (math.inf, -math.inf):
            raise DomainError("non-finite intermediate value")
        memo[uid] = v
        if scaled:
            mag[uid] = s if s == s else math.inf
    if scaled:
        return memo[e.uid], mag[e.uid]
    return memo[e.uid], None


def _fpow(b: float, k: float, integer: bool) -> float:
    try:
        if b == 0.0 and k < 0:
            raise DivisionByZero("division by zero")
        if b < 0 and not integer and k != int(k):
            raise DomainError("non-integer power of a negative base")
        if integer:
            return b ** int(k)
        return b ** k
    except OverflowError as exc:
        raise DomainError("overflow") from exc
    except ZeroDivisionError as exc:
        raise DivisionByZero("division by zero") from exc


def _ffunc(name: str, a: float) -> float:
    try:
        if name == "sin":
            return math.sin(a)
        if name == "cos":
            return math.cos(a)
        if name == "exp":
            return math.exp(a)
        if a <= 0:
            raise DomainError("log of a non-positive number")
        return math.log(a)
    except OverflowError as exc:
        raise DomainError("overflow") from exc


# -- random points ---------------------------------------------------------


@dataclass
class PointSampler:
    """Reproducible generic points.

    The value of a symbol at point ``k`` depends only on (seed, k, name), so
    every computation sharing a sampler sees one consistent point no matter
    which symbols it asks for first.
    """

    seed: int = DEFAULT_SEED
    max_int: int = 97
    float_window: float = 3.0
    _cache: dict = field(default_factory=dict)

    def value(self, k: int, name: str, exact: bool = True):
        key = (k, name, exact)
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        rng = random.Random(f"{self.seed}/{k}/{name}")
        while True:
            p = rng.randint(1, self.max_int)
            q = rng.randint(1, self.max_int)
            v = Fraction(p, q)
            if exact or 1.0 / self.float_window <= v <= self.float_window:
                break
        out = v if exact else float(v)
        self._cache[key] = out
        return out

    def bindings(self, k: int, names, exact: bool = True) -> dict:
        return {n: self.value(k, n, exact) for n in names}


def is_identically_zero(e: Expr, trials: int = 8, seed: int = DEFAULT_SEED, sampler=None,
                        return_witness: bool = False):
    """Probabilistic zero test.

    Structural zero is decisive.  Otherwise ``e`` is evaluated at ``trials``
    non-singular points: exactly when it is rational, otherwise in floats with
    a threshold scaled by the magnitude of the computation.
    """
    if type(e) is Const:
        res = e.value == 0
        return (res, None) if return_witness else res
    sampler = sampler or PointSampler(seed)
    exact = is_rational(e)
    names = sorted(e.free)
    good = 0
    k = 0
    limit = 50 * trials
    while good < trials:
        if k >= limit:
            raise InconclusiveSingular("no non-singular point found for the zero test", draws=k)
        vals = sampler.bindings(1000 + k, names, exact)
        k += 1
        try:
            if exact:
                v = _eval_exact(e, vals)
                nonzero = v != 0
            else:
                v, s = _eval_float(e, vals, scaled=True)
                nonzero = abs(v) > FLOAT_ZERO_TOL * max(s, 1.0)
        except (DivisionByZero, DomainError):
            continue
        if nonzero:
            return (False, vals) if return_witness else False
        good += 1
    return (True, None) if return_witness else True


# -- compiled kernels ------------------------------------------------------


def generate_source(exprs, layout: Mapping[str, str], fname: str = "kernel",
                    signature: str = "", out_name: str = "out", prelude: str = "") -> str:
    """Python source computing ``exprs`` into ``out[i]``.

    ``layout`` maps a symbol name to the source text that reads it (for
    example ``"x[2]"``).  Shared subexpressions are computed once.  The
    result uses only ``np.*`` functions and arithmetic, so it runs both
    vectorised over numpy arrays and under numba.
    """
    lines = [f"def {fname}({signature}):"]
    if prelude:
        lines.append("    " + prelude)
    names = {}
    counter = 0
    for node in walk_many(exprs):
        tp = type(node)
        if tp is Const:
            names[node.uid] = repr(float(node.value))
            continue
        if tp is Var:
            if node.name == PI:
                names[node.uid] = repr(math.pi)
            else:
                names[node.uid] = "(" + layout[node.name] + ")"
            continue
        if tp is Add:
            rhs = " + ".join(names[t.uid] for t in node.terms)
        elif tp is Mul:
            parts = [names[f.uid] for f in node.factors]
            if node.coeff != 1:
                parts.insert(0, repr(float(node.coeff)))
            rhs = " * ".join(parts)
        elif tp is Pow:
            k = node.exp
            if type(k) is Const and k.value.denominator == 1:
                n = int(k.value)
                if n == -1:
                    rhs = f"1.0 / {names[node.base.uid]}"
                elif n == 2:
                    rhs = f"{names[node.base.uid]} * {names[node.base.uid]}"
                else:
                    rhs = f"{names[node.base.uid]} ** {float(n)!r}"
            else:
                rhs = f"{names[node.base.uid]} ** {names[k.uid]}"
        else:
            rhs = f"np.{node.name}({names[node.arg.uid]})"
        tmp = f"_t{counter}"
        counter += 1
        lines.append(f"    {tmp} = {rhs}")
        names[node.uid] = tmp
    for i, e in enumerate(exprs):
        lines.append(f"    {out_name}[{i}] = {names[e.uid]}")
    lines.append("    return " + out_name)
    return "\n".join(lines) + "\n"


def compile_source(src: str, fname: str):
    import numpy as np

    ns = {"np": np, "math": math}
    exec(compile(src, f"<generated {fname}>", "exec"), ns)
    return ns[fname]


def lambdify(exprs, argnames):
    """Vectorised numpy function ``f(*arrays) -> list of arrays``."""
    import numpy as np

    layout = {n: n for n in argnames}
    sig = ", ".join(argnames)
    src = generate_source(list(exprs), layout, "_lam", sig, "_out", "_out = [None] * %d" % len(exprs))
    fn = compile_source(src, "_lam")

    def call(*args):
        vals = fn(*args)
        shape = np.broadcast(*args).shape if args else ()
        return [np.broadcast_to(np.asarray(v, dtype=float), shape).copy() if np.ndim(v) == 0 and shape else
                np.asarray(v, dtype=float) for v in vals]

    return call
