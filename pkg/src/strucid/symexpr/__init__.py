"""Symbolic expression core: parsing, canonical simplification, calculus, evaluation."""

from .core import (
    FUNCTIONS,
    MINUS_ONE,
    ONE,
    PI,
    TIME,
    ZERO,
    Add,
    Const,
    Expr,
    Func,
    Mul,
    Pow,
    Var,
    add,
    const,
    cos,
    diff,
    exp,
    func,
    gradient,
    is_rational,
    lcm_products,
    log,
    mul,
    neg,
    power,
    recip,
    sin,
    size,
    substitute,
    symbols,
    sympify,
    together,
    var,
    walk,
    walk_many,
)
from .evaluate import (
    DEFAULT_SEED,
    FLOAT_ZERO_TOL,
    EvaluationPoint,
    PointSampler,
    compile_source,
    evaluate,
    evaluate_scaled,
    generate_source,
    is_identically_zero,
    lambdify,
)
from .parse import parse, render

differentiate = diff


def simplify(e):
    """Canonical form; construction already canonicalises, so this re-builds."""
    from .core import substitute as _sub

    e = sympify(e)
    return _sub(e, {n: var(n) for n in e.free}) if e.free else e
