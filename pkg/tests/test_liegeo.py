import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from exprgen import NAMES, polynomials
from strucid.errors import ExpressionTooLarge, SingularSigma
from strucid.liegeo import (
    Codistribution,
    GenericSpan,
    RankOracle,
    autobracket,
    codistribution_closure,
    distribution_closure,
    generic_rank,
    gradient,
    in_orthogonal,
    lie_bracket,
    lie_covector,
    lie_operator,
    lie_scalar,
    bracket_operator,
    null_space,
)
from strucid.symexpr import ONE, ZERO, evaluate, parse

fields = st.tuples(polynomials, polynomials, polynomials).map(lambda t: tuple(parse(s) for s in t))
scalars = polynomials.map(parse)


def _zero(vec, oracle):
    return all(e is ZERO or oracle.zero(e) for e in vec)


@settings(max_examples=40, deadline=None)
@given(fields, fields, fields)
def test_jacobi_identity(f, g, h):
    oracle = RankOracle()
    a = lie_bracket(f, lie_bracket(g, h, NAMES), NAMES)
    b = lie_bracket(g, lie_bracket(h, f, NAMES), NAMES)
    c = lie_bracket(h, lie_bracket(f, g, NAMES), NAMES)
    assert _zero([x + y + z for x, y, z in zip(a, b, c)], oracle)


@settings(max_examples=40, deadline=None)
@given(fields, fields)
def test_bracket_is_antisymmetric(f, g):
    oracle = RankOracle()
    assert _zero([a + b for a, b in zip(lie_bracket(f, g, NAMES), lie_bracket(g, f, NAMES))], oracle)


@settings(max_examples=40, deadline=None)
@given(fields, scalars)
def test_covector_derivative_commutes_with_gradient(f, lam):
    oracle = RankOracle()
    lhs = lie_covector(f, gradient(lam, NAMES), NAMES)
    rhs = gradient(lie_scalar(f, lam, NAMES), NAMES)
    assert _zero([a - b for a, b in zip(lhs, rhs)], oracle)


@settings(max_examples=30, deadline=None)
@given(fields, fields, scalars)
def test_bracket_acts_as_commutator(f, g, lam):
    oracle = RankOracle()
    lhs = lie_scalar(lie_bracket(f, g, NAMES), lam, NAMES)
    rhs = lie_scalar(f, lie_scalar(g, lam, NAMES), NAMES) - lie_scalar(g, lie_scalar(f, lam, NAMES), NAMES)
    assert oracle.zero(lhs - rhs)


def test_time_derivative_term():
    f = (parse("t*x"),)
    assert lie_scalar(f, parse("t*x"), ("x",), dt=True) is parse("t^2*x + x")


def test_rank_of_dependent_rows():
    rows = [(parse("x"), parse("y")), (parse("x^2"), parse("x*y")), (parse("1"), parse("0"))]
    rank, witness = generic_rank(rows, RankOracle())
    assert rank == 2 and witness


def test_float_mode_agrees_with_exact():
    rows = [(parse("sin(x)"), parse("cos(x)")), (parse("2*sin(x)"), parse("2*cos(x)"))]
    assert generic_rank(rows, RankOracle(mode="float"))[0] == 1
    rows = [(parse("x"), parse("y")), (parse("y"), parse("x"))]
    assert generic_rank(rows, RankOracle(mode="exact"))[0] == 2
    assert generic_rank(rows, RankOracle(mode="float"))[0] == 2


@settings(max_examples=30, deadline=None)
@given(st.lists(fields, min_size=1, max_size=4))
def test_generic_rank_matches_numeric_rank(rows):
    rank, _ = generic_rank(rows, RankOracle(seed=7))
    point = {"x": 1.37, "y": 0.83, "z": 1.91}
    m = np.array([[float(evaluate(e, point, exact=False)) for e in r] for r in rows])
    assert rank == np.linalg.matrix_rank(m)


def test_span_membership():
    span = GenericSpan(RankOracle(), 2)
    assert span.add((parse("x"), parse("1")))
    assert not span.add((parse("x*y"), parse("y")))
    assert span.test((parse("1"), parse("0")))
    assert span.rank == 1


@settings(max_examples=25, deadline=None)
@given(st.lists(scalars, min_size=1, max_size=3), st.lists(fields, min_size=1, max_size=2))
def test_closure_is_monotone_and_bounded(pots, flds):
    oracle = RankOracle()
    ops = [lie_operator(f, NAMES) for f in flds]
    try:
        res = codistribution_closure(NAMES, pots, ops, oracle, size_cap=4000)
    except ExpressionTooLarge:
        return
    h = res.history
    assert all(a <= b for a, b in zip(h, h[1:]))
    assert h[-1] == res.span.rank <= len(NAMES)
    assert res.steps <= len(NAMES) - h[0] + 1
    assert h[-1] == h[-2]


def test_closure_of_a_chain_of_integrators():
    coords = ("a", "b", "c")
    f = (parse("b"), parse("c"), ZERO)
    res = codistribution_closure(coords, [parse("a")], [lie_operator(f, coords)], RankOracle())
    assert res.span.rank == 3
    assert res.history == [1, 2, 3, 3]
    assert res.steps == 3


def test_distribution_closure_reaches_full_rank():
    coords = ("x", "y", "th")
    drive = (parse("cos(th)"), parse("sin(th)"), ZERO)
    turn = (ZERO, ZERO, ONE)
    res = distribution_closure(coords, [drive, turn], [bracket_operator(drive, coords), bracket_operator(turn, coords)],
                               RankOracle())
    assert res.span.rank == 3


def test_null_space_annihilates_and_has_the_right_size():
    oracle = RankOracle()
    coords = ("x", "y", "z")
    omega = Codistribution(coords, [parse("x*y"), parse("z + y")])
    gens = null_space(omega, oracle)
    assert len(gens) == 3 - omega.rank(oracle)
    for xi in gens:
        assert in_orthogonal(omega, xi, oracle)
        assert any(e is not ZERO for e in xi)


def test_empty_codistribution_has_the_full_null_space():
    gens = null_space(Codistribution(("x", "y"), []), RankOracle())
    assert len(gens) == 2


def test_singular_weighting_is_rejected():
    coords = ("x",)
    with pytest.raises(SingularSigma):
        autobracket((parse("x"),), 0, [(ONE,), (parse("x"),)], [[ONE, ONE], [ONE, ONE]], coords,
                    oracle=RankOracle())


def test_autobracket_with_identity_weights_is_a_bracket():
    coords = ("x", "y")
    f = (parse("y"), parse("x^2"))
    g0 = (parse("x*y"), ZERO)
    g1 = (ZERO, ONE)
    out = autobracket(f, 1, [g0, g1], [[ONE, ZERO], [ZERO, ONE]], coords)
    assert out == lie_bracket(g1, f, coords)
