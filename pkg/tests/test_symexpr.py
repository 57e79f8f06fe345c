import math
from fractions import Fraction

import pytest
from hypothesis import given, settings

from exprgen import expressions, points
from strucid.errors import DivisionByZero, ParseError
from strucid.symexpr import (
    ONE,
    ZERO,
    const,
    diff,
    evaluate,
    generate_source,
    compile_source,
    is_identically_zero,
    lambdify,
    parse,
    render,
    substitute,
    var,
)


def test_canonical_form_is_shared():
    assert parse("x*y + y*x") is parse("2*x*y")
    assert parse("x - x") is ZERO
    assert parse("(x + 1)^0") is ONE
    assert parse("x/x") is ONE


def test_powers_of_sums_factor_out_content():
    assert parse("x/(2*(1 + x^2))") is parse("(x/(1 + x^2))/2")
    assert parse("1/(y - x)") is parse("-1/(x - y)")
    assert parse("(x - y)^2 - (y - x)^2") is ZERO
    assert parse("(4 + 2*x)^-1*(2 + x)") is parse("1/2")


def test_constants_stay_rational():
    assert evaluate(parse("1/3 + 1/6"), {}) == Fraction(1, 2)
    assert render(parse("0.25")) == "1/4"


@pytest.mark.parametrize("text, offset", [("x + * y", 4), ("sin(x", 5), ("foo(x)", 0), ("x $ y", 2), ("1/0", 2)])
def test_parse_errors_report_byte_offsets(text, offset):
    with pytest.raises(ParseError) as info:
        parse(text)
    assert info.value.offset == offset


def test_offsets_count_bytes_not_characters():
    with pytest.raises(ParseError) as info:
        parse("x + é")
    assert info.value.offset == 4
    with pytest.raises(ParseError) as info:
        parse("é")
    assert info.value.offset == 0


def test_known_derivatives():
    assert diff(parse("x^3"), "x") is parse("3*x^2")
    assert diff(parse("sin(x)*y"), "x") is parse("y*cos(x)")
    assert diff(parse("log(x)"), "x") is parse("1/x")
    assert diff(parse("exp(2*x)"), "x") is parse("2*exp(2*x)")
    assert diff(parse("y"), "x") is ZERO


def test_substitution():
    e = substitute(parse("x^2 + y"), {"x": parse("a + 1"), "y": const(3)})
    assert is_identically_zero(e - parse("a^2 + 2*a + 4"))


def test_zero_test_separates_identities():
    assert is_identically_zero(parse("sin(x)^2 + cos(x)^2 - 1"))
    assert is_identically_zero(parse("(x + y)^2 - x^2 - 2*x*y - y^2"))
    assert not is_identically_zero(parse("(x + y)^2 - x^2 - y^2"))
    assert not is_identically_zero(parse("exp(x) - 1 - x"))


def test_exact_division_by_zero_is_reported():
    with pytest.raises(DivisionByZero):
        evaluate(parse("1/(x - 1)"), {"x": Fraction(1)})


def test_generated_kernel_matches_evaluate():
    exprs = [parse("x*sin(y)"), parse("exp(x)/(1 + y^2)")]
    src = generate_source(exprs, {"x": "a[0]", "y": "a[1]"}, fname="k", signature="a, out")
    k = compile_source(src, "k")
    got = k([0.7, 1.3], [0.0, 0.0])
    for g, e in zip(got, exprs):
        assert math.isclose(g, evaluate(e, {"x": 0.7, "y": 1.3}, exact=False), rel_tol=1e-14)
    f = lambdify(exprs, ["x", "y"])
    assert math.isclose(float(f(0.7, 1.3)[1]), got[1], rel_tol=1e-14)


@settings(max_examples=100, deadline=None)
@given(expressions, points)
def test_derivative_matches_finite_difference(text, point):
    e = parse(text)
    for name in ("x", "y", "z"):
        d = evaluate(diff(e, name), point, exact=False)
        h = 1e-6
        hi = evaluate(e, {**point, name: point[name] + h}, exact=False)
        lo = evaluate(e, {**point, name: point[name] - h}, exact=False)
        fd = (hi - lo) / (2 * h)
        scale = max(1.0, abs(d), abs(evaluate(e, point, exact=False)))
        assert abs(d - fd) <= 1e-5 * scale


@settings(max_examples=60, deadline=None)
@given(expressions)
def test_render_round_trips(text):
    e = parse(text)
    assert parse(render(e)) is e


def test_var_and_parse_agree():
    assert var("x") is parse("x")
