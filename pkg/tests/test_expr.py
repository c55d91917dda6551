"""Tests for the generating-function DSL parser and evaluator."""

import numpy as np
import pytest

from starquant import JetDomainError, ParseError, PhasePoint, UnknownVariable
from starquant.expr import (
    Add,
    Call,
    Const,
    Div,
    Mul,
    Neg,
    Pow,
    Sub,
    Var,
    eval_jet,
    evaluate,
    parse,
    pretty,
)
from oracles import check_jet_against_fd


def test_accepts_each_production():
    parse("x1 + p1 - 2", 1)
    parse("2*x1/p1", 1)
    parse("x1^2", 1)
    parse("-x1", 1)
    parse("--x1", 1)
    parse("(x1)", 1)
    parse("sin(x1)", 1)
    parse("0.5", 1)
    parse("1e3", 1)
    parse(".25*x1", 1)
    parse("y2", 2, bundle="tangent")


def test_rejects_each_production():
    with pytest.raises(ParseError):
        parse("x1 +", 1)
    with pytest.raises(ParseError):
        parse("2**x1", 1)
    with pytest.raises(ParseError):
        parse("x1^p1", 1)
    with pytest.raises(ParseError):
        parse("-", 1)
    with pytest.raises(ParseError):
        parse("(x1", 1)
    with pytest.raises(ParseError):
        parse("sin x1", 1)
    with pytest.raises(ParseError):
        parse(".", 1)
    with pytest.raises(ParseError):
        parse("", 1)
    with pytest.raises(ParseError):
        parse("x1 p1", 1)


def test_parse_error_reports_position():
    with pytest.raises(ParseError) as exc:
        parse("x1 + + p1", 1)
    assert exc.value.offset == 5
    assert "+" in exc.value.found
    with pytest.raises(ParseError) as exc:
        parse("x1 +", 1)
    assert exc.value.offset == 4
    assert exc.value.found == "end of input"


def test_unknown_variables():
    with pytest.raises(UnknownVariable) as exc:
        parse("p1^2 + q", 1)
    assert exc.value.name == "q"
    assert exc.value.offset == 7
    with pytest.raises(UnknownVariable):
        parse("p3", 2)
    with pytest.raises(UnknownVariable):
        parse("y1", 1, bundle="cotangent")
    with pytest.raises(UnknownVariable):
        parse("p1", 1, bundle="tangent")
    with pytest.raises(UnknownVariable):
        parse("x0", 1)
    with pytest.raises(UnknownVariable):
        parse("sinh(x1)", 1)


def test_slot_resolution():
    ast = parse("0.5*(p1^2+p2^2)", 2)
    fibers = set()

    def collect(nd):
        if isinstance(nd, Var):
            fibers.add((nd.name, nd.slot))
        for field in getattr(nd, "__dataclass_fields__", {}):
            child = getattr(nd, field)
            if hasattr(child, "__dataclass_fields__"):
                collect(child)

    collect(ast)
    assert fibers == {("p1", 2), ("p2", 3)}


def test_structure_of_nested_call():
    ast = parse("0.5*exp(2*x1)*p1^2", 1)
    expected = Mul(
        Mul(Const(0.5), Call("exp", Mul(Const(2.0), Var("x1", 0)))),
        Pow(Var("p1", 1), 2.0),
    )
    assert ast == expected


def test_precedence():
    x1, p1 = Var("x1", 0), Var("p1", 1)
    assert parse("-x1^2", 1) == Neg(Pow(x1, 2.0))
    assert parse("2+x1*p1", 1) == Add(Const(2.0), Mul(x1, p1))
    assert parse("x1 - p1 - 2", 1) == Sub(Sub(x1, p1), Const(2.0))
    assert parse("x1/p1/2", 1) == Div(Div(x1, p1), Const(2.0))
    assert parse("x1^2^3", 1) == Pow(x1, 8.0)


def test_pretty_print_fixed_point():
    sources = [
        "0.5*(p1^2+p2^2)",
        "-(x1+p1)^2*3 - sin(x2)/(2-p2)",
        "0.5*exp(2*x1)*p1^2",
        "x1 - (p1 - x2) - p2^2",
        "sqrt(1+x1^2)*log(2+p1^2) / (x2*p2 + 4)",
        "--x1 + -p1*x2",
        "1e3*x1^0.5",
    ]
    for src in sources:
        ast = parse(src, 2)
        text = pretty(ast)
        assert parse(text, 2) == ast, src


def test_eval_polynomial_exact():
    ast = parse("x1*p1", 1)
    jet = eval_jet(ast, PhasePoint((2.0,), (3.0,)), 2)
    assert jet.value == 6.0
    assert jet.derivative((1, 0)) == 3.0
    assert jet.derivative((0, 1)) == 2.0
    assert jet.derivative((1, 1)) == 1.0


def test_eval_quadratic_hessian():
    ast = parse("0.5*(p1^2+p2^2)", 2)
    jet = eval_jet(ast, PhasePoint((0.4, -1.0), (0.3, 2.0)), 3)
    for a in range(2):
        for b in range(2):
            mono = [0, 0, 0, 0]
            mono[2 + a] += 1
            mono[2 + b] += 1
            assert jet.derivative(mono) == pytest.approx(1.0 if a == b else 0.0)
    # cubic coefficients of a quadratic are exactly zero
    assert all(
        abs(jet.coefficient(m)) == 0.0 for m in jet.space.monos if sum(m) == 3
    )


def test_eval_matches_finite_differences():
    ast = parse("0.5*exp(2*x1)*p1^2", 1)
    pt = PhasePoint((0.1,), (0.7,))
    jet = eval_jet(ast, pt, 4)

    def f(v):
        return 0.5 * np.exp(2 * v[0]) * v[1] ** 2

    check_jet_against_fd(jet, f, pt.as_array(), max_order=3, tol=1e-6)


def test_scalar_evaluation():
    ast = parse("sqrt(1+x1^2)*log(2+p1^2) / (x1*p1 + 4)", 1)
    x, p = 0.3, -0.8
    got = evaluate(ast, [x, p])
    want = np.sqrt(1 + x**2) * np.log(2 + p**2) / (x * p + 4)
    assert got == pytest.approx(want, rel=1e-14)


def test_scalar_domain_errors():
    with pytest.raises(JetDomainError):
        evaluate(parse("1/x1", 1), [0.0, 1.0])
    with pytest.raises(JetDomainError):
        evaluate(parse("log(x1)", 1), [-1.0, 0.0])
    with pytest.raises(JetDomainError):
        evaluate(parse("x1^0.5", 1), [-1.0, 0.0])


def test_jet_domain_errors_propagate():
    ast = parse("log(x1)", 1)
    with pytest.raises(JetDomainError):
        eval_jet(ast, PhasePoint((-1.0,), (0.0,)), 2)
    ast = parse("1/p1", 1)
    with pytest.raises(JetDomainError):
        eval_jet(ast, PhasePoint((1.0,), (0.0,)), 2)
