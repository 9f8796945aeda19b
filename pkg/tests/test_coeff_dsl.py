import math

import numpy as np
import pytest

from coalflow.coeff_dsl import (
    DivisionByZero,
    ExpressionSyntaxError,
    NonPositiveDiffusivity,
    NotDifferentiable,
    NotFinite,
    NotPeriodic,
    Num,
    UnknownIdentifier,
    differentiate_x,
    evaluate_expr,
    make_field,
    parse_expression,
    to_text,
    validate_field,
)

from dsl_corpus import CORPUS, NONPERIODIC, SMOOTH


def test_corpus_has_fifty_members():
    assert len(CORPUS) == 50


def test_zero_parses_to_constant():
    assert parse_expression("0") == Num(0.0)


def test_sine_field_value():
    assert evaluate_expr(parse_expression("1 + 0.3*sin(2*pi*x)"), 0.0, 0.25) == pytest.approx(1.3)


def test_unclosed_call_reports_position():
    with pytest.raises(ExpressionSyntaxError) as exc:
        parse_expression("sin(")
    assert exc.value.position == 4


@pytest.mark.parametrize(
    "text, pos",
    [("1 +", 3), ("2 * * x", 4), ("(1", 2), ("1 2", 2), ("x $ 1", 2), ("sin(x, x)", 0), ("", 0)],
)
def test_syntax_errors_carry_positions(text, pos):
    with pytest.raises(ExpressionSyntaxError) as exc:
        parse_expression(text)
    assert exc.value.position == pos


def test_unknown_identifier():
    with pytest.raises(UnknownIdentifier):
        parse_expression("b*0 + 3")


def test_evaluation_examples():
    assert evaluate_expr(parse_expression("7"), 3.0, -1.0) == 7.0
    assert evaluate_expr(parse_expression("x - t"), 2.0, 5.0) == 3.0


def test_division_by_zero():
    with pytest.raises(DivisionByZero):
        evaluate_expr(parse_expression("1/(x-1)"), 0.0, 1.0)


def test_evaluation_broadcasts():
    e = parse_expression("t + 10*x")
    out = evaluate_expr(e, np.array([[0.0], [1.0]]), np.array([0.0, 0.5, 1.0]))
    assert out.shape == (2, 3)
    assert np.allclose(out, [[0, 5, 10], [1, 6, 11]])


@pytest.mark.parametrize("text", CORPUS)
def test_round_trip(text):
    e = parse_expression(text)
    printed = to_text(e)
    assert parse_expression(printed) == e
    assert to_text(parse_expression(printed)) == printed


def test_derivative_of_constant_in_x():
    assert differentiate_x(parse_expression("t*0 + 3")) == Num(0.0)


def test_derivative_of_sine_field():
    d = differentiate_x(parse_expression("1 + 0.3*sin(2*pi*x)"))
    assert evaluate_expr(d, 0.0, 0.0) == pytest.approx(0.6 * math.pi, rel=1e-14)
    xs = np.linspace(0, 1, 9)
    assert np.allclose(evaluate_expr(d, 0.0, xs), 0.6 * np.pi * np.cos(2 * np.pi * xs))


def test_abs_of_x_not_differentiable():
    with pytest.raises(NotDifferentiable):
        differentiate_x(parse_expression("abs(x)"))
    with pytest.raises(NotDifferentiable):
        differentiate_x(parse_expression("max(x, 0.5)"))


@pytest.mark.parametrize("text", CORPUS)
def test_symbolic_derivative_matches_central_difference(text):
    e = parse_expression(text)
    d = differentiate_x(e)
    t = 0.37
    xs = np.linspace(0.013, 0.987, 41)
    eps = 1e-5
    fd = (evaluate_expr(e, t, xs + eps) - evaluate_expr(e, t, xs - eps)) / (2 * eps)
    sym = evaluate_expr(d, t, xs)
    scale = np.maximum(np.abs(sym), 1.0)
    assert np.max(np.abs(fd - sym) / scale) <= 1e-6


def test_constant_field_bounds():
    f = make_field("1", "0")
    assert f.a_star == 1.0 and f.a_upper == 1.0 and f.b_upper == 0.0


def test_sine_field_bounds_against_grid_minimum():
    f = make_field("1+0.3*sin(2*pi*x)", "0")
    xs = np.arange(64) / 64
    oracle = 1 + 0.3 * np.sin(2 * np.pi * xs)
    assert f.a_star == pytest.approx(oracle.min(), abs=1e-12)
    assert f.a_upper == pytest.approx(oracle.max(), abs=1e-12)
    assert f.a_star == pytest.approx(0.7, abs=1e-12)


def test_x_is_not_periodic():
    with pytest.raises(NotPeriodic):
        make_field("x", "0")


@pytest.mark.parametrize("text", NONPERIODIC)
def test_rejects_nonperiodic_corpus(text):
    with pytest.raises(NotPeriodic):
        validate_field(parse_expression("1"), parse_expression(text))


@pytest.mark.parametrize("text", SMOOTH)
def test_accepts_periodic_corpus_as_drift(text):
    f = validate_field(parse_expression("1"), parse_expression(text), (0.0, 1.0))
    assert f.b_upper >= 0.0


def test_positivity_and_finiteness():
    with pytest.raises(NonPositiveDiffusivity):
        make_field("sin(2*pi*x)", "0")
    with pytest.raises(NotFinite):
        make_field("1", "1/(sin(2*pi*x))")
    with pytest.raises(NotFinite):
        make_field("exp(exp(exp(10)))", "0")


def test_reversed_field_has_reversal_drift():
    f = make_field("1 + 0.3*sin(2*pi*x) + 0.1*t", "cos(2*pi*x)*t", window=(0.0, 1.0))
    r = f.reversed()
    assert r.window == (-1.0, 0.0)
    for t, x in [(-0.3, 0.1), (-0.9, 0.77)]:
        assert r.a(t, x) == pytest.approx(f.a(-t, x))
        assert r.b(t, x) == pytest.approx(-f.b(-t, x) + 0.5 * f.a_prime(-t, x))


def test_lipschitz_estimate_of_sine():
    f = make_field("1 + 0.3*sin(2*pi*x)", "0")
    # grid difference quotients of a and a': near max |a'| = 0.6 pi at least, max |a''| at most
    assert 0.6 * np.pi * 0.99 < f.lipschitz_estimate <= 0.3 * (2 * np.pi) ** 2 * 1.001
