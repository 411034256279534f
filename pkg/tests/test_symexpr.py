from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crgeo.symexpr import (
    DifferentiationError, ExprSyntaxError, F, IndexRangeError, ScalarExpr, UnboundSymbolError,
    UnknownIdentifierError, as_expr, conjugate, differentiate, evaluate, evaluate_exact, p, pb,
    parse_expr, w, wb, z, zb,
)

from strategies import D, N, coords, exprs


def test_parse_monomial():
    e = parse_expr("p[1,1]*zb[2]", 2, 1)
    assert e == as_expr(p(1, 1)) * as_expr(zb(2))
    assert e.n_terms() == 1
    assert e.coefficient(((p(1, 1), 1), (zb(2), 1))) == (1, 0)


def test_parse_conjugation_rule():
    e = parse_expr("(1/2)*i*w[1] + conj((1/2)*i*w[1])", 1, 1)
    expected = as_expr(w(1)).scale(0, Fraction(1, 2)) + as_expr(wb(1)).scale(0, Fraction(-1, 2))
    assert e == expected


def test_parse_ring_axioms():
    assert parse_expr("z[1]^2 - z[1]*z[1]", 1, 1).is_zero()


@pytest.mark.parametrize("text,err", [
    ("z[1] +* z[2]", ExprSyntaxError),
    ("z[3]", IndexRangeError),
    ("p[2,1]", IndexRangeError),
    ("q[1]", UnknownIdentifierError),
])
def test_parse_errors(text, err):
    with pytest.raises(err):
        parse_expr(text, 2, 1)


def test_syntax_error_position():
    with pytest.raises(ExprSyntaxError) as info:
        parse_expr("z[1] + )", 1, 1)
    assert info.value.position == 7


def test_differentiate_polynomial():
    e = as_expr(z(1)) ** 2 * as_expr(zb(1))
    assert differentiate(e, z(1)) == as_expr(z(1)) * as_expr(zb(1)) * 2


def test_differentiate_jet_extends_chain():
    d1 = differentiate(as_expr(F(1, 1)), zb(2))
    (sym,) = d1.free_symbols()
    assert sym.kind == "jet" and sym.chain == (zb(2),)
    a = differentiate(differentiate(as_expr(F(1, 1)), z(2)), z(1))
    b = differentiate(differentiate(as_expr(F(1, 1)), z(1)), z(2))
    assert a == b


def test_differentiate_by_jet_rejected():
    with pytest.raises(DifferentiationError):
        differentiate(as_expr(z(1)), F(1, 1))


def test_conjugate_examples():
    assert conjugate(as_expr(z(1)).scale(0, 1)) == as_expr(zb(1)).scale(0, -1)
    assert conjugate(as_expr(p(1, 1))) == as_expr(pb(1, 1))


def test_evaluate_examples():
    assert evaluate(as_expr(z(1)) + as_expr(zb(1)), {z(1): 2 + 3j}) == pytest.approx(4)
    assert evaluate(ScalarExpr(), {}) == 0
    with pytest.raises(UnboundSymbolError):
        evaluate(as_expr(z(1)), {})


def test_evaluate_matches_exact(rng):
    syms = [z(1), z(2), w(1), p(1, 2)]
    for _ in range(20):
        e = ScalarExpr()
        for _ in range(6):
            term = ScalarExpr.const(Fraction(int(rng.integers(-9, 10)), int(rng.integers(1, 7))),
                                    Fraction(int(rng.integers(-9, 10)), int(rng.integers(1, 7))))
            for _ in range(int(rng.integers(0, 5))):
                term = term * as_expr(syms[int(rng.integers(0, 4))] if rng.random() < 0.6
                                      else syms[int(rng.integers(0, 4))].bar())
            e = e + term
        vals = {s: (Fraction(int(rng.integers(-5, 6)), 3), Fraction(int(rng.integers(-5, 6)), 4)) for s in syms}
        re, im = evaluate_exact(e, vals)
        num = evaluate(e, {s: complex(float(a), float(b)) for s, (a, b) in vals.items()})
        exact = complex(float(re), float(im))
        assert abs(num - exact) <= 1e-12 * max(1.0, abs(exact))


def test_exact_arithmetic_has_no_floats():
    e = parse_expr("(1/3)*z[1] + (1/3)*z[1] + (1/3)*z[1]", 1, 1)
    assert e == as_expr(z(1))


# ----------------------------------------------------------------------------
# property suites (>= 500 cases each)


@settings(max_examples=500)
@given(exprs)
def test_parser_round_trip(e):
    assert parse_expr(str(e), N, D) == e


@settings(max_examples=500)
@given(exprs)
def test_conjugation_involution(e):
    assert conjugate(conjugate(e)) == e


@settings(max_examples=500)
@given(exprs, exprs, coords)
def test_leibniz(a, b, s):
    assert differentiate(a * b, s) == differentiate(a, s) * b + a * differentiate(b, s)


@settings(max_examples=300)
@given(exprs, coords)
def test_conjugation_commutes_with_differentiation(e, s):
    assert conjugate(differentiate(e, s)) == differentiate(conjugate(e), s.bar())


@settings(max_examples=300)
@given(st.lists(exprs, min_size=2, max_size=5), st.randoms(use_true_random=False))
def test_canonical_form_independent_of_association(terms, rnd):
    left = ScalarExpr()
    for t in terms:
        left = left + t
    shuffled = list(terms)
    rnd.shuffle(shuffled)
    right = ScalarExpr()
    for t in reversed(shuffled):
        right = t + right
    assert left == right and str(left) == str(right)
