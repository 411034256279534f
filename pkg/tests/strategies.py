"""Hypothesis strategies for random expressions and forms."""

from hypothesis import strategies as st

from crgeo.symexpr import F, P, Pb, ScalarExpr, as_expr, p, pb, w, wb, z, zb

N, D = 2, 2

ATOMS = [z(1), z(2), zb(1), zb(2), w(1), w(2), wb(1), wb(2), p(1, 1), p(2, 2), pb(1, 2), pb(2, 1),
         P(1), Pb(2), F(1, 1), F(2, 2)]
COORDS = [s for s in ATOMS if s.kind != "jet"]

coefficients = st.tuples(st.integers(-5, 5), st.integers(1, 4), st.integers(-5, 5), st.integers(1, 4))


@st.composite
def constants(draw):
    a, b, c, d = draw(coefficients)
    from fractions import Fraction
    return ScalarExpr.const(Fraction(a, b), Fraction(c, d))


atoms = st.sampled_from(ATOMS).map(as_expr) | constants()


def _combine(children):
    return st.one_of(
        st.tuples(children, children).map(lambda t: t[0] + t[1]),
        st.tuples(children, children).map(lambda t: t[0] - t[1]),
        st.tuples(children, children).map(lambda t: t[0] * t[1]),
        children.map(lambda e: -e),
    )


exprs = st.recursive(atoms, _combine, max_leaves=8)
coords = st.sampled_from(COORDS)
