import numpy as np
import pytest

from crgeo.extalg import identity_matrix, mat_mul, wedge
from crgeo.grassmann import (
    torsion_from_structure,
    PROLONGATION_ENTRIES, GrassmannChart, ResourceLimitError, adapted_coframe, generic_group_element,
    group_matrix, identity_element, induced_coframe_matrix, inverse_matrix_blocks, normalizing_coordinates,
    numeric_group_matrix, numeric_inverse_blocks, random_numeric_element, soldering_form, torsion_scalar,
    verify_prolongation_table, verify_structure_equations,
)
from crgeo.grassmann import numeric_torsion
from crgeo.symexpr import evaluate


@pytest.mark.parametrize("n,d", [(1, 1), (2, 1), (1, 2), (2, 2)])
def test_structure_equations_real(n, d):
    sol = verify_structure_equations(n, d)
    assert sol.residual_zero and sol.symmetric


def test_structure_equations_complex_small():
    sol = verify_structure_equations(1, 1, "complex")
    assert sol.residual_zero and sol.symmetric


def test_structure_ablation_leaves_residual():
    sol = verify_structure_equations(2, 1, drop=("rgr",))
    assert not sol.residual_zero
    bad = [r for r in sol.residuals.values() if not r.is_zero()]
    assert bad and all(r.degree == 2 for r in bad)


def test_structure_resource_guard():
    with pytest.raises(ResourceLimitError):
        verify_structure_equations(4, 1)


def test_adapted_coframe_real_n1():
    chart = GrassmannChart(1, 1)
    basis = adapted_coframe(chart)
    (I,), (M,) = chart.roman, chart.greek
    assert basis.names == ("eta^r1", "eta^g1", "eta^r1_g1")
    d_eta = basis.gen("eta^r1").d()
    assert d_eta == -wedge(basis.gen("eta^r1_g1"), basis.gen("eta^g1"))


def test_adapted_coframe_complex():
    chart = GrassmannChart(2, 1, "complex")
    basis = adapted_coframe(chart)
    # eta^i, eta^mu, eta^i_mu, eta^i_mubar and their conjugates
    assert len(basis) == 2 * (1 + 2 + 2 + 2)
    I = chart.roman[0]
    expected = basis.zero(2)
    for M in chart.greek:
        expected = expected - wedge(basis.gen(chart.eta_name(("p", I, M))), basis.gen(chart.eta_name(("g", M))))
    assert basis.gen(chart.eta_name(("r", I))).d() == expected
    barred = [M for M in chart.greek if M.barred]
    assert len(barred) == 2


def test_soldering_identity():
    chart = GrassmannChart(2, 1)
    basis = adapted_coframe(chart)
    omega = soldering_form(chart, identity_element(chart), basis)
    assert [w for w in omega] == [basis.gen(chart.eta_name(s)) for s in chart.slots]


@pytest.mark.parametrize("n,d", [(1, 1), (2, 1), (1, 2)])
def test_group_matrix_matches_numeric(n, d, rng):
    chart = GrassmannChart(n, d)
    g = generic_group_element(chart)
    sym = group_matrix(g)
    R, G = chart.roman, chart.greek
    for _ in range(3):
        vals = {s: float(rng.uniform(0.5, 1.5)) for s in g.parameters}
        ev = lambda e: evaluate(e, vals).real  # noqa: E731
        blocks = {
            "rr": np.array([[ev(g.rr[I, J]) for J in R] for I in R]),
            "gr": np.array([[ev(g.gr[M, J]) for J in R] for M in G]),
            "gg": np.array([[ev(g.gg[M, N]) for N in G] for M in G]),
            "rgr": np.array([[[ev(g.rgr[I, M, J]) for J in R] for M in G] for I in R]),
            "rgg": np.array([[[ev(g.rgg[I, M, N]) for N in G] for M in G] for I in R]),
        }
        num = np.array([[ev(x) for x in row] for row in sym])
        assert np.allclose(num, numeric_group_matrix(blocks), atol=1e-12, rtol=1e-12)


@pytest.mark.parametrize("n,d", [(1, 1), (2, 1)])
def test_symbolic_inverse(n, d):
    chart = GrassmannChart(n, d)
    g = generic_group_element(chart)
    prod = mat_mul(group_matrix(g), inverse_matrix_blocks(g))
    assert prod == identity_matrix(chart.size)


def test_numeric_inverse_identities(rng):
    for n, d in [(1, 1), (2, 1), (2, 2), (3, 2)]:
        b = random_numeric_element(n, d, rng)
        inv = numeric_inverse_blocks(b)
        prod = numeric_group_matrix(b) @ numeric_group_matrix(inv)
        assert np.allclose(prod, np.eye(prod.shape[0]), atol=1e-10)


@pytest.mark.parametrize("n,d", [(1, 1), (2, 1), (1, 2), (2, 2)])
def test_torsion_vanishes_on_reduced_group(n, d):
    chart = GrassmannChart(n, d)
    t = torsion_scalar(chart, generic_group_element(chart))
    assert all(v.is_zero() for v in t.values())


def test_torsion_off_reduced_group():
    chart = GrassmannChart(2, 1)
    t = torsion_scalar(chart, generic_group_element(chart, constrained=False))
    assert any(not v.is_zero() for v in t.values())
    for (I, M, N), v in t.items():
        assert v == -t[I, N, M]
    chart1 = GrassmannChart(1, 1)
    assert all(v.is_zero() for v in torsion_scalar(chart1, generic_group_element(chart1, False)).values())


def test_numeric_torsion(rng):
    b = random_numeric_element(2, 1, rng)
    assert np.abs(numeric_torsion(b)).max() < 1e-12
    b = random_numeric_element(2, 1, rng, constrained=False)
    assert np.abs(numeric_torsion(b)).max() > 1e-3


@pytest.mark.parametrize("n,d", [(1, 1), (2, 1), (1, 2), (2, 2)])
def test_prolongation_table(n, d):
    rep = verify_prolongation_table(n, d)
    assert rep.residual_zero and rep.discrepant == []


def test_prolongation_fault_named():
    rep = verify_prolongation_table(2, 1, faults={"p^ms_nk": -1})
    assert not rep.residual_zero
    assert rep.discrepant == ["p^ms_nk"]


def test_prolongation_every_fault_detected():
    for entry in PROLONGATION_ENTRIES:
        nd = (1, 2) if entry in ("p^i_jk", "p^m_jk", "p^i_mjk") else (2, 1)
        rep = verify_prolongation_table(*nd, faults={entry: -1})
        assert not rep.residual_zero, entry
        assert entry in rep.discrepant


def test_transitivity_construction(rng):
    for n, d in [(1, 1), (2, 1), (2, 2)]:
        b = random_numeric_element(n, d, rng, scale=0.3)
        J = induced_coframe_matrix(normalizing_coordinates(b), n, d)
        assert np.allclose(J, numeric_group_matrix(b), atol=1e-8)


def test_transitivity_fails_off_reduced_group(rng):
    b = random_numeric_element(2, 1, rng, constrained=False, scale=0.3)
    J = induced_coframe_matrix(normalizing_coordinates(b), 2, 1)
    assert not np.allclose(J, numeric_group_matrix(b), atol=1e-6)


def test_coframe_unimodular(rng):
    # eta = (dy - p dx, dx, dp) is unit triangular in (dy, dx, dp)
    for n, d in [(1, 1), (2, 1), (2, 2)]:
        p = rng.standard_normal((d, n))
        size = d + n + d * n
        m = np.eye(size)
        m[:d, d:d + n] = -p
        assert np.isclose(np.linalg.det(m), 1.0)


@pytest.mark.parametrize("n,d", [(1, 1), (2, 1), (2, 2), (3, 1)])
def test_torsion_dual_route(n, d):
    chart = GrassmannChart(n, d)
    closed = torsion_scalar(chart, generic_group_element(chart, constrained=False))
    solved = torsion_from_structure(n, d)
    assert solved.pop("clean")
    assert all(solved[k] == v for k, v in closed.items())
