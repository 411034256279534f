import numpy as np
import pytest

from crgeo.crtableau import cr_tableau_test, normalized_torsion, raw_torsion
from crgeo.involution import solution_generality
from crgeo.legendre import (
    FibrationError, LeafChart, LegendreFibration, TransversalityError, induced_jet_exact, induced_system,
    perturb_jet, random_fibration, random_hypersurface_equation, second_level_invariants, verify_legendre,
)

F11 = LegendreFibration(2, [["Pb[1]", "0"], ["0", "0"]])


def test_verify_legendre():
    assert verify_legendre(LegendreFibration.flat(2)).zero
    assert verify_legendre(LegendreFibration(1, [["Pb[1]"]])).zero
    bad = LegendreFibration(1, [["zb[1]"]], validate=False)
    assert not verify_legendre(bad).zero


def test_validation():
    with pytest.raises(FibrationError, match="holomorphic"):
        LegendreFibration(1, [["zb[1]"]])
    with pytest.raises(FibrationError, match="symmetric"):
        LegendreFibration(2, [["0", "P[1]"], ["0", "0"]])
    with pytest.raises(FibrationError):
        LegendreFibration(1, [["w[1]"]])


def test_json_round_trip():
    fib = LegendreFibration.from_json({"n": 2, "f": [["Pb[1]*z[2]", "P[2]"], ["P[2]", "0"]]})
    again = LegendreFibration.from_json(fib.to_json())
    assert again.f == fib.f


def test_leaf_chart_contact():
    chart = LeafChart(F11, 0.1, (0.2, -0.1j))
    h = 1e-6
    z0 = np.array([0.1 + 0.05j, -0.2])
    w0, _, p0 = chart(z0)
    for k in range(2):
        dz = np.zeros(2, complex)
        dz[k] = h
        dw = (chart(z0 + dz)[0] - chart(z0 - dz)[0]) / (2 * h)
        assert abs(dw - p0[k]) < 1e-8


def test_flat_fibration_gives_cr_equations():
    jet = induced_system(LegendreFibration.flat(2), (0.1, [0.2, 0.1j]), [0.1, 0.2])
    assert np.all(jet.F == 0)
    assert all(np.all(v == 0) for v in jet.dF.values())


def test_fd_matches_symbolic(rng):
    for _ in range(3):
        fib = random_fibration(2, rng, degree=2)
        P0 = 0.2 * (rng.standard_normal(2) + 1j * rng.standard_normal(2))
        z0 = 0.2 * (rng.standard_normal(2) + 1j * rng.standard_normal(2))
        a = induced_system(fib, (0.1, P0), z0)
        b = induced_jet_exact(fib, (0.1, P0), z0)
        assert np.allclose(a.F, b.F, atol=1e-12) and np.allclose(a.p, b.p, atol=1e-12)
        for k in a.dF:
            assert np.allclose(a.dF[k], b.dF[k], atol=1e-7)


def test_rational_point_fd_vs_symbolic():
    fib = LegendreFibration(2, [["z[1]*Pb[2] + (1/2)*P[1]*Pb[1]", "(1/3)*Pb[2]^2"],
                                ["(1/3)*Pb[2]^2", "i*z[2]*P[1]"]])
    at, z0 = (0.25, [0.5, -0.25j]), [0.125, 0.25 + 0.125j]
    a, b = induced_system(fib, at, z0), induced_jet_exact(fib, at, z0)
    for k in a.dF:
        assert np.allclose(a.dF[k], b.dF[k], atol=1e-7)


def test_transversality_failure():
    # f = -P/2 gives p = P (1 - z): the leaf map degenerates at z = 1
    fib = LegendreFibration(1, [["-(1/2)*P[1]"]])
    induced_system(fib, (0, [0.5]), [0.3])
    with pytest.raises(TransversalityError):
        induced_system(fib, (0, [0.5]), [1.0])


def test_f11_pbar_stream_all_cr_and_perturbations_rejected(rng):
    samples = list(random_hypersurface_equation(2, seed=1, samples=20, fibration=F11))
    assert all(s.verdict.cr_tableau for s in samples)
    assert all(s.symmetric for s in samples)
    assert any(np.abs(s.invariants["t_Pbar"]).max() > 0.1 for s in samples)
    for s in samples:
        assert not cr_tableau_test(perturb_jet(s.jet, rng, 0.1)).cr_tableau


def test_random_stream_all_cr():
    for s in random_hypersurface_equation(2, seed=3, samples=15, degree_bound=2):
        assert s.verdict.cr_tableau and s.symmetric
        t = s.invariants["t_Pbar"]
        assert np.allclose(t, t.transpose(1, 0, 2), atol=1e-8)


def test_flat_stream_invariants_zero():
    for s in random_hypersurface_equation(2, seed=0, samples=10, fibration=LegendreFibration.flat(2)):
        assert s.verdict.cr_tableau
        assert np.all(s.invariants["t_Pbar"] == 0) and np.all(s.invariants["t_cbar"] == 0)


def test_holomorphic_fibration_has_zero_torsion():
    fib = LegendreFibration(2, [["z[1]*P[2] + P[1]^2", "z[2]"], ["z[2]", "P[1]*P[2]"]])
    for s in random_hypersurface_equation(2, seed=2, samples=5, fibration=fib):
        inv = normalized_torsion(raw_torsion(s.jet))
        assert inv.residual == 0
        assert raw_torsion(s.jet).norm() < 1e-12


def test_legendre_solution_generality():
    s = next(random_hypersurface_equation(2, seed=4, samples=1, fibration=F11))
    assert solution_generality(s.jet) == (2, 2)


def test_second_level_invariants_f11():
    inv = second_level_invariants(F11, (0, [0.1, 0.2]), [0.3, 0.1])
    t = inv["t_Pbar"]
    # H_11 = 2 Pbar_1, so only the (1,1) entry has a Pbar_1 derivative
    expected = np.zeros((2, 2, 2))
    expected[0, 0, 0] = 2
    assert np.allclose(t, expected)


def test_stream_requires_n2():
    with pytest.raises(ValueError):
        next(random_hypersurface_equation(1))
