import numpy as np
import pytest

from crgeo.crtableau import PDESystem
from crgeo.involution import (
    NotCRTableauError, Tableau, cartan_characters, cr_tableau, hypersurface_moduli_generality, prolongation,
    solution_generality, system_tableau,
)
from crgeo.symexpr import mpq


def test_prolongation_full_hom():
    t = Tableau(1, 1, [np.array([[mpq(1)]], dtype=object)])
    assert prolongation(t)[0] == 1


@pytest.mark.parametrize("n,d,dim", [(1, 1, 2), (2, 1, 6)])
def test_prolongation_cr(n, d, dim):
    assert prolongation(cr_tableau(n, d))[0] == dim


def test_characters_examples():
    r = cartan_characters(cr_tableau(1, 1))
    assert r.characters == [2, 0] and r.involutive
    r = cartan_characters(cr_tableau(2, 1))
    assert r.characters == [2, 2, 0, 0] and r.involutive and r.prolongation_dim == 6
    r = cartan_characters(Tableau.zero(3, 2))
    assert r.characters == [0, 0, 0] and r.involutive


@pytest.mark.parametrize("n", [1, 2, 3])
@pytest.mark.parametrize("d", [1, 2, 3])
def test_cr_tableaux_involutive(n, d):
    r = cartan_characters(cr_tableau(n, d))
    assert r.involutive
    assert r.characters == [2 * d] * n + [0] * n
    assert r.generality == (2 * d, n)


def test_character_invariants(rng):
    for _ in range(10):
        a, b, k = int(rng.integers(2, 5)), int(rng.integers(1, 4)), int(rng.integers(1, 6))
        basis = [rng.integers(-2, 3, size=(b, a)).astype(float) for _ in range(k)]
        try:
            t = Tableau(a, b, basis)
        except ValueError:
            continue
        r = cartan_characters(t)
        assert all(x >= y for x, y in zip(r.characters, r.characters[1:]))
        assert sum(r.characters) == t.dim
        assert r.prolongation_dim <= sum((j + 1) * s for j, s in enumerate(r.characters))


def test_characters_seed_independent():
    reports = {tuple(cartan_characters(cr_tableau(2, 2), seed=s).characters) for s in range(5)}
    assert len(reports) == 1


def test_dependent_basis_rejected():
    m = np.ones((2, 2))
    with pytest.raises(ValueError):
        Tableau(2, 2, [m, 2 * m])


@pytest.mark.parametrize("n", [1, 2])
def test_solution_generality_flat(n):
    s = PDESystem.zero(n, 1)
    assert solution_generality(s, ([0] * n, [0], [[0] * n])) == (2, n)


def test_solution_generality_requires_cr():
    s = PDESystem(2, 1, [["zb[2]", "0"]])
    with pytest.raises(NotCRTableauError):
        solution_generality(s, ([1, 0], [0], [[0, 0]]))


def test_system_tableau_of_flat_is_cr():
    t = system_tableau(PDESystem.zero(2, 1), ([0, 0], [0], [[0, 0]]))
    assert t.dim == cr_tableau(2, 1).dim


def test_hypersurface_moduli_controls():
    full = hypersurface_moduli_generality(2)
    flat = hypersurface_moduli_generality(2, zero_torsion=True)
    broken = hypersurface_moduli_generality(2, drop_symmetry=True)
    assert flat.report.dim < full.report.dim
    assert flat.generality < full.generality
    assert broken.report.characters != full.report.characters
    assert full.report.involutive


def test_hypersurface_moduli_reports_mismatch_verbatim():
    rep = hypersurface_moduli_generality(2)
    assert rep.expected == (2, 5)
    assert rep.matches == (tuple(rep.generality) == (2, 5))
    js = rep.to_json()
    assert js["generality"] == list(rep.generality) and js["expected"] == [2, 5]
