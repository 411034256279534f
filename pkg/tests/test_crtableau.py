import json

import numpy as np
import pytest

from crgeo.crtableau import (
    MAX_ABSORPTION_SIZE, JetPoint, NoNormalFormError, NotOnEquationError, PDESystem, RawTorsion,
    absorption_map, cr_tableau_test, first_order_normal_form, induced_complex_structure, normal_form_residual,
    normalized_torsion, plane_slope, raw_torsion, sample_point, second_level_solution_space,
    standard_complex_structure, transform_raw_torsion,
)
from crgeo.grassmann import ResourceLimitError, random_numeric_element

from samples import affine_system, cr_jet, cr_raw, random_jet, random_raw


def test_raw_torsion_flat():
    raw = raw_torsion(PDESystem.zero(2, 2), ([0, 0], [0, 0], [[0, 0], [0, 0]]))
    assert raw.norm() == 0
    assert raw.exact is not None and not any(raw.exact_vector())


def test_raw_torsion_linear_in_p():
    raw = raw_torsion(PDESystem(1, 1, [["p[1,1]"]]), ([0], [0], [[0]]))
    assert raw.D[0, 0, 0, 0] == 1
    assert np.count_nonzero(raw.vector()) == 1


def test_raw_torsion_zbar_coefficient():
    s = PDESystem(2, 1, [["zb[2]", "0"]])
    raw0 = raw_torsion(s, ([0, 0], [0], [[0, 0]]))
    raw1 = raw_torsion(s, ([1, 0], [0], [[0, 0]]))
    for raw in (raw0, raw1):
        assert raw.C_gb[0, 0, 1] == 1 and raw.C_gb[0, 1, 0] == 0


def test_raw_torsion_chain_terms():
    # dF/dw enters C_g through p and C_gb through F
    s = PDESystem(1, 1, [["w[1]"]])
    raw = raw_torsion(s, ([0], [0], [["1/2"]]))
    assert raw.C_r[0, 0, 0] == 1
    assert raw.C_g[0, 0, 0] == pytest.approx(0.5)


def test_symbolic_and_numeric_paths_agree(rng):
    s = PDESystem(2, 1, [["z[1]*zb[2]*p[1,1] + w[1]*pb[1,2]", "(1/3)*wb[1]^2 + i*z[2]*p[1,2]"]])
    exact_at = ([(1, 2), (-1, 3)], [(1, 1)], [[(1, 5), (2, -1)]])
    float_at = ([complex(*v) for v in exact_at[0]], [complex(*v) for v in exact_at[1]],
                [[complex(*v) for v in exact_at[2][0]]])
    a, b = raw_torsion(s, exact_at), raw_torsion(s, float_at)
    assert a.exact is not None and b.exact is None
    assert np.allclose(a.vector(), b.vector(), atol=1e-12)
    ev = np.array([float(x) for x in a.exact_vector()])
    assert np.allclose(ev, a.vector(), atol=1e-12)


def test_point_must_lie_on_equation():
    s = PDESystem(1, 1, [["p[1,1]^2"]])
    assert cr_tableau_test(s, ([0.1], [0], [[0.2]], [[0.04]])).cr_tableau
    with pytest.raises(NotOnEquationError):
        cr_tableau_test(s, ([0.1], [0], [[0.2]], [[0.3]]))


def test_system_rejects_unknown_symbols():
    with pytest.raises(ValueError):
        PDESystem(1, 1, [["P[1]"]])


def test_jetpoint_json_round_trip(rng):
    jet = random_jet(2, 1, rng)
    back = JetPoint.from_json(json.loads(json.dumps(jet.to_json())))
    for k in jet.dF:
        assert np.array_equal(jet.dF[k], back.dF[k])
    assert np.array_equal(jet.p, back.p) and np.array_equal(jet.F, back.F)


# ----------------------------------------------------------------------------
# absorption map


@pytest.mark.parametrize("n,d,residual", [(1, 1, 0), (2, 1, 8), (1, 2, 6), (2, 2, 52)])
def test_absorption_residual_dimension(n, d, residual):
    amap = absorption_map(n, d)
    assert amap.residual_dimension == residual
    assert amap.rank + residual == len(amap.matrix)


def test_absorption_residual_dimension_counts():
    # antisymmetric C_gb part + D trace-free over the roman pair + E trace-free over the greek pair
    for n, d in [(2, 1), (1, 2), (2, 2)]:
        count = 2 * (d * n * (n - 1) // 2 + (d * n * d * n - n * n) + (d * n * d * n - d * d))
        assert absorption_map(n, d).residual_dimension == count


def test_absorption_limit():
    with pytest.raises(ResourceLimitError):
        absorption_map(5, 2)
    assert MAX_ABSORPTION_SIZE >= 9


def test_image_vectors_normalize_to_zero(rng):
    amap = absorption_map(2, 1)
    M = amap.float_matrix()
    for _ in range(5):
        v = M @ rng.standard_normal(M.shape[1])
        inv = normalized_torsion(RawTorsion.from_vector(2, 1, v), amap, normalize_frame=False)
        assert inv.residual < 1e-10 * np.linalg.norm(v)


def test_projector_is_orthogonal():
    P = absorption_map(2, 1).projector()
    assert np.allclose(P @ P, P) and np.allclose(P, P.T)
    assert np.allclose(P @ absorption_map(2, 1).float_matrix(), 0, atol=1e-12)


# ----------------------------------------------------------------------------
# verdicts


@pytest.mark.parametrize("n,d", [(1, 1), (2, 1), (1, 2), (2, 2), (3, 1), (3, 3)])
def test_flat_system_exact_zero(n, d, rng):
    s = PDESystem.zero(n, d)
    z = [(int(rng.integers(-3, 4)), int(rng.integers(-3, 4))) for _ in range(n)]
    w = [(int(rng.integers(-3, 4)), 0) for _ in range(d)]
    p = [[(int(rng.integers(-3, 4)), int(rng.integers(-3, 4))) for _ in range(n)] for _ in range(d)]
    v = cr_tableau_test(s, (z, w, p))
    assert v.cr_tableau and v.exact_residual_squared == 0 and v.residual == 0


def test_trace_free_E_obstruction(rng):
    s = PDESystem(2, 1, [["k*pb[1,1]", "0"]], constants={"k": 0.3})
    for _ in range(5):
        v = cr_tableau_test(s, sample_point(2, 1, rng, 0.3))
        assert not v.cr_tableau
        assert v.norms["t_E"] > 0.1


def test_antisymmetric_zbar_obstruction():
    s = PDESystem(2, 1, [["zb[2]", "0"]])
    v = cr_tableau_test(s, ([1, 0], [0], [[0, 0]]))
    assert not v.cr_tableau
    t = v.invariants.t_gb
    assert abs(t[0, 0, 1]) > 0 and np.isclose(t[0, 0, 1], -t[0, 1, 0])


def test_invariant_relations(rng):
    for n, d in [(2, 1), (1, 2), (2, 2)]:
        raw = random_raw(n, d, rng)
        raw.D *= 0.2
        raw.E *= 0.2
        inv = normalized_torsion(raw)
        assert inv.frame_normalized
        assert np.allclose(inv.t_gb, -inv.t_gb.transpose(0, 2, 1), atol=1e-12)
        assert np.allclose(np.einsum("imiv->mv", inv.t_D), 0, atol=1e-12)
        assert np.allclose(np.einsum("imjm->ij", inv.t_E), 0, atol=1e-12)


def test_n1_d1_universality(rng):
    for _ in range(20):
        v = cr_tableau_test(random_jet(1, 1, rng))
        assert v.cr_tableau


@pytest.mark.parametrize("n,d", [(2, 1), (1, 2), (2, 2)])
def test_verdict_equivariance(n, d, rng):
    for make in (cr_raw, random_raw):
        raw = make(n, d, rng)
        moved = transform_raw_torsion(raw, random_numeric_element(2 * n, 2 * d, rng, scale=0.3))
        assert cr_tableau_test(raw).cr_tableau == cr_tableau_test(moved).cr_tableau
    assert cr_tableau_test(cr_raw(n, d, rng)).cr_tableau
    assert not cr_tableau_test(random_raw(n, d, rng)).cr_tableau


def test_tolerance_semantics(rng):
    v = cr_tableau_test(random_raw(2, 1, rng))
    assert v.cr_tableau == (v.residual <= v.tolerance)


# ----------------------------------------------------------------------------
# normal form oracle


def test_oracle_agrees(rng):
    for n, d in [(1, 1), (2, 1), (1, 2)]:
        for make in (cr_jet, random_jet):
            jet = make(n, d, rng)
            res, _, _ = normal_form_residual(jet)
            assert cr_tableau_test(jet).cr_tableau == (res <= 1e-8 * max(jet.norm(), 1.0))


def test_normal_form_flat_identity():
    nf = first_order_normal_form(PDESystem.zero(2, 1), ([0, 0], [0], [[0, 0]]))
    assert np.allclose(nf.L, np.eye(6)) and np.allclose(nf.Q, 0)


def test_normal_form_kills_symmetric_zbar_jet():
    s = PDESystem(2, 1, [["c*zb[2]", "c*zb[1]"]], constants={"c": "1/3"})
    v = cr_tableau_test(s, ([0, 0], [0], [[0, 0]]), with_witness=True)
    assert v.cr_tableau and v.witness is not None
    jet = v.witness.jet
    assert np.abs(jet.F).max() < 1e-10
    assert max(np.abs(a).max() for a in jet.dF.values()) < 1e-10


def test_normal_form_refused_when_obstructed():
    s = PDESystem(2, 1, [["zb[2]", "0"]])
    with pytest.raises(NoNormalFormError):
        first_order_normal_form(s, ([0, 0], [0], [[0, 0]]))


def test_affine_system_reproduces_jet(rng):
    jet = cr_jet(2, 1, rng)
    s = affine_system(jet)
    j2 = s.jet(jet.z, jet.w, jet.p)
    assert np.allclose(j2.F, jet.F, atol=1e-10)
    for k in jet.dF:
        assert np.allclose(j2.dF[k], jet.dF[k], atol=1e-10)


# ----------------------------------------------------------------------------
# induced complex structure


def test_induced_structure_flat():
    J = induced_complex_structure(PDESystem.zero(2, 1), ([0, 0], [0], [[0, 0]]))
    assert np.array_equal(J, standard_complex_structure(3))


def test_induced_structure_properties(rng):
    for n, d in [(1, 1), (2, 1), (1, 2), (2, 2)]:
        jet = cr_jet(n, d, rng)
        J = induced_complex_structure(jet)
        k = 2 * (n + d)
        assert np.allclose(J @ J, -np.eye(k), atol=1e-10)
        R = plane_slope(jet)
        plane = np.vstack([np.eye(2 * n), R])
        assert np.linalg.matrix_rank(np.hstack([plane, J @ plane]), tol=1e-8) == 2 * n


# ----------------------------------------------------------------------------
# second level


@pytest.mark.parametrize("n,d,dim", [(2, 2, 0), (3, 2, 0), (2, 3, 0), (2, 1, 9)])
def test_second_level_dimension(n, d, dim):
    assert second_level_solution_space(n, d).dimension == dim


def test_second_level_count_formula():
    n, d = 2, 1
    assert second_level_solution_space(n, d).dimension == n * (n + 1) // 2 * d * d + n * (n + 1) // 2 * n * d


def test_second_level_range():
    with pytest.raises(ValueError):
        second_level_solution_space(5, 1)
