"""Random jets for the decision-procedure tests.

CR samples are flat torsion (no vertical part, symmetric ``C_gb``) moved by a
random structure-group element close to the identity; the least-squares
normal-form oracle is local, so the group scale is kept small.
"""

import numpy as np

from crgeo.crtableau import JetPoint, PDESystem, RawTorsion, jet_from_raw, transform_raw_torsion
from crgeo.grassmann import random_numeric_element

GROUP_SCALE = 0.12


def cgauss(rng, scale, *shape):
    return scale * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


def cr_raw(n, d, rng, scale=0.3, group_scale=GROUP_SCALE):
    Cgb = cgauss(rng, scale, d, n, n)
    Cgb = Cgb + Cgb.transpose(0, 2, 1)
    zero = np.zeros((d, n, d, n), complex)
    raw = RawTorsion(n, d, cgauss(rng, scale, d, n, d), cgauss(rng, scale, d, n, d), cgauss(rng, scale, d, n, n),
                     Cgb, zero, zero.copy())
    return transform_raw_torsion(raw, random_numeric_element(2 * n, 2 * d, rng, scale=group_scale))


def random_raw(n, d, rng, scale=0.2):
    shapes = [(d, n, d), (d, n, d), (d, n, n), (d, n, n), (d, n, d, n), (d, n, d, n)]
    return RawTorsion(n, d, *[cgauss(rng, scale, *s) for s in shapes])


def jet_for(raw, rng):
    return jet_from_raw(raw, cgauss(rng, 0.2, raw.d, raw.n), cgauss(rng, 0.2, raw.d, raw.n),
                        cgauss(rng, 0.2, raw.n), cgauss(rng, 0.2, raw.d))


def cr_jet(n, d, rng):
    return jet_for(cr_raw(n, d, rng), rng)


def random_jet(n, d, rng):
    return jet_for(random_raw(n, d, rng), rng)


def affine_system(jet: JetPoint) -> PDESystem:
    """A polynomial system, affine in all arguments, whose first jet at the
    jet's point is ``jet`` (coefficients rounded to rationals)."""
    from fractions import Fraction

    from crgeo.symexpr import ScalarExpr, as_expr, p, pb, w, wb, z, zb

    n, d = jet.n, jet.d

    def const(v):
        return ScalarExpr.const(Fraction(float(v.real)).limit_denominator(10 ** 12),
                                Fraction(float(v.imag)).limit_denominator(10 ** 12))

    def shifted(sym, v):
        return as_expr(sym) - const(v)

    F = []
    for i in range(d):
        row = []
        for m in range(n):
            e = const(jet.F[i, m])
            for a in range(n):
                e = e + const(jet.dF["z"][i, m, a]) * shifted(z(a + 1), jet.z[a])
                e = e + const(jet.dF["zb"][i, m, a]) * shifted(zb(a + 1), np.conj(jet.z[a]))
            for j in range(d):
                e = e + const(jet.dF["w"][i, m, j]) * shifted(w(j + 1), jet.w[j])
                e = e + const(jet.dF["wb"][i, m, j]) * shifted(wb(j + 1), np.conj(jet.w[j]))
                for a in range(n):
                    e = e + const(jet.dF["p"][i, m, j, a]) * shifted(p(j + 1, a + 1), jet.p[j, a])
                    e = e + const(jet.dF["pb"][i, m, j, a]) * shifted(pb(j + 1, a + 1), np.conj(jet.p[j, a]))
            row.append(e)
        F.append(row)
    return PDESystem(n, d, F)
