"""The Cauchy-Riemann tableau test for systems ``dw/dzbar = F``.

A system of ``d`` complex functions ``w`` of ``n`` complex variables ``z``

    p^i_{mu-bar} = F^i_{mu-bar}(z, zbar, w, wbar, p, pbar),   p^i_mu = dw^i/dz^mu,

has Cauchy-Riemann tableau at a point when some adapted frame makes its
first-order data agree with the flat system ``F = 0``.  In the adapted coframe
``eta`` of the plane bundle the equation reads

    eta^i_{mu-bar} = C_r eta^j + C_rb eta^{j-bar} + C_g eta^nu + C_gb eta^{nu-bar}
                     + D eta^j_nu + E eta^{j-bar}_{nu-bar}

and the coefficients (the raw torsion) move under the structure group.  The
vertical part ``(D, E)`` moves nonlinearly; it can be made zero exactly when
the vertical tangent space of the equation is the space of complex-linear maps
for some pair of complex structures.  Once it is zero the remaining action is
affine and the invariants are the antisymmetric part of ``C_gb`` and the
trace-free parts of ``D`` and ``E``.

Real coordinates: ``z^mu = x^{2mu} + i x^{2mu+1}`` (zero based), likewise
``w``; a real plane slope is a ``2d x 2n`` matrix with flat index ``I*2n + N``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import _linalg
from .grassmann import (GrassmannChart, ResourceLimitError, generic_group_element, group_matrix,
                        numeric_group_matrix)
from .symexpr import (Binding, ScalarExpr, SymbolId, as_expr, evaluate, evaluate_exact, mpq,
                      p, parse_expr, pb, to_mpq, w, wb, z, zb)

__all__ = [
    "PDESystem",
    "JetPoint",
    "RawTorsion",
    "AbsorptionMap",
    "TorsionInvariants",
    "Verdict",
    "NormalForm",
    "SecondLevelSpace",
    "NotOnEquationError",
    "NoNormalFormError",
    "raw_torsion",
    "absorption_map",
    "normalized_torsion",
    "cr_tableau_test",
    "first_order_normal_form",
    "normal_form_residual",
    "induced_complex_structure",
    "vertical_complex_structures",
    "transform_raw_torsion",
    "second_level_solution_space",
    "sample_point",
    "jet_from_raw",
    "plane_slope",
    "standard_complex_structure",
    "RAW_COMPONENTS",
]

MAX_ABSORPTION_SIZE = 9
RAW_COMPONENTS = ("C_r", "C_rb", "C_g", "C_gb", "D", "E")
_DERIV_FAMILIES = ("z", "zb", "w", "wb", "p", "pb")


class NotOnEquationError(ValueError):
    pass


class NoNormalFormError(ValueError):
    pass


# --------------------------------------------------------------------------
# Exact Gaussian rationals (only what the exact jet path needs)


class _QI:
    __slots__ = ("re", "im")

    def __init__(self, re=0, im=0):
        self.re = mpq(re)
        self.im = mpq(im)

    @staticmethod
    def of(x) -> "_QI":
        if isinstance(x, _QI):
            return x
        if isinstance(x, tuple):
            return _QI(to_mpq(x[0]), to_mpq(x[1]))
        return _QI(to_mpq(x), 0)

    def __add__(self, o):
        o = _QI.of(o)
        return _QI(self.re + o.re, self.im + o.im)

    __radd__ = __add__

    def __sub__(self, o):
        o = _QI.of(o)
        return _QI(self.re - o.re, self.im - o.im)

    def __mul__(self, o):
        o = _QI.of(o)
        return _QI(self.re * o.re - self.im * o.im, self.re * o.im + self.im * o.re)

    __rmul__ = __mul__

    def conjugate(self) -> "_QI":
        return _QI(self.re, -self.im)

    def __bool__(self) -> bool:
        return bool(self.re) or bool(self.im)

    def __complex__(self) -> complex:
        return complex(float(self.re), float(self.im))

    def __repr__(self) -> str:
        return f"({self.re}+{self.im}i)"


def _is_exact_value(v) -> bool:
    if isinstance(v, tuple):
        return all(_is_exact_value(x) for x in v)
    if isinstance(v, str):
        try:
            Fraction(v)
        except ValueError:
            return False
        return True
    return isinstance(v, (int, type(mpq(0)))) or type(v).__name__ == "Fraction"


# --------------------------------------------------------------------------
# Systems and jets


@dataclass
class JetPoint:
    """First-order data of a system at a point of the equation manifold.

    ``F[i, mu]`` is ``F^i_{mu-bar}``; ``dF["z"][i, mu, nu]`` its derivative in
    ``z^nu``, ``dF["w"][i, mu, j]`` in ``w^j``, ``dF["p"][i, mu, j, nu]`` in
    ``p^j_nu`` (and the barred families likewise, ``pb`` meaning the conjugate
    of ``p^j_nu``).  Arrays are complex; ``exact`` optionally carries the same
    data as Gaussian rationals.
    """

    n: int
    d: int
    z: np.ndarray
    w: np.ndarray
    p: np.ndarray
    F: np.ndarray
    dF: dict
    exact: dict | None = None

    def __post_init__(self):
        n, d = self.n, self.d
        self.z = np.asarray(self.z, dtype=complex).reshape(n)
        self.w = np.asarray(self.w, dtype=complex).reshape(d)
        self.p = np.asarray(self.p, dtype=complex).reshape(d, n)
        self.F = np.asarray(self.F, dtype=complex).reshape(d, n)
        shapes = {"z": (d, n, n), "zb": (d, n, n), "w": (d, n, d), "wb": (d, n, d),
                  "p": (d, n, d, n), "pb": (d, n, d, n)}
        self.dF = {k: np.asarray(self.dF[k], dtype=complex).reshape(s) for k, s in shapes.items()}
        for arr in [self.z, self.w, self.p, self.F, *self.dF.values()]:
            if not np.all(np.isfinite(arr)):
                raise ValueError("jet entries must be finite")

    def norm(self) -> float:
        return float(math.sqrt(np.sum(np.abs(self.F) ** 2) + sum(np.sum(np.abs(a) ** 2) for a in self.dF.values())))

    def to_json(self) -> dict:
        def enc(a):
            a = np.asarray(a)
            if a.ndim == 0:
                return [float(a.real), float(a.imag)]
            return [enc(x) for x in a]
        return {"n": self.n, "d": self.d, "z": enc(self.z), "w": enc(self.w), "p": enc(self.p),
                "F": enc(self.F), "dF": {k: enc(v) for k, v in self.dF.items()}}

    @classmethod
    def from_json(cls, data: Mapping) -> "JetPoint":
        def dec(a):
            arr = np.asarray(a, dtype=float)
            return arr[..., 0] + 1j * arr[..., 1]
        n, d = int(data["n"]), int(data["d"])
        return cls(n, d, dec(data["z"]), dec(data["w"]), dec(data["p"]), dec(data["F"]),
                   {k: dec(v) for k, v in data["dF"].items()})


class PDESystem:
    """A system ``p^i_{mu-bar} = F^i_{mu-bar}`` with polynomial right-hand sides."""

    def __init__(self, n: int, d: int, F: Sequence[Sequence], constants: Mapping | None = None):
        if n < 1 or d < 1:
            raise ValueError("n and d must be positive")
        self.n, self.d = n, d
        if constants:
            constants = {k: repr(v) if isinstance(v, float) else v for k, v in constants.items()}
        if len(F) != d or any(len(row) != n for row in F):
            raise ValueError(f"F must be a {d} x {n} array of expressions")
        self.F = [[parse_expr(e, n, d, constants) if isinstance(e, str) else as_expr(e) for e in row]
                  for row in F]
        allowed = set(self.arguments())
        for row in self.F:
            for e in row:
                bad = e.free_symbols() - allowed
                if bad:
                    raise ValueError("F may depend only on z, zb, w, wb, p, pb; got "
                                     + ", ".join(sorted(map(str, bad))))
        self._derivs: dict | None = None

    @classmethod
    def zero(cls, n: int, d: int) -> "PDESystem":
        return cls(n, d, [[ScalarExpr() for _ in range(n)] for _ in range(d)])

    def arguments(self) -> list[SymbolId]:
        n, d = self.n, self.d
        out = [z(m) for m in range(1, n + 1)] + [zb(m) for m in range(1, n + 1)]
        out += [w(i) for i in range(1, d + 1)] + [wb(i) for i in range(1, d + 1)]
        out += [p(i, m) for i in range(1, d + 1) for m in range(1, n + 1)]
        out += [pb(i, m) for i in range(1, d + 1) for m in range(1, n + 1)]
        return out

    def conjugate_entries(self) -> list[list[ScalarExpr]]:
        """``F^{i-bar}_mu``, the conjugates of the entries."""
        return [[e.conjugate() for e in row] for row in self.F]

    def _family_symbol(self, fam: str, *idx: int) -> SymbolId:
        return {"z": z, "zb": zb, "w": w, "wb": wb, "p": p, "pb": pb}[fam](*(k + 1 for k in idx))

    def derivatives(self) -> dict:
        """Symbolic first partials, keyed by family, as nested index dicts."""
        if self._derivs is None:
            n, d = self.n, self.d
            out = {}
            for fam in _DERIV_FAMILIES:
                tail = [(a,) for a in range(n)] if fam in ("z", "zb") else \
                    [(j,) for j in range(d)] if fam in ("w", "wb") else \
                    [(j, a) for j in range(d) for a in range(n)]
                out[fam] = {(i, m) + t: self.F[i][m].differentiate(self._family_symbol(fam, *t))
                            for i in range(d) for m in range(n) for t in tail}
            self._derivs = out
        return self._derivs

    def _binding(self, zv, wv, pv) -> dict:
        vals = {}
        for m in range(self.n):
            vals[z(m + 1)] = zv[m]
        for i in range(self.d):
            vals[w(i + 1)] = wv[i]
            for m in range(self.n):
                vals[p(i + 1, m + 1)] = pv[i][m]
        return vals

    def jet(self, zv, wv, pv) -> JetPoint:
        """Numeric jet at ``(z, w, p)``; ``p^i_{mu-bar}`` is ``F`` there."""
        n, d = self.n, self.d
        zv = np.asarray(zv, dtype=complex).reshape(n)
        wv = np.asarray(wv, dtype=complex).reshape(d)
        pv = np.asarray(pv, dtype=complex).reshape(d, n)
        b = Binding(self._binding(zv, wv, pv))
        Fv = np.array([[evaluate(e, b) for e in row] for row in self.F], dtype=complex)
        dF = {}
        shapes = {"z": (d, n, n), "zb": (d, n, n), "w": (d, n, d), "wb": (d, n, d),
                  "p": (d, n, d, n), "pb": (d, n, d, n)}
        for fam, table in self.derivatives().items():
            arr = np.zeros(shapes[fam], dtype=complex)
            for key, e in table.items():
                if not e.is_zero():
                    arr[key] = evaluate(e, b)
            dF[fam] = arr
        return JetPoint(n, d, zv, wv, pv, Fv, dF)

    def exact_jet(self, zv, wv, pv) -> JetPoint:
        """Jet at a Gaussian-rational point; entries given as ``(re, im)`` pairs
        or rationals.  The exact values ride along in ``JetPoint.exact``."""
        n, d = self.n, self.d
        q = lambda v: v if isinstance(v, tuple) else (v, 0)  # noqa: E731
        vals = self._binding([q(x) for x in zv], [q(x) for x in wv], [[q(x) for x in row] for row in pv])
        ex = lambda e: _QI(*evaluate_exact(e, vals)) if not e.is_zero() else _QI()  # noqa: E731
        shapes = {"z": (d, n, n), "zb": (d, n, n), "w": (d, n, d), "wb": (d, n, d),
                  "p": (d, n, d, n), "pb": (d, n, d, n)}
        Fx = np.empty((d, n), dtype=object)
        for i in range(d):
            for m in range(n):
                Fx[i, m] = ex(self.F[i][m])
        dFx = {}
        for fam, table in self.derivatives().items():
            arr = np.empty(shapes[fam], dtype=object)
            for key, e in table.items():
                arr[key] = ex(e)
            dFx[fam] = arr
        pq = np.empty((d, n), dtype=object)
        for i in range(d):
            for m in range(n):
                pq[i, m] = _QI.of(q(pv[i][m]))
        cx = lambda a: np.vectorize(complex, otypes=[complex])(a)  # noqa: E731
        zc = np.array([complex(_QI.of(q(x))) for x in zv])
        wc = np.array([complex(_QI.of(q(x))) for x in wv])
        return JetPoint(n, d, zc, wc, cx(pq), cx(Fx), {k: cx(v) for k, v in dFx.items()},
                        exact={"p": pq, "F": Fx, "dF": dFx})


def sample_point(n: int, d: int, rng: np.random.Generator, scale: float = 0.3) -> tuple:
    """Random ``(z, w, p)`` with Gaussian entries of the given scale."""
    c = lambda *s: scale * (rng.standard_normal(s) + 1j * rng.standard_normal(s))  # noqa: E731
    return c(n), c(d), c(d, n)


# --------------------------------------------------------------------------
# Raw torsion


@dataclass
class RawTorsion:
    """Coefficients of ``eta^i_{mu-bar}`` on the other coframe elements.

    Shapes: ``C_r, C_rb (d, n, d)``; ``C_g, C_gb (d, n, n)``;
    ``D, E (d, n, d, n)`` with ``D[i, mu, j, nu]`` the coefficient of
    ``eta^j_nu`` and ``E[i, mu, j, nu]`` that of its conjugate.
    """

    n: int
    d: int
    C_r: np.ndarray
    C_rb: np.ndarray
    C_g: np.ndarray
    C_gb: np.ndarray
    D: np.ndarray
    E: np.ndarray
    exact: dict | None = None

    def components(self) -> list[np.ndarray]:
        return [getattr(self, k) for k in RAW_COMPONENTS]

    def vector(self) -> np.ndarray:
        """Real coordinates: every complex entry as ``(re, im)``, in component order."""
        flat = np.concatenate([a.reshape(-1) for a in self.components()])
        return np.stack([flat.real, flat.imag], axis=1).reshape(-1)

    def exact_vector(self) -> list | None:
        if self.exact is None:
            return None
        out = []
        for k in RAW_COMPONENTS:
            for v in self.exact[k].reshape(-1):
                out += [v.re, v.im]
        return out

    def norm(self) -> float:
        return float(np.linalg.norm(self.vector()))

    @classmethod
    def from_vector(cls, n: int, d: int, vec: np.ndarray) -> "RawTorsion":
        vec = np.asarray(vec, dtype=float)
        c = vec[0::2] + 1j * vec[1::2]
        parts, off = [], 0
        for shape in _component_shapes(n, d):
            size = int(np.prod(shape))
            parts.append(c[off:off + size].reshape(shape))
            off += size
        return cls(n, d, *parts)

    def real_matrix(self) -> np.ndarray:
        """The relation as a real matrix: realified ``eta^i_{mu-bar}`` in terms
        of ``(eta^r, eta^g, realified eta^j_nu)``."""
        n, d = self.n, self.d
        groups = [(self.C_r, self.C_rb, d), (self.C_g, self.C_gb, n),
                  (self.D.reshape(d, n, d * n), self.E.reshape(d, n, d * n), d * n)]
        cols = []
        for A, B, k in groups:
            for a in range(k):
                Ak, Bk = A[:, :, a].reshape(-1), B[:, :, a].reshape(-1)
                cols.append(_realify(Ak + Bk))
                cols.append(_realify(1j * (Ak - Bk)))
        return np.stack(cols, axis=1)

    @classmethod
    def from_real_matrix(cls, n: int, d: int, T: np.ndarray) -> "RawTorsion":
        return cls.from_vector(n, d, _real_matrix_to_vector(n, d, T))


def _component_shapes(n: int, d: int) -> list[tuple]:
    return [(d, n, d), (d, n, d), (d, n, n), (d, n, n), (d, n, d, n), (d, n, d, n)]


def _realify(c: np.ndarray) -> np.ndarray:
    return np.stack([c.real, c.imag], axis=1).reshape(-1)


def _real_matrix_to_vector(n: int, d: int, T) -> list | np.ndarray:
    """Inverse of :meth:`RawTorsion.real_matrix`, written with ring operations
    only so it runs on rational object arrays too."""
    m = d * n
    exact = isinstance(T, np.ndarray) and T.dtype == object
    half = mpq(1, 2) if exact else 0.5
    # coefficient (alpha, beta) of each complex column group, realified per row
    alphas, betas = [], []
    for a in range((d + n + d * n)):
        c1 = T[:, 2 * a]
        c2 = T[:, 2 * a + 1]
        re1, im1 = c1[0::2], c1[1::2]
        re2, im2 = c2[0::2], c2[1::2]
        alphas.append(((re1 + im2) * half, (im1 - re2) * half))
        betas.append(((re1 - im2) * half, (im1 + re2) * half))

    def block(start, count, which):
        # entries [row (i,mu), a] for the group columns start..start+count
        src = alphas if which == 0 else betas
        re = np.stack([src[start + a][0] for a in range(count)], axis=1)
        im = np.stack([src[start + a][1] for a in range(count)], axis=1)
        return re, im

    pieces = [block(0, d, 0), block(0, d, 1), block(d, n, 0), block(d, n, 1),
              block(d + n, m, 0), block(d + n, m, 1)]
    out = []
    for re, im in pieces:
        inter = np.empty(re.size * 2, dtype=object if exact else float)
        inter[0::2] = re.reshape(-1)
        inter[1::2] = im.reshape(-1)
        out.append(inter)
    vec = np.concatenate(out)
    return list(vec) if exact else vec


def raw_torsion(source: "PDESystem | JetPoint", at: tuple | None = None) -> RawTorsion:
    """Raw torsion from a jet, or from a system at ``at = (z, w, p)``.

    ``at`` may carry a fourth entry with the ``pbar`` values; these are
    derived from ``F`` and only checked (``NotOnEquationError`` on mismatch).
    For a system at a point with rational coordinates the exact values are
    computed as well.  The chain terms through ``wbar`` are included:
    ``dwbar`` carries ``conj(F) dz + conj(p) dzbar`` on the plane.
    """
    if isinstance(source, PDESystem):
        if at is None:
            raise ValueError("a point (z, w, p) is required for a system")
        zv, wv, pv = _check_on_equation(source, at)
        flat = list(zv) + list(wv) + [x for row in pv for x in row]
        jet = source.exact_jet(zv, wv, pv) if all(_is_exact_value(x) for x in flat) else source.jet(zv, wv, pv)
    else:
        jet = source
    n, d = jet.n, jet.d
    out = _raw_from_data(n, d, jet.p, jet.F, jet.dF, conj=np.conjugate, ein=True)
    raw = RawTorsion(n, d, *out)
    if jet.exact is not None:
        ex = jet.exact
        parts = _raw_from_data(n, d, ex["p"], ex["F"], ex["dF"], conj=_obj_conj, ein=False)
        raw.exact = dict(zip(RAW_COMPONENTS, parts))
    return raw


def _check_on_equation(system: "PDESystem", at: tuple, tol: float = 1e-9) -> tuple:
    if len(at) == 3:
        return tuple(at)
    if len(at) != 4:
        raise ValueError("a point is (z, w, p) or (z, w, p, pbar)")
    zv, wv, pv, pbv = at
    n, d = system.n, system.d
    b = Binding(system._binding(np.asarray(zv, complex).reshape(n), np.asarray(wv, complex).reshape(d),
                                np.asarray(pv, complex).reshape(d, n)))
    Fv = np.array([[evaluate(e, b) for e in row] for row in system.F], dtype=complex)
    pbv = np.asarray(pbv, dtype=complex).reshape(d, n)
    gap = float(np.max(np.abs(pbv - Fv)))
    if gap > tol * max(1.0, float(np.max(np.abs(Fv)))):
        raise NotOnEquationError(f"point is off the equation: |pbar - F| = {gap:.3e}")
    return zv, wv, pv


def jet_from_raw(raw: RawTorsion, p_value=None, F_value=None, z_value=None, w_value=None) -> JetPoint:
    """A jet whose raw torsion is ``raw`` (inverts the chain rule above)."""
    n, d = raw.n, raw.d
    pv = np.zeros((d, n), dtype=complex) if p_value is None else np.asarray(p_value, dtype=complex)
    Fv = np.zeros((d, n), dtype=complex) if F_value is None else np.asarray(F_value, dtype=complex)
    dz = raw.C_g - np.einsum("imj,jn->imn", raw.C_r, pv) - np.einsum("imj,jn->imn", raw.C_rb, Fv.conj())
    dzb = raw.C_gb - np.einsum("imj,jn->imn", raw.C_r, Fv) - np.einsum("imj,jn->imn", raw.C_rb, pv.conj())
    dF = {"z": dz, "zb": dzb, "w": raw.C_r, "wb": raw.C_rb, "p": raw.D, "pb": raw.E}
    zv = np.zeros(n) if z_value is None else z_value
    wv = np.zeros(d) if w_value is None else w_value
    return JetPoint(n, d, zv, wv, pv, Fv, {k: np.array(v, dtype=complex) for k, v in dF.items()})


def _obj_conj(a):
    out = np.empty(a.shape, dtype=object)
    for k, v in np.ndenumerate(a):
        out[k] = v.conjugate()
    return out


def _raw_from_data(n, d, pv, Fv, dF, conj, ein: bool):
    if ein:
        C_g = dF["z"] + np.einsum("imj,jn->imn", dF["w"], pv) + np.einsum("imj,jn->imn", dF["wb"], conj(Fv))
        C_gb = dF["zb"] + np.einsum("imj,jn->imn", dF["w"], Fv) + np.einsum("imj,jn->imn", dF["wb"], conj(pv))
        return dF["w"].copy(), dF["wb"].copy(), C_g, C_gb, dF["p"].copy(), dF["pb"].copy()
    Fc, pc = conj(Fv), conj(pv)
    C_g = np.empty((d, n, n), dtype=object)
    C_gb = np.empty((d, n, n), dtype=object)
    for i in range(d):
        for m in range(n):
            for nu in range(n):
                a = dF["z"][i, m, nu]
                b = dF["zb"][i, m, nu]
                for j in range(d):
                    a = a + dF["w"][i, m, j] * pv[j, nu] + dF["wb"][i, m, j] * Fc[j, nu]
                    b = b + dF["w"][i, m, j] * Fv[j, nu] + dF["wb"][i, m, j] * pc[j, nu]
                C_g[i, m, nu] = a
                C_gb[i, m, nu] = b
    return dF["w"].copy(), dF["wb"].copy(), C_g, C_gb, dF["p"].copy(), dF["pb"].copy()


# --------------------------------------------------------------------------
# Real coordinates on the plane bundle


def standard_complex_structure(k: int) -> np.ndarray:
    """Multiplication by i on ``R^{2k}`` with coordinates ``(re, im)`` per slot."""
    J = np.zeros((2 * k, 2 * k))
    for a in range(k):
        J[2 * a, 2 * a + 1] = -1.0
        J[2 * a + 1, 2 * a] = 1.0
    return J


@lru_cache(maxsize=None)
def _split_matrices(n: int, d: int, exact: bool = False):
    """``Sp`` takes a real slope vector to (realified hol part, realified anti part);
    returned with its inverse."""
    m = d * n
    zero, half, one = (mpq(0), mpq(1, 2), mpq(1)) if exact else (0.0, 0.5, 1.0)
    Sp = np.full((4 * m, 4 * m), zero, dtype=object if exact else float)
    Si = np.full((4 * m, 4 * m), zero, dtype=object if exact else float)
    for i in range(d):
        for mu in range(n):
            k = i * n + mu
            a00 = (2 * i) * 2 * n + 2 * mu        # A[2i, 2mu]
            a11 = (2 * i + 1) * 2 * n + 2 * mu + 1  # A[2i+1, 2mu+1]
            a10 = (2 * i + 1) * 2 * n + 2 * mu     # A[2i+1, 2mu]
            a01 = (2 * i) * 2 * n + 2 * mu + 1     # A[2i, 2mu+1]
            hr, hi, ar, ai = 2 * k, 2 * k + 1, 2 * m + 2 * k, 2 * m + 2 * k + 1
            Sp[hr, a00], Sp[hr, a11] = half, half
            Sp[hi, a10], Sp[hi, a01] = half, -half
            Sp[ar, a00], Sp[ar, a11] = half, -half
            Sp[ai, a10], Sp[ai, a01] = half, half
            Si[a00, hr], Si[a00, ar] = one, one
            Si[a11, hr], Si[a11, ar] = one, -one
            Si[a10, hi], Si[a10, ai] = one, one
            Si[a01, hi], Si[a01, ai] = -one, one
    return Sp, Si


def _full_split(n: int, d: int, exact: bool = False):
    Sp, Si = _split_matrices(n, d, exact)
    base = 2 * d + 2 * n
    size = base + Sp.shape[0]
    if exact:
        S = np.full((size, size), mpq(0), dtype=object)
        Sinv = np.full((size, size), mpq(0), dtype=object)
        for a in range(base):
            S[a, a] = Sinv[a, a] = mpq(1)
    else:
        S, Sinv = np.eye(size), np.eye(size)
    S[base:, base:] = Sp
    Sinv[base:, base:] = Si
    return S, Sinv


def transform_real_matrix(n: int, d: int, T: np.ndarray, M: np.ndarray) -> np.ndarray:
    """Torsion matrix after the frame change ``omega = M eta``.

    ``M`` is a real structure-group matrix in the coframe order
    ``(eta^r, eta^g, eta^I_N)`` of real dimensions ``(2n, 2d)``.
    """
    S, Sinv = _full_split(n, d)
    na = 2 * d * n
    K = np.hstack([-T, np.eye(na)])
    Kp = K @ S @ np.linalg.solve(M, Sinv)
    return -np.linalg.solve(Kp[:, -na:], Kp[:, :-na])


def transform_raw_torsion(raw: RawTorsion, blocks: Mapping) -> RawTorsion:
    """Raw torsion in the frame moved by a numeric group element (blocks as in
    :func:`crgeo.grassmann.random_numeric_element` with real dimensions ``2n, 2d``)."""
    M = numeric_group_matrix(dict(blocks))
    return RawTorsion.from_real_matrix(raw.n, raw.d, transform_real_matrix(raw.n, raw.d, raw.real_matrix(), M))


def _vertical_basis(raw: RawTorsion) -> list[np.ndarray]:
    """Real ``2d x 2n`` matrices spanning the vertical tangent space."""
    n, d = raw.n, raw.d
    T = raw.real_matrix()
    _, Si = _split_matrices(n, d)
    m2 = 2 * d * n
    off = 2 * d + 2 * n
    out = []
    for k in range(m2):
        h = np.zeros(m2)
        h[k] = 1.0
        a = T[:, off + k]
        out.append((Si @ np.concatenate([h, a])).reshape(2 * d, 2 * n))
    return out


def _sign_iteration(J: np.ndarray, steps: int = 60) -> np.ndarray | None:
    """Nearest complex structure by ``J <- (J - J^{-1}) / 2``."""
    eye = np.eye(J.shape[0])
    for _ in range(steps):
        try:
            Jn = 0.5 * (J - np.linalg.inv(J))
        except np.linalg.LinAlgError:
            return None
        if np.linalg.norm(Jn - J) < 1e-15 * max(1.0, np.linalg.norm(J)):
            J = Jn
            break
        J = Jn
    if np.linalg.norm(J @ J + eye) > 1e-9:
        return None
    return J


def vertical_complex_structures(raw: RawTorsion) -> tuple[np.ndarray, np.ndarray] | None:
    """Complex structures ``(J1, J2)`` on the plane and on the quotient for
    which the vertical tangent space consists of complex-linear maps.

    The pair spans, with the identity, the commutant
    ``{(S, T): S A = A T for all vertical A}``.  Returns ``None`` when the
    commutant carries no complex structure (for instance a hyperbolic
    system with ``n = d = 1``).  For a system without Cauchy-Riemann tableau
    the returned pair is the best approximation.
    """
    n, d = raw.n, raw.d
    basis = _vertical_basis(raw)
    nS, nT = 4 * d * d, 4 * n * n
    rows = []
    for A in basis:
        # S A - A T, as a linear function of (vec S, vec T)
        block = np.zeros((2 * d * 2 * n, nS + nT))
        for a in range(2 * d):
            for b in range(2 * d):
                E = np.zeros((2 * d, 2 * d))
                E[a, b] = 1.0
                block[:, a * 2 * d + b] = (E @ A).reshape(-1)
        for a in range(2 * n):
            for b in range(2 * n):
                E = np.zeros((2 * n, 2 * n))
                E[a, b] = 1.0
                block[:, nS + a * 2 * n + b] = -(A @ E).reshape(-1)
        rows.append(block)
    sys_ = np.vstack(rows)
    ident = np.concatenate([np.eye(2 * d).reshape(-1), np.eye(2 * n).reshape(-1)])
    scale = max(1.0, np.linalg.norm(sys_, 2))
    aug = np.vstack([sys_, scale * ident / np.linalg.norm(ident)])
    _, _, vt = np.linalg.svd(aug)
    v = vt[-1]
    S = v[:nS].reshape(2 * d, 2 * d)
    T = v[nS:].reshape(2 * n, 2 * n)
    c2 = -np.trace(T @ T) / (2 * n)
    if not c2 > 0:
        return None
    c = math.sqrt(c2)
    J1 = _sign_iteration(T / c)
    J2 = _sign_iteration(S / c)
    if J1 is None or J2 is None:
        return None
    J0 = standard_complex_structure(n)
    if np.linalg.norm(J1 - J0) > np.linalg.norm(J1 + J0):
        J1, J2 = -J1, -J2
    return J1, J2


def _conjugator(J: np.ndarray) -> np.ndarray:
    """A real matrix ``a`` with ``a J a^{-1}`` the standard structure."""
    k = J.shape[0] // 2
    J0 = standard_complex_structure(k)
    C = np.diag([1.0 if a % 2 == 0 else -1.0 for a in range(2 * k)])
    cands = [np.eye(2 * k) - J0 @ J, C @ (np.eye(2 * k) + J0 @ J)]
    return min(cands, key=np.linalg.cond)


def _normalizing_frame(raw: RawTorsion) -> np.ndarray | None:
    js = vertical_complex_structures(raw)
    if js is None:
        return None
    J1, J2 = js
    n, d = raw.n, raw.d
    blocks = {"rr": _conjugator(J2), "gg": _conjugator(J1), "gr": np.zeros((2 * n, 2 * d)),
              "rgr": np.zeros((2 * d, 2 * n, 2 * d)), "rgg": np.zeros((2 * d, 2 * n, 2 * n))}
    return numeric_group_matrix(blocks)


# --------------------------------------------------------------------------
# Absorption map


@dataclass
class AbsorptionMap:
    """Infinitesimal action of the structure group on raw torsion at ``0``.

    ``matrix[r][c]`` (rationals) is the derivative of real raw-torsion
    coordinate ``r`` along group parameter ``c``.  ``complement`` is an exact
    basis of the orthogonal complement of the image.
    """

    n: int
    d: int
    matrix: list
    parameters: list
    rank: int
    complement: list
    _projector: np.ndarray | None = field(default=None, repr=False)

    @property
    def residual_dimension(self) -> int:
        return len(self.complement)

    @property
    def shape(self) -> tuple[int, int]:
        return len(self.matrix), len(self.parameters)

    def float_matrix(self) -> np.ndarray:
        return np.array([[float(x) for x in row] for row in self.matrix])

    def projector(self) -> np.ndarray:
        """Orthogonal projector onto the complement of the image."""
        if self._projector is None:
            rows = len(self.matrix)
            if not self.complement:
                self._projector = np.zeros((rows, rows))
            else:
                N = np.array([[float(x) for x in v] for v in self.complement]).T
                self._projector = N @ np.linalg.solve(N.T @ N, N.T)
        return self._projector

    def contains_exact(self, vec: Sequence) -> bool:
        """Exact membership of a rational vector in the image."""
        return all(sum((a * b for a, b in zip(v, vec) if a and b), mpq(0)) == 0 for v in self.complement)

    def exact_residual_squared(self, vec: Sequence) -> mpq:
        """Squared norm of the orthogonal projection off the image, exactly."""
        vec = [mpq(x) for x in vec]
        N = self.complement
        rhs = [sum((a * b for a, b in zip(v, vec) if a and b), mpq(0)) for v in N]
        if not any(rhs):
            return mpq(0)
        gram = [[sum((a * b for a, b in zip(u, v) if a and b), mpq(0)) for v in N] for u in N]
        red, piv = _linalg.rref([g + [r] for g, r in zip(gram, rhs)], len(N) + 1)
        coef = [mpq(0)] * len(N)
        for row, c in zip(red, piv):
            coef[c] = row[-1]
        return sum((c * r for c, r in zip(coef, rhs)), mpq(0))


def _jet1(entry: ScalarExpr, index: dict, dsyms: set) -> tuple[mpq, dict]:
    """Value and first-order Taylor coefficients at the identity (``D``
    parameters at 1, all others at 0)."""
    if entry.is_zero():
        return mpq(0), {}
    (val, _), grad = entry.first_order_at_units(dsyms)
    return val, {index[s]: c[0] for s, c in grad.items() if c[0]}


def _group_matrix_jet(g, params: list) -> list:
    """First-order jet at the identity of every entry of the group matrix.

    Entries are the blocks of ``g`` except the block acting on ``eta^I_M``,
    which is the product ``a^I_J (A^{-1})^N_M``; its jet follows from the
    product rule, which avoids expanding the product symbolically.
    """
    chart = g.chart
    index = {s: k for k, s in enumerate(params)}
    dsyms = {s for s in params if s.name.startswith("D")}
    memo: dict = {}

    def jet(e):
        key = id(e)
        if key not in memo:
            memo[key] = (e, _jet1(e, index, dsyms))
        return memo[key][1]

    out = []
    for row in chart.slots:
        line = []
        for col in chart.slots:
            if row[0] == "p" and col[0] == "p":
                (v1, l1), (v2, l2) = jet(g.rr[row[1], col[1]]), jet(g.gg_inv[col[2], row[2]])
                lin = {k: c * v2 for k, c in l1.items() if v2}
                for k, c in l2.items():
                    if v1:
                        lin[k] = lin.get(k, mpq(0)) + c * v1
                line.append(lin)
            else:
                line.append(jet(_entry_of(g, row, col))[1])
        out.append(line)
    return out


def _entry_of(g, row, col) -> ScalarExpr:
    rk, ck = row[0], col[0]
    zero = ScalarExpr()
    if rk == "r":
        return g.rr[row[1], col[1]] if ck == "r" else zero
    if rk == "g":
        return g.gr[row[1], col[1]] if ck == "r" else g.gg[row[1], col[1]] if ck == "g" else zero
    if ck == "r":
        return g.rgr[row[1], row[2], col[1]]
    return g.rgg[row[1], row[2], col[1]]


@lru_cache(maxsize=None)
def absorption_map(n: int, d: int) -> AbsorptionMap:
    """Derived from the symbolic structure group acting on the coframe.

    The generic element of the real structure group in real dimensions
    ``(2n, 2d)`` is differentiated at the identity along every parameter;
    each tangent vector ``X`` moves the flat relation to first order by the
    block of ``S X S^{-1}`` taking the other coframe elements into
    ``eta^i_{mu-bar}`` (``S`` the hol/anti split).
    """
    if n < 1 or d < 1 or n * d > MAX_ABSORPTION_SIZE:
        raise ResourceLimitError(f"absorption_map supports n * d <= {MAX_ABSORPTION_SIZE}")
    chart = GrassmannChart(2 * n, 2 * d, "real")
    g = generic_group_element(chart, constrained=True)
    params = list(g.parameters)
    size = chart.size
    S, Sinv = _full_split(n, d, exact=True)
    na = 2 * d * n
    lin = _group_matrix_jet(g, params)
    # sparse rows of S (anti part) and columns of S^{-1} (other slots)
    s_rows = [[(c, S[r, c]) for c in range(size) if S[r, c]] for r in range(size - na, size)]
    si_cols = [[(r, Sinv[r, c]) for r in range(size) if Sinv[r, c]] for c in range(size - na)]
    by_param: dict = {}
    for r in range(size):
        for c in range(size):
            for k, v in lin[r][c].items():
                if v:
                    by_param.setdefault(k, {})[r, c] = v
    zero_col = [mpq(0)] * (2 * sum(int(np.prod(sh)) for sh in _component_shapes(n, d)))
    columns = []
    for k in range(len(params)):
        X = by_param.get(k)
        if not X:
            columns.append(list(zero_col))
            continue
        xrows: dict = {}
        for (r, c), v in X.items():
            xrows.setdefault(r, []).append((c, v))
        block = np.full((na, size - na), mpq(0), dtype=object)
        for a, srow in enumerate(s_rows):
            # (S X)[a, :]
            sx: dict = {}
            for mid, sv in srow:
                for c, v in xrows.get(mid, ()):
                    sx[c] = sx.get(c, mpq(0)) + sv * v
            if not sx:
                continue
            for o, col in enumerate(si_cols):
                acc = mpq(0)
                for r, v in col:
                    x = sx.get(r)
                    if x:
                        acc += x * v
                block[a, o] = acc
        columns.append(_real_matrix_to_vector(n, d, block))
    rows = [list(r) for r in zip(*columns)]
    rank = _linalg.rank(columns)
    complement = _linalg.nullspace(columns, len(rows))
    return AbsorptionMap(n, d, rows, [str(s) for s in params], rank, complement)


# --------------------------------------------------------------------------
# Invariants and the verdict


@dataclass
class TorsionInvariants:
    """Normalized torsion: ``t_gb`` (antisymmetric part of ``C_gb``),
    trace-free ``t_D`` and ``t_E``, and the residual norm."""

    n: int
    d: int
    t_gb: np.ndarray
    t_D: np.ndarray
    t_E: np.ndarray
    residual: float
    frame_normalized: bool
    exact_residual_squared: mpq | None = None

    def norms(self) -> dict:
        return {"t_gb": float(np.linalg.norm(self.t_gb)), "t_D": float(np.linalg.norm(self.t_D)),
                "t_E": float(np.linalg.norm(self.t_E))}


def normalized_torsion(raw: RawTorsion, amap: AbsorptionMap | None = None,
                       normalize_frame: bool = True) -> TorsionInvariants:
    """Project the raw torsion off the image of the absorption map.

    With ``normalize_frame`` the vertical part is first made complex-linear by
    an exact frame change (the nonlinear step); without it the plain
    first-order projection is returned.  When the vertical space admits no
    complex structures the vertical invariants are the raw ``D`` and ``E``.
    """
    n, d = raw.n, raw.d
    exact_sq = None
    normalized = False
    work = raw
    fallback = False
    if normalize_frame:
        exact_flat = raw.exact is not None and not any(v for v in raw.exact["D"].reshape(-1)) \
            and not any(v for v in raw.exact["E"].reshape(-1))
        if exact_flat:
            vec = raw.exact_vector()
            if not any(vec):
                zero = np.zeros
                return TorsionInvariants(n, d, zero((d, n, n), complex), zero((d, n, d, n), complex),
                                         zero((d, n, d, n), complex), 0.0, False, mpq(0))
            amap = amap or absorption_map(n, d)
            exact_sq = amap.exact_residual_squared(vec)
        elif np.any(raw.D) or np.any(raw.E):
            M1 = _normalizing_frame(raw)
            if M1 is None:
                fallback = True
            else:
                T = transform_real_matrix(n, d, raw.real_matrix(), M1)
                work = RawTorsion.from_real_matrix(n, d, T)
                normalized = True
    amap = amap or absorption_map(n, d)
    proj = RawTorsion.from_vector(n, d, amap.projector() @ work.vector())
    t_gb, t_D, t_E = proj.C_gb, proj.D, proj.E
    if fallback:
        t_D, t_E = raw.D.copy(), raw.E.copy()
    residual = float(math.sqrt(np.sum(np.abs(t_gb) ** 2) + np.sum(np.abs(t_D) ** 2) + np.sum(np.abs(t_E) ** 2)))
    if exact_sq is not None:
        residual = math.sqrt(float(exact_sq))
    return TorsionInvariants(n, d, t_gb, t_D, t_E, residual, normalized, exact_sq)


@dataclass
class Verdict:
    cr_tableau: bool
    residual: float
    tolerance: float
    norms: dict
    invariants: TorsionInvariants
    exact_residual_squared: mpq | None = None
    witness: "NormalForm | None" = None

    def to_json(self) -> dict:
        out = {"cr_tableau": self.cr_tableau, "residual": self.residual, "tolerance": self.tolerance,
               "norms": self.norms}
        if self.exact_residual_squared is not None:
            out["exact_residual_squared"] = str(self.exact_residual_squared)
        return out


def cr_tableau_test(source: "PDESystem | JetPoint | RawTorsion", at: tuple | None = None,
                    tol: float = 1e-8, with_witness: bool = False) -> Verdict:
    """Decide whether the system has Cauchy-Riemann tableau at a point.

    True when the normalized torsion vanishes: residual at most
    ``tol * |raw torsion|`` with an absolute floor of ``1e-12``.  On the
    exact path (rational point, vertical part exactly zero) the decision is
    the exact membership test.
    """
    raw = source if isinstance(source, RawTorsion) else raw_torsion(source, at)
    inv = normalized_torsion(raw)
    thr = max(tol * raw.norm(), 1e-12)
    if inv.exact_residual_squared is not None:
        ok = inv.exact_residual_squared == 0
    else:
        ok = inv.residual <= thr
    witness = None
    if with_witness and ok and not isinstance(source, RawTorsion):
        jet = source if isinstance(source, JetPoint) else _jet_of(source, at)
        witness = first_order_normal_form(jet, tol=tol)
    return Verdict(ok, inv.residual, thr, inv.norms(), inv, inv.exact_residual_squared, witness)


def _jet_of(source, at) -> JetPoint:
    if isinstance(source, JetPoint):
        return source
    return source.jet(*_check_on_equation(source, at))


# --------------------------------------------------------------------------
# Induced complex structure


def induced_complex_structure(source: "PDESystem | JetPoint", at: tuple | None = None) -> np.ndarray:
    """The complex structure ``J_P`` on the tangent space of the base.

    Real coordinates ``(x, y)`` (``2n`` then ``2d``).  With ``R`` the real
    slope of the plane ``P``, ``J(x, y) = (J1 x, R J1 x + J2 (y - R x))``,
    where ``(J1, J2)`` make the vertical tangent space complex-linear; it
    preserves ``P`` and squares to ``-1``.  If no such pair exists the
    standard structures are used for ``J1, J2``.
    """
    jet = _jet_of(source, at)
    raw = raw_torsion(jet)
    n, d = jet.n, jet.d
    js = vertical_complex_structures(raw) if (np.any(raw.D) or np.any(raw.E)) else None
    if js is None:
        J1, J2 = standard_complex_structure(n), standard_complex_structure(d)
    else:
        J1, J2 = js
    R = plane_slope(jet)
    J = np.zeros((2 * (n + d), 2 * (n + d)))
    J[:2 * n, :2 * n] = J1
    J[2 * n:, :2 * n] = R @ J1 - J2 @ R
    J[2 * n:, 2 * n:] = J2
    return J


def plane_slope(jet: JetPoint) -> np.ndarray:
    """Real ``2d x 2n`` slope of the plane ``dw = p dz + F dzbar``."""
    n, d = jet.n, jet.d
    _, Si = _split_matrices(n, d)
    return (Si @ np.concatenate([_realify(jet.p.reshape(-1)), _realify(jet.F.reshape(-1))])).reshape(2 * d, 2 * n)


# --------------------------------------------------------------------------
# First-order normal form (the coordinate-change oracle)


@dataclass
class NormalForm:
    """A coordinate change ``(X, Y) = L u + 1/2 Q(u, u)`` with ``u = (x, y) - (x0, y0)``.

    ``L`` is real ``2(n+d)`` square; ``Q[a, b, c]`` symmetric in ``b, c``.
    ``jet`` is the first jet of the transformed system at the origin.
    """

    L: np.ndarray
    Q: np.ndarray
    residual: float
    tolerance: float
    jet: JetPoint | None

    @property
    def feasible(self) -> bool:
        return self.residual <= self.tolerance


def _anti_of(R: np.ndarray, n: int, d: int) -> np.ndarray:
    """Anti-holomorphic part of a real slope, realified."""
    c = R[0::2, :] + 1j * R[1::2, :]
    anti = 0.5 * (c[:, 0::2] + 1j * c[:, 1::2])
    return np.concatenate([anti.real.reshape(-1), anti.imag.reshape(-1)])


def _hol_of(R: np.ndarray) -> np.ndarray:
    c = R[0::2, :] + 1j * R[1::2, :]
    return 0.5 * (c[:, 0::2] - 1j * c[:, 1::2])


def _slope_from(hol: np.ndarray, anti: np.ndarray) -> np.ndarray:
    d, n = hol.shape
    c = np.zeros((d, 2 * n), dtype=complex)
    c[:, 0::2] = hol + anti
    c[:, 1::2] = 1j * (hol - anti)
    R = np.zeros((2 * d, 2 * n))
    R[0::2], R[1::2] = c.real, c.imag
    return R


def _tangent_space(jet: JetPoint) -> list[tuple[np.ndarray, np.ndarray]]:
    """Real basis of the tangent space of the equation at the jet point, as
    pairs (base displacement ``(dx, dy)``, slope displacement ``dR``)."""
    n, d = jet.n, jet.d
    out = []
    nb = 2 * (n + d)
    for k in range(nb + 2 * d * n):
        dq = np.zeros(nb)
        dh = np.zeros((d, n), dtype=complex)
        if k < nb:
            dq[k] = 1.0
        else:
            a = (k - nb) // 2
            dh.reshape(-1)[a] = 1.0 if (k - nb) % 2 == 0 else 1j
        dz = dq[0:2 * n:2] + 1j * dq[1:2 * n:2]
        dw = dq[2 * n::2] + 1j * dq[2 * n + 1::2]
        da = (np.einsum("imn,n->im", jet.dF["z"], dz) + np.einsum("imn,n->im", jet.dF["zb"], dz.conj())
              + np.einsum("imj,j->im", jet.dF["w"], dw) + np.einsum("imj,j->im", jet.dF["wb"], dw.conj())
              + np.einsum("imjn,jn->im", jet.dF["p"], dh) + np.einsum("imjn,jn->im", jet.dF["pb"], dh.conj()))
        out.append((dq, _slope_from(dh, da)))
    return out


def _push(L, Qv, R, dq, dR, n):
    """Slope and slope derivative after the change, at the base point."""
    nx = 2 * n
    Lxx, Lxy, Lyx, Lyy = L[:nx, :nx], L[:nx, nx:], L[nx:, :nx], L[nx:, nx:]
    Dn = Lxx + Lxy @ R
    Nm = Lyx + Lyy @ R
    Dinv = np.linalg.inv(Dn)
    Rp = Nm @ Dinv
    dL = np.einsum("abc,c->ab", Qv, dq) if Qv is not None else np.zeros_like(L)
    dN = dL[nx:, :nx] + dL[nx:, nx:] @ R + Lyy @ dR
    dD = dL[:nx, :nx] + dL[:nx, nx:] @ R + Lxy @ dR
    return Rp, (dN - Rp @ dD) @ Dinv


def _linear_residual(L, R, vertical, n, d):
    Rp, _ = _push(L, None, R, np.zeros(L.shape[0]), np.zeros_like(R), n)
    parts = [_anti_of(Rp, n, d)]
    for dq, dR in vertical:
        dRp = _push(L, None, R, dq, dR, n)[1]
        parts.append(_anti_of(dRp, n, d) / max(np.linalg.norm(dRp), 1e-300) * np.linalg.norm(dR))
    return np.concatenate(parts)


def _antilinear_basis(k: int) -> list[np.ndarray]:
    """Real basis of the maps anticommuting with the standard structure on ``R^{2k}``."""
    out = []
    for a in range(k):
        for b in range(k):
            for blk in (np.array([[1.0, 0.0], [0.0, -1.0]]), np.array([[0.0, 1.0], [1.0, 0.0]])):
                X = np.zeros((2 * k, 2 * k))
                X[2 * a:2 * a + 2, 2 * b:2 * b + 2] = blk
                out.append(X)
    return out


def _solve_linear_part(R, vertical, n, d, iters: int = 200, max_cond: float = 1e4):
    """Damped Gauss-Newton for ``L = I + X`` with ``X`` anti-linear.

    Composing with a complex-linear map changes nothing, so restricting to
    anti-linear perturbations fixes that freedom; rejecting steps where
    ``cond(L) >= max_cond`` keeps the residual from shrinking by
    degenerating the change.
    """
    size = 2 * (n + d)
    basis = np.array(_antilinear_basis(n + d))
    eye = np.eye(size)
    coef = np.zeros(len(basis))
    build = lambda c: eye + np.einsum("k,kab->ab", c, basis)  # noqa: E731

    def resid(c):
        if np.linalg.cond(build(c)) >= max_cond:
            return None
        try:
            return _linear_residual(build(c), R, vertical, n, d)
        except np.linalg.LinAlgError:
            return None

    r = resid(coef)
    lam = 1e-6
    h = 1e-7
    for _ in range(iters):
        nr = np.linalg.norm(r)
        if nr < 1e-15:
            break
        Jm = np.zeros((r.size, len(basis)))
        for k in range(len(basis)):
            e = np.zeros(len(basis))
            e[k] = h
            rp, rm = resid(coef + e), resid(coef - e)
            if rp is None or rm is None:
                rp = resid(coef + e) if rp is not None else r
                rm = r if rp is not r else resid(coef - e)
                Jm[:, k] = (rp - rm) / h
            else:
                Jm[:, k] = (rp - rm) / (2 * h)
        JtJ, g = Jm.T @ Jm, Jm.T @ r
        accepted = False
        while lam < 1e12:
            step = np.linalg.solve(JtJ + lam * np.diag(np.diag(JtJ) + 1e-12), -g)
            rt = resid(coef + step)
            if rt is not None and np.linalg.norm(rt) < nr:
                coef, r = coef + step, rt
                lam = max(lam / 10, 1e-12)
                accepted = True
                break
            lam *= 10
        if not accepted or nr - np.linalg.norm(r) < 1e-10 * nr:
            break
    return build(coef), r


def normal_form_residual(jet: JetPoint) -> tuple[float, np.ndarray, np.ndarray]:
    """Least-squares residual of the flattening conditions, with the change found.

    The linear part is found first by Gauss-Newton on the conditions that
    involve it alone (the plane and the vertical tangent directions become
    complex); the quadratic part then solves a linear least-squares problem
    for the horizontal directions.
    """
    n, d = jet.n, jet.d
    R = _slope_from(jet.p, jet.F)
    tangent = _tangent_space(jet)
    nb = 2 * (n + d)
    vertical = tangent[nb:]
    horizontal = tangent[:nb]
    L, r1 = _solve_linear_part(R, vertical, n, d)
    pairs = [(a, b) for a in range(nb) for b in range(a, nb)]

    def qtensor(vec):
        Qv = np.zeros((nb, nb, nb))
        for k, (a, b) in enumerate(pairs):
            for row in range(nb):
                v = vec[row * len(pairs) + k]
                Qv[row, a, b] += v
                if a != b:
                    Qv[row, b, a] += v
        return Qv

    def hres(Qv):
        return np.concatenate([_anti_of(_push(L, Qv, R, dq, dR, n)[1], n, d) for dq, dR in horizontal])

    nq = nb * len(pairs)
    r0 = hres(np.zeros((nb, nb, nb)))
    A = np.zeros((r0.size, nq))
    for k in range(nq):
        e = np.zeros(nq)
        e[k] = 1.0
        A[:, k] = hres(qtensor(e)) - r0
    q = np.linalg.lstsq(A, -r0, rcond=None)[0]
    r2 = r0 + A @ q
    res = float(math.sqrt(np.sum(r1 ** 2) + np.sum(r2 ** 2)))
    return res, L, qtensor(q)


def _transformed_jet(jet: JetPoint, L: np.ndarray, Qv: np.ndarray) -> JetPoint:
    n, d = jet.n, jet.d
    R = _slope_from(jet.p, jet.F)
    nb = 2 * (n + d)
    Rp, _ = _push(L, Qv, R, np.zeros(nb), np.zeros_like(R), n)
    hol0 = _hol_of(Rp)
    anti0 = _anti_of(Rp, n, d)
    m = d * n
    # new coordinates of each tangent vector: (dX, dY, realified dhol) -> realified danti
    src, dst = [], []
    for dq, dR in _tangent_space(jet):
        _, dRp = _push(L, Qv, R, dq, dR, n)
        src.append(np.concatenate([L @ dq, _realify(_hol_of(dRp).reshape(-1))]))
        dst.append(_anti_of(dRp, n, d))
    Mx = np.linalg.solve(np.array(src), np.array(dst)).T  # danti = Mx @ (dq', dhol')
    cdst = Mx[:m] + 1j * Mx[m:]
    def split(cols):
        re, im = cols[:, 0::2], cols[:, 1::2]
        return 0.5 * (re - 1j * im), 0.5 * (re + 1j * im)
    gz, gzb = split(cdst[:, :2 * n])
    gw, gwb = split(cdst[:, 2 * n:nb])
    gp, gpb = split(cdst[:, nb:])
    dF = {"z": gz.reshape(d, n, n), "zb": gzb.reshape(d, n, n), "w": gw.reshape(d, n, d),
          "wb": gwb.reshape(d, n, d), "p": gp.reshape(d, n, d, n), "pb": gpb.reshape(d, n, d, n)}
    F0 = (anti0[:m] + 1j * anti0[m:]).reshape(d, n)
    return JetPoint(n, d, np.zeros(n), np.zeros(d), hol0, F0, dF)


def first_order_normal_form(source: "PDESystem | JetPoint", at: tuple | None = None,
                            tol: float = 1e-8) -> NormalForm:
    """Coordinates in which ``F`` and its first partials vanish at the point.

    Raises :class:`NoNormalFormError` when the least-squares residual exceeds
    ``tol`` relative to the jet size (floor ``1e-12``).
    """
    jet = _jet_of(source, at)
    res, L, Qv = normal_form_residual(jet)
    thr = max(tol * max(jet.norm(), 1.0), 1e-12)
    if res > thr:
        raise NoNormalFormError(f"no first-order normal form: residual {res:.3e} > {thr:.1e}")
    return NormalForm(L, Qv, res, thr, _transformed_jet(jet, L, Qv))


# --------------------------------------------------------------------------
# Second-level torsion


@dataclass
class SecondLevelSpace:
    n: int
    d: int
    unknowns: list
    dimension: int
    basis: list


def _second_level_unknowns(n: int, d: int) -> list[tuple]:
    R, G = range(d), range(n)
    u = []
    u += [("t^i_{jb kb}", (i, j, k)) for i in R for j in R for k in R]
    u += [("t^mu_{jb kb}", (m, j, k)) for m in G for j in R for k in R]
    u += [("t^i_{mu jb kb}", (i, m, j, k)) for i in R for m in G for j in R for k in R]
    u += [("t^i_{jb sb}", (i, j, s)) for i in R for j in R for s in G]
    u += [("t^mu_{jb sb}", (m, j, s)) for m in G for j in R for s in G]
    u += [("t^i_{mu jb sb}", (i, m, j, s)) for i in R for m in G for j in R for s in G]
    u += [("t^{i sb}_{jb kb}", (i, s, j, k)) for i in R for s in G for j in R for k in R]
    u += [("t^{mu sb}_{jb kb}", (m, s, j, k)) for m in G for s in G for j in R for k in R]
    u += [("t^{i sb}_{mu jb kb}", (i, s, m, j, k)) for i in R for s in G for m in G for j in R for k in R]
    u += [("t^{mu s}_{jb k}", (m, s, j, k)) for m in G for s in G for j in R for k in R]
    u += [("t^{mu s}_{nb k}", (m, s, v, k)) for m in G for s in G for v in G for k in R]
    return u


def second_level_solution_space(n: int, d: int) -> SecondLevelSpace:
    """Complex dimension of the second-level torsion allowed by the relations.

    Encodes the absorbed relations (antisymmetries, the Kronecker-delta
    identities) and, for ``n > 1``, the vanishing of ``t^mu_{jb nub}``,
    ``t^i_{mu jb nub}`` and ``t^i_{jb kb}`` obtained by differentiating the
    structure equations.  The product term in the ``t^{i sb}_{mu jb kb}``
    relation is dropped: it carries the factor ``t^i_{jb sb}``, which the
    relations force to zero whenever ``n > 1``.
    """
    if not (1 <= n <= 4 and 1 <= d <= 4):
        raise ValueError("second_level_solution_space supports 1 <= n, d <= 4")
    unknowns = _second_level_unknowns(n, d)
    col = {u: k for k, u in enumerate(unknowns)}
    N = len(unknowns)
    rows: list[list] = []
    R, G = range(d), range(n)
    dl = lambda a, b: 1 if a == b else 0  # noqa: E731

    def add(terms):
        row = [mpq(0)] * N
        for coef, name, idx in terms:
            if coef:
                row[col[name, idx]] += coef
        if any(row):
            rows.append(row)

    for i in R:
        for j in R:
            for k in R:
                add([(1, "t^i_{jb kb}", (i, j, k)), (1, "t^i_{jb kb}", (i, k, j))])
    for m in G:
        for j in R:
            for k in R:
                add([(1, "t^mu_{jb kb}", (m, j, k)), (1, "t^mu_{jb kb}", (m, k, j))])
                for i in R:
                    add([(1, "t^i_{mu jb kb}", (i, m, j, k)), (1, "t^i_{mu jb kb}", (i, m, k, j))])
    # t^i_{kb nub} delta^sb_mub = t^i_{kb mub} delta^sb_nub
    for i in R:
        for k in R:
            for v in G:
                for s in G:
                    for m in G:
                        add([(dl(s, m), "t^i_{jb sb}", (i, k, v)), (-dl(s, v), "t^i_{jb sb}", (i, k, m))])
    # t^{nu sb}_{jb kb} delta^tb_mub = t^{nu tb}_{kb jb} delta^sb_mub
    for v in G:
        for s in G:
            for t in G:
                for m in G:
                    for j in R:
                        for k in R:
                            add([(dl(t, m), "t^{mu sb}_{jb kb}", (v, s, j, k)),
                                 (-dl(s, m), "t^{mu sb}_{jb kb}", (v, t, k, j))])
    # t^{i sb}_{jb kb} delta^nub_mub = t^{i nub}_{kb jb} delta^sb_mub
    for i in R:
        for s in G:
            for v in G:
                for m in G:
                    for j in R:
                        for k in R:
                            add([(dl(v, m), "t^{i sb}_{jb kb}", (i, s, j, k)),
                                 (-dl(s, m), "t^{i sb}_{jb kb}", (i, v, k, j))])
    # t^{i tb}_{nu jb kb} delta^eb_mub = t^{i eb}_{nu kb jb} delta^tb_mub
    for i in R:
        for t in G:
            for e in G:
                for v in G:
                    for m in G:
                        for j in R:
                            for k in R:
                                add([(dl(e, m), "t^{i sb}_{mu jb kb}", (i, t, v, j, k)),
                                     (-dl(t, m), "t^{i sb}_{mu jb kb}", (i, e, v, k, j))])
    # delta^i_k t^{mu nu}_{jb m} = delta^i_m t^{nu mu}_{jb k}
    for i in R:
        for k in R:
            for mm in R:
                for a in G:
                    for b in G:
                        for j in R:
                            add([(dl(i, k), "t^{mu s}_{jb k}", (a, b, j, mm)),
                                 (-dl(i, mm), "t^{mu s}_{jb k}", (b, a, j, k))])
    # delta^i_j t^{nu sigma}_{mub k} = delta^i_k t^{sigma nu}_{mub j}
    for i in R:
        for j in R:
            for k in R:
                for a in G:
                    for b in G:
                        for m in G:
                            add([(dl(i, j), "t^{mu s}_{nb k}", (a, b, m, k)),
                                 (-dl(i, k), "t^{mu s}_{nb k}", (b, a, m, j))])
    if n > 1:
        for m in G:
            for j in R:
                for s in G:
                    add([(1, "t^mu_{jb sb}", (m, j, s))])
                    for i in R:
                        add([(1, "t^i_{mu jb sb}", (i, m, j, s))])
        for i in R:
            for j in R:
                for k in R:
                    add([(1, "t^i_{jb kb}", (i, j, k))])
                    for m in G:
                        add([(1, "t^i_{mu jb kb}", (i, m, j, k))])
                for m in G:
                    for k in R:
                        pass
        for m in G:
            for j in R:
                for k in R:
                    add([(1, "t^mu_{jb kb}", (m, j, k))])
    basis = _linalg.nullspace(rows, N)
    named = [{f"{unknowns[c][0]}{tuple(x + 1 for x in unknowns[c][1])}": v[c] for c in range(N) if v[c]}
             for v in basis]
    return SecondLevelSpace(n, d, [f"{a}{tuple(x + 1 for x in b)}" for a, b in unknowns], len(basis), named)
