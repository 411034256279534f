"""Hypersurface equations from Legendre fibrations of complex contact space.

Contact space has coordinates ``(w, z, p)`` with contact form ``dw - p dz``.
A fibration by holomorphic Legendre leaves is given in normal form by

    w = c + P_mu z^mu + f_{mu nu}(z, P, Pbar) z^mu z^nu,   p_mu = dw/dz^mu,

the leaf through ``(0, 0, P)`` shifted by ``c``.  The leaf space ``M`` has
coordinates ``(c, P)``: ``P`` plays the independent variables and ``c`` the
dependent one.  Pulling back ``dw - p dz`` to the contact point with leaf
coordinate ``z`` shows that the plane it determines in ``T M`` is

    dc = p_mu dP^mu + F_mu dPbar^mu,
    p_mu = -(z^mu + dW/dP_mu),   F_mu = -dW/dPbar_mu,   W = f_{ab} z^a z^b,

so the equation is ``F`` written in terms of ``(P, Pbar, p)`` after solving
the first relation for ``z``.
"""

from __future__ import annotations

import json
from fractions import Fraction
from dataclasses import dataclass
from typing import Iterator, Mapping, Sequence

import numpy as np

from ._kernels import compile_polys, eval_polys
from .crtableau import JetPoint, Verdict, cr_tableau_test
from .symexpr import P, Pb, ScalarExpr, as_expr, evaluate, parse_expr, z, zb

__all__ = [
    "LegendreFibration",
    "LeafChart",
    "FibrationError",
    "TransversalityError",
    "LegendreCheck",
    "HypersurfaceSample",
    "verify_legendre",
    "induced_system",
    "induced_jet_exact",
    "second_level_invariants",
    "perturb_jet",
    "random_fibration",
    "random_hypersurface_equation",
]

FD_STEP = 1e-4
MAX_CONDITION = 1e8


class FibrationError(ValueError):
    pass


class TransversalityError(ValueError):
    pass


class LegendreFibration:
    """Symmetric ``f_{mu nu}(z, P, Pbar)``, polynomial and holomorphic in ``z``."""

    def __init__(self, n: int, f: Sequence[Sequence], validate: bool = True):
        if n < 1:
            raise FibrationError("n must be positive")
        if len(f) != n or any(len(row) != n for row in f):
            raise FibrationError(f"f must be an {n} x {n} array")
        self.n = n
        self.f = [[self._parse(e) for e in row] for row in f]
        if validate:
            self._validate()
        self._compiled = None
        self._symbolic = None

    def _parse(self, e) -> ScalarExpr:
        if isinstance(e, str):
            return parse_expr(e, self.n, 1)
        return as_expr(e)

    def _validate(self) -> None:
        n = self.n
        allowed = {z(m) for m in range(1, n + 1)} | {P(m) for m in range(1, n + 1)} | \
            {Pb(m) for m in range(1, n + 1)}
        antiholo = {zb(m) for m in range(1, n + 1)}
        for a in range(n):
            for b in range(n):
                e = self.f[a][b]
                if e != self.f[b][a]:
                    raise FibrationError(f"f is not symmetric at ({a + 1},{b + 1})")
                syms = e.free_symbols()
                if syms & antiholo:
                    raise FibrationError("f must be holomorphic in z: found zb in f"
                                         f"[{a + 1}][{b + 1}]")
                bad = syms - allowed
                if bad:
                    raise FibrationError("f may depend only on z, P, Pb; got "
                                         + ", ".join(sorted(map(str, bad))))

    @classmethod
    def flat(cls, n: int) -> "LegendreFibration":
        return cls(n, [[ScalarExpr() for _ in range(n)] for _ in range(n)])

    @classmethod
    def from_json(cls, data: Mapping | str) -> "LegendreFibration":
        if isinstance(data, str):
            data = json.loads(data)
        n = int(data["n"])
        return cls(n, data["f"])

    def to_json(self) -> dict:
        return {"n": self.n, "f": [[str(e) for e in row] for row in self.f]}

    def potential(self) -> ScalarExpr:
        """``W = f_{ab} z^a z^b``."""
        acc = ScalarExpr()
        for a in range(self.n):
            for b in range(self.n):
                acc = acc + self.f[a][b] * as_expr(z(a + 1)) * as_expr(z(b + 1))
        return acc

    def leaf(self) -> tuple[ScalarExpr, list[ScalarExpr]]:
        """``(w - c, p)`` along the leaf, as expressions in ``z, P, Pbar``."""
        W = self.potential()
        w_rel = W
        for m in range(1, self.n + 1):
            w_rel = w_rel + as_expr(P(m)) * as_expr(z(m))
        return w_rel, [w_rel.differentiate(z(m)) for m in range(1, self.n + 1)]

    def symbolic(self) -> dict:
        """``Phi_mu = -(z^mu + dW/dP_mu)`` and ``G_mu = -dW/dPbar_mu`` with their
        first partials in ``z``, ``P`` and ``Pbar``."""
        if self._symbolic is None:
            n = self.n
            W = self.potential()
            Phi = [-(as_expr(z(m)) + W.differentiate(P(m))) for m in range(1, n + 1)]
            G = [-W.differentiate(Pb(m)) for m in range(1, n + 1)]
            out = {"Phi": Phi, "G": G}
            for name, exprs in (("Phi", Phi), ("G", G)):
                for fam, sym in (("z", z), ("P", P), ("Pb", Pb)):
                    out[f"{name}_{fam}"] = [[e.differentiate(sym(k)) for k in range(1, n + 1)] for e in exprs]
            H = [[W.differentiate(z(a)).differentiate(z(b)) for b in range(1, n + 1)] for a in range(1, n + 1)]
            out["H"] = H
            out["H_Pb"] = [[[H[a][b].differentiate(Pb(v)) for v in range(1, n + 1)] for b in range(n)]
                           for a in range(n)]
            self._symbolic = out
        return self._symbolic

    def variables(self) -> list:
        n = self.n
        return [z(m) for m in range(1, n + 1)] + [P(m) for m in range(1, n + 1)] + \
            [Pb(m) for m in range(1, n + 1)]

    def compiled(self):
        """Compiled ``Phi``, ``Phi_z`` (row-major) and ``G`` for batched evaluation."""
        if self._compiled is None:
            s = self.symbolic()
            n = self.n
            exprs = s["Phi"] + [s["Phi_z"][a][b] for a in range(n) for b in range(n)] + s["G"]
            self._compiled = compile_polys(exprs, self.variables())
        return self._compiled


@dataclass(frozen=True)
class LeafChart:
    """The leaf of ``fib`` through ``(c, P)``, as a map of ``z``."""

    fibration: LegendreFibration
    c: complex
    P: tuple

    def __call__(self, zv: Sequence) -> tuple[complex, np.ndarray, np.ndarray]:
        """``(w, z, p)`` at leaf coordinate ``zv``."""
        n = self.fibration.n
        w_rel, pexprs = self.fibration.leaf()
        binding = {}
        for m in range(n):
            binding[z(m + 1)] = complex(zv[m])
            binding[P(m + 1)] = complex(self.P[m])
        ev = lambda e: evaluate(e, binding) if not e.is_zero() else 0j  # noqa: E731
        return self.c + ev(w_rel), np.asarray(zv, dtype=complex), np.array([ev(e) for e in pexprs])


# --------------------------------------------------------------------------


@dataclass
class LegendreCheck:
    residual: list
    zero: bool


def verify_legendre(fib: LegendreFibration) -> LegendreCheck:
    """Pull ``dw - p dz`` back to a leaf (``c, P`` fixed) and list the
    coefficients on ``dz^mu`` and ``dzbar^mu``; all vanish for a valid fibration."""
    w_rel, pv = fib.leaf()
    res = []
    for m in range(1, fib.n + 1):
        res.append(w_rel.differentiate(z(m)) - pv[m - 1])
        res.append(w_rel.differentiate(zb(m)))
    return LegendreCheck(res, all(e.is_zero() for e in res))


def _point_values(n: int, zv, Pv) -> np.ndarray:
    return np.concatenate([np.asarray(zv, complex), np.asarray(Pv, complex), np.conj(np.asarray(Pv, complex))])


def _eval_parts(fib: LegendreFibration, vals: np.ndarray):
    n = fib.n
    out = eval_polys(fib.compiled(), vals)
    return out[:, :n], out[:, n:n + n * n].reshape(-1, n, n), out[:, n + n * n:]


def _solve_leaf_coordinate(fib: LegendreFibration, Pv: np.ndarray, pv: np.ndarray, z0: np.ndarray,
                           iters: int = 50) -> np.ndarray:
    """Batched Newton for ``Phi(z, P, Pbar) = p`` (holomorphic in ``z``)."""
    n = fib.n
    zc = np.array(z0, dtype=complex)
    for _ in range(iters):
        vals = np.concatenate([zc, Pv, np.conj(Pv)], axis=1)
        Phi, Phiz, _ = _eval_parts(fib, vals)
        r = Phi - pv
        if np.max(np.abs(r)) < 1e-15:
            break
        zc = zc - np.linalg.solve(Phiz, r[..., None])[..., 0]
    vals = np.concatenate([zc, Pv, np.conj(Pv)], axis=1)
    Phi, _, _ = _eval_parts(fib, vals)
    if np.max(np.abs(Phi - pv)) > 1e-11:
        raise TransversalityError("could not solve for the leaf coordinate")
    return zc


def _check_transversal(fib: LegendreFibration, zv, Pv) -> float:
    """Condition number of the real Jacobian of ``(c, P) -> (w, p)`` at fixed ``z``."""
    n = fib.n
    w_rel, pexprs = fib.leaf()
    exprs = [w_rel] + pexprs
    cp = compile_polys(exprs, fib.variables())
    h = 1e-6
    cols = []
    # c enters w with coefficient 1 and p not at all
    cols.append(np.concatenate([[1.0, 0.0], np.zeros(2 * n)]))
    cols.append(np.concatenate([[0.0, 1.0], np.zeros(2 * n)]))
    for k in range(n):
        for ph in (1.0, 1j):
            Pp = np.array(Pv, complex)
            Pm = np.array(Pv, complex)
            Pp[k] += ph * h
            Pm[k] -= ph * h
            vp = eval_polys(cp, _point_values(n, zv, Pp)[None])[0]
            vm = eval_polys(cp, _point_values(n, zv, Pm)[None])[0]
            dv = (vp - vm) / (2 * h)
            cols.append(np.array([c for x in dv for c in (x.real, x.imag)]))
    J = np.array(cols).T
    return float(np.linalg.cond(J))


def _F_at(fib: LegendreFibration, Pv: np.ndarray, pv: np.ndarray, zguess: np.ndarray) -> np.ndarray:
    zc = _solve_leaf_coordinate(fib, Pv, pv, zguess)
    vals = np.concatenate([zc, Pv, np.conj(Pv)], axis=1)
    return _eval_parts(fib, vals)[2]


def induced_system(fib: LegendreFibration, at: tuple, z_offset: Sequence) -> JetPoint:
    """Jet of the induced equation at the contact point with leaf coordinate
    ``z_offset`` on the leaf ``at = (c, P)``.

    First partials are central differences with step ``1e-4`` and one
    Richardson extrapolation, in Wirtinger form.  The graph splitting uses the
    coordinate complex structure of ``(c, P)``.
    """
    n = fib.n
    c0, P0 = at
    P0 = np.asarray(P0, dtype=complex).reshape(n)
    z0 = np.asarray(z_offset, dtype=complex).reshape(n)
    cond = _check_transversal(fib, z0, P0)
    if not np.isfinite(cond) or cond > MAX_CONDITION:
        raise TransversalityError(f"leaf map not transverse (condition number {cond:.2e})")
    vals = _point_values(n, z0, P0)[None]
    Phi, Phiz, G = _eval_parts(fib, vals)
    if abs(np.linalg.det(Phiz[0])) < 1e-12:
        raise TransversalityError("leaf coordinate is not determined by p at this point")
    p0 = Phi[0]
    F0 = G[0]
    # real directions: P (2n), p (2n), c (2)
    dirs = []
    for k in range(n):
        for ph in (1.0, 1j):
            dP = np.zeros(n, complex)
            dP[k] = ph
            dirs.append(("P", k, ph, dP, np.zeros(n, complex)))
    for k in range(n):
        for ph in (1.0, 1j):
            dp = np.zeros(n, complex)
            dp[k] = ph
            dirs.append(("p", k, ph, np.zeros(n, complex), dp))
    batchP, batchp = [], []
    for h in (FD_STEP, FD_STEP / 2):
        for _, _, _, dP, dp in dirs:
            for sgn in (1, -1):
                batchP.append(P0 + sgn * h * dP)
                batchp.append(p0 + sgn * h * dp)
    batchP = np.array(batchP)
    batchp = np.array(batchp)
    Fv = _F_at(fib, batchP, batchp, np.repeat(z0[None], len(batchP), axis=0))
    m = len(dirs)
    D1 = (Fv[0:2 * m:2] - Fv[1:2 * m:2]) / (2 * FD_STEP)
    D2 = (Fv[2 * m::2] - Fv[2 * m + 1::2]) / FD_STEP
    D = (4 * D2 - D1) / 3  # (m, n): real derivative of F along each direction
    dF = {k: None for k in ("z", "zb", "w", "wb", "p", "pb")}
    hol = {"P": np.zeros((n, n), complex), "p": np.zeros((n, n), complex)}
    anti = {"P": np.zeros((n, n), complex), "p": np.zeros((n, n), complex)}
    for fam in ("P", "p"):
        for k in range(n):
            dx = D[[i for i, dd in enumerate(dirs) if dd[0] == fam and dd[1] == k and dd[2] == 1.0][0]]
            dy = D[[i for i, dd in enumerate(dirs) if dd[0] == fam and dd[1] == k and dd[2] == 1j][0]]
            hol[fam][:, k] = 0.5 * (dx - 1j * dy)
            anti[fam][:, k] = 0.5 * (dx + 1j * dy)
    dF["z"] = hol["P"][None]
    dF["zb"] = anti["P"][None]
    dF["w"] = np.zeros((1, n, 1), complex)
    dF["wb"] = np.zeros((1, n, 1), complex)
    dF["p"] = hol["p"][None, :, None, :]
    dF["pb"] = anti["p"][None, :, None, :]
    return JetPoint(n, 1, P0, np.array([c0], dtype=complex), p0[None], F0[None], dF)


def induced_jet_exact(fib: LegendreFibration, at: tuple, z_offset: Sequence) -> JetPoint:
    """Same jet from symbolic partials and the implicit-function chain rule."""
    n = fib.n
    c0, P0 = at
    P0 = np.asarray(P0, dtype=complex).reshape(n)
    z0 = np.asarray(z_offset, dtype=complex).reshape(n)
    s = fib.symbolic()
    binding = {}
    for m in range(n):
        binding[z(m + 1)] = z0[m]
        binding[P(m + 1)] = P0[m]
    ev = lambda e: evaluate(e, binding) if not e.is_zero() else 0j  # noqa: E731
    mat = lambda rows: np.array([[ev(e) for e in row] for row in rows], dtype=complex)  # noqa: E731
    Phi = np.array([ev(e) for e in s["Phi"]])
    G = np.array([ev(e) for e in s["G"]])
    Phiz, PhiP, PhiPb = mat(s["Phi_z"]), mat(s["Phi_P"]), mat(s["Phi_Pb"])
    Gz, GP, GPb = mat(s["G_z"]), mat(s["G_P"]), mat(s["G_Pb"])
    inv = np.linalg.inv(Phiz)
    Fp = Gz @ inv
    FP = GP - Gz @ inv @ PhiP
    FPb = GPb - Gz @ inv @ PhiPb
    dF = {"z": FP[None], "zb": FPb[None], "w": np.zeros((1, n, 1)), "wb": np.zeros((1, n, 1)),
          "p": Fp[None, :, None, :], "pb": np.zeros((1, n, 1, n))}
    return JetPoint(n, 1, P0, np.array([c0], dtype=complex), Phi[None], G[None], dF)


def second_level_invariants(fib: LegendreFibration, at: tuple, z_offset: Sequence) -> dict:
    """Antiholomorphic base derivatives of the leaf Hessian ``H = d^2 w / dz dz``
    at fixed leaf coordinate, in the coordinate frame.

    ``t_cbar[mu, sigma]`` is its ``cbar`` derivative (identically zero in this
    normal form) and ``t_Pbar[mu, sigma, nu]`` its ``Pbar_nu`` derivative;
    these carry the torsion ``t^{mu sigma}_{1-bar k}``, ``t^{mu sigma}_{nu-bar k}``
    up to the frame, so vanishing and the ``mu sigma`` symmetry are meaningful.
    """
    n = fib.n
    _, P0 = at
    binding = {}
    for m in range(n):
        binding[z(m + 1)] = complex(np.asarray(z_offset).reshape(n)[m])
        binding[P(m + 1)] = complex(np.asarray(P0).reshape(n)[m])
    H_Pb = fib.symbolic()["H_Pb"]
    t_P = np.array([[[evaluate(e, binding) if not e.is_zero() else 0j for e in row] for row in blk] for blk in H_Pb],
                   dtype=complex)
    return {"t_cbar": np.zeros((n, n), complex), "t_Pbar": t_P}


def perturb_jet(jet: JetPoint, rng: np.random.Generator, norm: float = 0.1) -> JetPoint:
    """Add a random ``E`` component that is trace-free over the greek pair
    (outside the image of the absorption map), of the given norm."""
    n, d = jet.n, jet.d
    E = rng.standard_normal((d, n, d, n)) + 1j * rng.standard_normal((d, n, d, n))
    tr = np.einsum("imjm->ij", E) / n
    E = E - np.einsum("ij,mn->imjn", tr, np.eye(n))
    E *= norm / np.linalg.norm(E)
    dF = {k: v.copy() for k, v in jet.dF.items()}
    dF["pb"] = dF["pb"] + E
    return JetPoint(n, d, jet.z, jet.w, jet.p, jet.F, dF)


def random_fibration(n: int, rng: np.random.Generator, degree: int = 2, density: float = 0.5,
                     scale: int = 4) -> LegendreFibration:
    """Random polynomial ``f_{mu nu}`` in ``z, P, Pbar`` with small rational
    coefficients, up to the given total degree."""
    syms = [z(m) for m in range(1, n + 1)] + [P(m) for m in range(1, n + 1)] + [Pb(m) for m in range(1, n + 1)]
    monos = [()]
    for _ in range(degree):
        monos = monos + [m + (k,) for m in monos for k in range(len(syms)) if not m or k >= m[-1]]
    monos = sorted(set(monos))
    f = [[None] * n for _ in range(n)]
    for a in range(n):
        for b in range(a, n):
            acc = ScalarExpr()
            for mono in monos:
                if rng.random() < density:
                    re = int(rng.integers(-scale, scale + 1))
                    im = int(rng.integers(-scale, scale + 1))
                    term = ScalarExpr.const(1)
                    for k in mono:
                        term = term * as_expr(syms[k])
                    acc = acc + term.scale(Fraction(re, 2 * scale), Fraction(im, 2 * scale))
            f[a][b] = f[b][a] = acc
    return LegendreFibration(n, f)


@dataclass
class HypersurfaceSample:
    fibration: LegendreFibration
    leaf: tuple
    z_offset: np.ndarray
    jet: JetPoint
    verdict: Verdict
    invariants: dict
    symmetric: bool


def random_hypersurface_equation(n: int, seed: int = 0, degree_bound: int = 2, samples: int = 100,
                                 fibration: LegendreFibration | None = None,
                                 point_scale: float = 0.2) -> Iterator[HypersurfaceSample]:
    """Stream of induced jets from random (or given) fibrations at random points,
    each with its verdict and second-level invariants."""
    if n < 2:
        raise ValueError("hypersurface equations need n >= 2")
    rng = np.random.default_rng(seed)
    produced = 0
    while produced < samples:
        fib = fibration or random_fibration(n, rng, degree_bound)
        c0 = point_scale * complex(*rng.standard_normal(2))
        P0 = point_scale * (rng.standard_normal(n) + 1j * rng.standard_normal(n))
        z0 = point_scale * (rng.standard_normal(n) + 1j * rng.standard_normal(n))
        try:
            jet = induced_system(fib, (c0, P0), z0)
        except TransversalityError:
            continue
        inv = second_level_invariants(fib, (c0, P0), z0)
        t = inv["t_Pbar"]
        sym = bool(np.allclose(t, t.transpose(1, 0, 2), atol=1e-8))
        produced += 1
        yield HypersurfaceSample(fib, (c0, P0), z0, jet, cr_tableau_test(jet), inv, sym)
