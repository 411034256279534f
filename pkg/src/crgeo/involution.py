"""Cartan characters, first prolongation and Cartan's test for linear tableaux.

A tableau is a linear space ``A`` of real ``b x a`` matrices (maps from the
independence directions to the unknowns).  Characters come from random
flags: ``s_1 + ... + s_k`` is the dimension of ``{(A v_1, ..., A v_k)}`` for
generic ``v``, which is lower semicontinuous in the flag, so the maximum over
a few seeded trials is the generic value.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import _linalg
from .symexpr import mpq

__all__ = [
    "Tableau",
    "CharacterReport",
    "NotCRTableauError",
    "prolongation",
    "cartan_characters",
    "cr_tableau",
    "system_tableau",
    "solution_generality",
    "hypersurface_torsion_tableau",
    "hypersurface_moduli_generality",
    "HypersurfaceReport",
]

_EXACT_LIMIT = 600


class NotCRTableauError(ValueError):
    pass


@dataclass
class Tableau:
    """Span of ``b x a`` matrices; ``a`` independence directions, ``b`` unknowns."""

    a: int
    b: int
    basis: list
    complex_structures: tuple | None = None

    def __post_init__(self):
        self.basis = [np.asarray(m) for m in self.basis]
        for m in self.basis:
            if m.shape != (self.b, self.a):
                raise ValueError(f"basis matrix of shape {m.shape}, expected {(self.b, self.a)}")
        if self.basis and _float_rank(self._flat()) != len(self.basis):
            raise ValueError("tableau basis is linearly dependent")

    @property
    def dim(self) -> int:
        return len(self.basis)

    def is_exact(self) -> bool:
        return all(m.dtype == object for m in self.basis)

    def _flat(self) -> np.ndarray:
        return np.array([np.asarray(m, dtype=float).reshape(-1) for m in self.basis]).reshape(len(self.basis), -1)

    @classmethod
    def zero(cls, a: int, b: int) -> "Tableau":
        return cls(a, b, [])


@dataclass
class CharacterReport:
    characters: list
    dim: int
    prolongation_dim: int
    involutive: bool
    generality: tuple

    def to_json(self) -> dict:
        return {"characters": list(self.characters), "dim": self.dim,
                "prolongation_dim": self.prolongation_dim, "involutive": self.involutive,
                "generality": list(self.generality)}


def _float_rank(m: np.ndarray, cutoff: float = 1e-8) -> int:
    if m.size == 0:
        return 0
    s = np.linalg.svd(np.asarray(m, dtype=float), compute_uv=False)
    return int(np.sum(s > cutoff * s[0])) if s.size and s[0] > 0 else 0


def prolongation(t: Tableau, exact: bool | None = None) -> tuple[int, list]:
    """First prolongation: symmetric ``B`` with every ``B(e_k, .)`` in ``A``.

    Returned as (dimension, basis of ``b x a x a`` arrays).  Exact rational
    arithmetic is used for rational bases of moderate size, otherwise a
    singular-value null space.
    """
    a, b = t.a, t.b
    pairs = [(k, l) for k in range(a) for l in range(k, a)]
    nunk = b * len(pairs)
    if t.dim == 0:
        return 0, []
    if exact is None:
        exact = t.is_exact() and nunk <= _EXACT_LIMIT
    # annihilator of A inside b x a matrices
    flat = [[mpq(x) for x in np.asarray(m).reshape(-1)] for m in t.basis] if exact else None
    if exact:
        ann = _linalg.nullspace(flat, a * b)
    else:
        u, s, vt = np.linalg.svd(t._flat())
        r = int(np.sum(s > 1e-10 * s[0]))
        ann = vt[r:]
    col = {}
    for idx, (k, l) in enumerate(pairs):
        col[k, l] = col[l, k] = idx
    rows = []
    for k in range(a):
        for nv in ann:
            row = [0] * nunk
            for q in range(b):
                for l in range(a):
                    c = nv[q * a + l]
                    if c:
                        row[q * len(pairs) + col[k, l]] += c
            rows.append(row)
    if exact:
        null = _linalg.nullspace(rows, nunk) if rows else _linalg.nullspace([], nunk)
        vecs = null
    else:
        mat = np.array(rows, dtype=float) if rows else np.zeros((0, nunk))
        if mat.shape[0]:
            _, s, vt = np.linalg.svd(mat)
            r = int(np.sum(s > 1e-10 * (s[0] if s.size else 1.0)))
            vecs = list(vt[r:])
        else:
            vecs = list(np.eye(nunk))
    basis = []
    for v in vecs:
        B = np.zeros((b, a, a), dtype=object if exact else float)
        if exact:
            B[...] = mpq(0)
        for q in range(b):
            for (k, l), idx in zip(pairs, range(len(pairs))):
                B[q, k, l] = B[q, l, k] = v[q * len(pairs) + idx]
        basis.append(B)
    return len(basis), basis


def cartan_characters(t: Tableau, trials: int = 8, seed: int = 0) -> CharacterReport:
    """Characters from seeded random flags, with Cartan's test."""
    if trials < 1:
        raise ValueError("trials must be at least 1")
    a = t.a
    if t.dim == 0:
        chars = [0] * a
        return CharacterReport(chars, 0, 0, True, (0, 0))
    rng = np.random.default_rng(seed)
    mats = np.array([np.asarray(m, dtype=float) for m in t.basis])  # (dim, b, a)
    best = np.zeros(a, dtype=int)
    for _ in range(trials):
        flag = rng.standard_normal((a, a))
        img = np.einsum("rba,ak->rkb", mats, flag)  # (dim, k, b)
        ranks = [_float_rank(img[:, :k, :].reshape(t.dim, -1)) for k in range(1, a + 1)]
        best = np.maximum(best, ranks)
    chars = [int(x) for x in np.diff(np.concatenate([[0], best]))]
    pdim, _ = prolongation(t)
    bound = sum((k + 1) * s for k, s in enumerate(chars))
    nz = [k for k, s in enumerate(chars) if s]
    gen = (chars[nz[-1]], nz[-1] + 1) if nz else (0, 0)
    return CharacterReport(chars, t.dim, pdim, pdim == bound, gen)


def cr_tableau(n: int, d: int) -> Tableau:
    """Real form of the complex-linear maps ``C^n -> C^d`` (exact basis)."""
    basis = []
    one, zero = mpq(1), mpq(0)
    for i in range(d):
        for mu in range(n):
            for part in (0, 1):
                m = np.full((2 * d, 2 * n), zero, dtype=object)
                if part == 0:
                    m[2 * i, 2 * mu] = one
                    m[2 * i + 1, 2 * mu + 1] = one
                else:
                    m[2 * i + 1, 2 * mu] = one
                    m[2 * i, 2 * mu + 1] = -one
                basis.append(m)
    return Tableau(2 * n, 2 * d, basis)


def system_tableau(source, at=None) -> Tableau:
    """Tableau of a system at a point: the tangent space to the fibre of the
    equation, as real ``2d x 2n`` slope variations."""
    from .crtableau import _vertical_basis, raw_torsion
    raw = raw_torsion(source, at)
    return Tableau(2 * raw.n, 2 * raw.d, _vertical_basis(raw))


def solution_generality(source, at=None, trials: int = 8, seed: int = 0) -> tuple[int, int]:
    """``(s_q, q)``: local solutions depend on ``s_q`` real functions of ``q``
    real variables.  Requires Cauchy-Riemann tableau at the point."""
    from .crtableau import cr_tableau_test
    if not cr_tableau_test(source, at).cr_tableau:
        raise NotCRTableauError("the system does not have Cauchy-Riemann tableau at this point")
    return cartan_characters(system_tableau(source, at), trials, seed).generality


# --------------------------------------------------------------------------
# Hypersurface equations


@dataclass
class HypersurfaceReport:
    n: int
    report: CharacterReport
    independence: list
    unknowns: list
    expected: tuple = field(default=(2, 0))

    @property
    def generality(self) -> tuple:
        return self.report.generality

    @property
    def matches(self) -> bool:
        return tuple(self.generality) == tuple(self.expected)

    def to_json(self) -> dict:
        return {"n": self.n, "generality": list(self.generality), "expected": list(self.expected),
                "matches": self.matches, "characters": self.report.characters,
                "involutive": self.report.involutive, "independence": self.independence}


def hypersurface_torsion_tableau(n: int, zero_torsion: bool = False,
                                 drop_symmetry: bool = False) -> tuple[Tableau, list, list]:
    """Tableau of the first derivatives of the hypersurface torsion.

    For ``d = 1`` the remaining torsion is ``T^{mu sigma}_A`` (symmetric in
    ``mu sigma``) with ``A`` running over the conjugate base forms
    ``omega^{1-bar}, omega^{nu-bar}``.  Independence forms are the ``4n + 2``
    real coframe directions of ``E``: the base forms ``omega^1, omega^mu``
    and the fibre forms ``omega^1_mu`` (with conjugates).  Differentiating
    ``d omega^mu`` and reducing modulo the base forms (whose coefficients are
    absorbed by the curvature of the pseudoconnection) gives:

    * derivatives along the holomorphic base forms are free;
    * derivatives along the conjugate base forms are symmetric in ``A, B``;
    * derivatives along the fibre forms are symmetric in ``mu, sigma, tau``;
    * derivatives along the conjugate fibre forms vanish.

    ``drop_symmetry`` relaxes the ``mu sigma`` symmetry of ``T`` (a control).
    """
    nb = n + 1
    if drop_symmetry:
        pairs = [(m, s) for m in range(n) for s in range(n)]
    else:
        pairs = [(m, s) for m in range(n) for s in range(m, n)]
    unknowns = [(m, s, A) for (m, s) in pairs for A in range(nb)]
    U = len(unknowns)
    index = {u: k for k, u in enumerate(unknowns)}

    def key(m, s, A):
        if not drop_symmetry:
            m, s = min(m, s), max(m, s)
        return index[m, s, A]

    ndir = nb + n
    a = 2 * ndir
    gens = []
    if not zero_torsion:
        for u in range(U):
            for c in range(nb):
                for ph in (1, 1j):
                    Dh = np.zeros((U, ndir), complex)
                    Dh[u, c] = ph
                    gens.append((Dh, np.zeros((U, ndir), complex)))
        for (m, s) in pairs:
            for A in range(nb):
                for B in range(A, nb):
                    for ph in (1, 1j):
                        Da = np.zeros((U, ndir), complex)
                        Da[key(m, s, A), B] = ph
                        Da[key(m, s, B), A] = ph
                        gens.append((np.zeros((U, ndir), complex), Da))
        if drop_symmetry:
            combos = [(m, s, t) for m in range(n) for s in range(n) for t in range(n) if s <= t]
            for (m, s, t) in combos:
                for A in range(nb):
                    for ph in (1, 1j):
                        Dh = np.zeros((U, ndir), complex)
                        Dh[key(m, s, A), nb + t] = ph
                        Dh[key(m, t, A), nb + s] = ph
                        gens.append((Dh, np.zeros((U, ndir), complex)))
        else:
            for trip in itertools.combinations_with_replacement(range(n), 3):
                for A in range(nb):
                    for ph in (1, 1j):
                        Dh = np.zeros((U, ndir), complex)
                        for (m, s, t) in set(itertools.permutations(trip)):
                            Dh[key(m, s, A), nb + t] = ph
                        gens.append((Dh, np.zeros((U, ndir), complex)))
    basis = []
    for Dh, Da in gens:
        M = np.zeros((2 * U, a))
        for c in range(ndir):
            dx = Dh[:, c] + Da[:, c]
            dy = 1j * (Dh[:, c] - Da[:, c])
            M[0::2, 2 * c], M[1::2, 2 * c] = dx.real, dx.imag
            M[0::2, 2 * c + 1], M[1::2, 2 * c + 1] = dy.real, dy.imag
        basis.append(M)
    # exact copy: entries are 0, +-1
    basis = [np.vectorize(lambda x: mpq(int(round(x))), otypes=[object])(m) for m in basis]
    independence = (["Re/Im omega^i (i=1)"] + [f"Re/Im omega^mu (mu={m + 1})" for m in range(n)]
                    + [f"Re/Im omega^i_mu (mu={m + 1})" for m in range(n)])
    names = [f"T^{{{m + 1}{s + 1}}}_{'1b' if A == 0 else str(A) + 'b'}" for (m, s, A) in unknowns]
    if not basis:
        return Tableau.zero(a, 2 * U), independence, names
    return Tableau(a, 2 * U, basis), independence, names


def hypersurface_moduli_generality(n: int, trials: int = 8, seed: int = 0, zero_torsion: bool = False,
                                   drop_symmetry: bool = False) -> HypersurfaceReport:
    """Characters of the hypersurface torsion tableau and the resulting
    generality ``(s_q, q)``, compared with ``(2, 2n + 1)``.

    The comparison is reported, never adjusted: ``matches`` is false when
    the computed pair differs.
    """
    if n not in (1, 2):
        from .grassmann import ResourceLimitError
        raise ResourceLimitError("hypersurface_moduli_generality is supported for n = 1, 2")
    t, indep, names = hypersurface_torsion_tableau(n, zero_torsion, drop_symmetry)
    rep = cartan_characters(t, trials, seed)
    return HypersurfaceReport(n, rep, indep, names, (2, 2 * n + 1))
