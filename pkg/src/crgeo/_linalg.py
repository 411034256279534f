"""Exact rational linear algebra on small dense matrices (lists of mpq rows)."""

from __future__ import annotations

from typing import Sequence

import gmpy2

mpq = gmpy2.mpq


def rref(rows: Sequence[Sequence], ncols: int | None = None) -> tuple[list[list], list[int]]:
    """Reduced row echelon form and pivot columns."""
    m = [[mpq(x) for x in r] for r in rows]
    if not m:
        return [], []
    ncols = len(m[0]) if ncols is None else ncols
    pivots = []
    r = 0
    for c in range(ncols):
        piv = None
        for k in range(r, len(m)):
            if m[k][c]:
                piv = k
                break
        if piv is None:
            continue
        m[r], m[piv] = m[piv], m[r]
        inv = 1 / m[r][c]
        m[r] = [x * inv for x in m[r]]
        for k in range(len(m)):
            if k != r and m[k][c]:
                f = m[k][c]
                m[k] = [x - f * y for x, y in zip(m[k], m[r])]
        pivots.append(c)
        r += 1
        if r == len(m):
            break
    return m[:r], pivots


def rank(rows: Sequence[Sequence]) -> int:
    return len(rref(rows)[1])


def nullspace(rows: Sequence[Sequence], ncols: int) -> list[list]:
    """Basis of the right null space (vectors of length ``ncols``)."""
    if not rows:
        return [[mpq(1) if i == j else mpq(0) for i in range(ncols)] for j in range(ncols)]
    red, piv = rref(rows, ncols)
    free = [c for c in range(ncols) if c not in piv]
    basis = []
    for f in free:
        v = [mpq(0)] * ncols
        v[f] = mpq(1)
        for r, pc in enumerate(piv):
            v[pc] = -red[r][f]
        basis.append(v)
    return basis


def in_span(columns: Sequence[Sequence], target: Sequence) -> bool:
    """Whether ``target`` is a rational combination of ``columns``."""
    if not any(target):
        return True
    if not columns:
        return False
    rows = [list(r) for r in zip(*columns)]
    aug = [r + [t] for r, t in zip(rows, target)]
    return rank(rows) == rank(aug)
