"""Batched evaluation of compiled polynomials in double precision.

Expressions are flattened to coefficient and exponent arrays once; evaluation
over many points then runs in a numba kernel, or in plain numpy when numba is
unavailable or ``CRGEO_NO_NUMBA=1`` is set.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np

__all__ = ["CompiledPolys", "compile_polys", "eval_polys", "USING_NUMBA"]


def _want_numba() -> bool:
    if os.environ.get("CRGEO_NO_NUMBA", "") not in ("", "0"):
        return False
    try:
        import numba  # noqa: F401
    except ImportError:
        return False
    return True


USING_NUMBA = _want_numba()


@dataclass(frozen=True)
class CompiledPolys:
    """Terms of several polynomials over a fixed variable order.

    ``coef[t]`` and ``exps[t, :]`` describe term ``t``, which belongs to
    polynomial ``owner[t]``.
    """

    nvars: int
    npoly: int
    coef: np.ndarray
    exps: np.ndarray
    owner: np.ndarray


def compile_polys(exprs: Sequence, variables: Sequence) -> CompiledPolys:
    """Flatten ScalarExprs over ``variables`` (every free symbol must appear)."""
    index = {v: k for k, v in enumerate(variables)}
    coef, exps, owner = [], [], []
    for k, e in enumerate(exprs):
        for mono, re, im in e.terms():
            row = np.zeros(len(variables), dtype=np.int64)
            for s, p in mono:
                if s not in index:
                    raise KeyError(f"symbol {s} is not among the compiled variables")
                row[index[s]] = p
            coef.append(complex(float(re), float(im)))
            exps.append(row)
            owner.append(k)
    return CompiledPolys(
        len(variables), len(exprs),
        np.array(coef, dtype=np.complex128),
        np.array(exps, dtype=np.int64).reshape(len(coef), len(variables)),
        np.array(owner, dtype=np.int64),
    )


def _eval_numpy(coef, exps, owner, npoly, values):
    out = np.zeros((values.shape[0], npoly), dtype=np.complex128)
    if coef.size == 0:
        return out
    # (batch, terms): product over variables of values ** exps
    terms = np.ones((values.shape[0], coef.size), dtype=np.complex128)
    for v in range(exps.shape[1]):
        e = exps[:, v]
        nz = e != 0
        if np.any(nz):
            terms[:, nz] *= values[:, v:v + 1] ** e[nz][None, :]
    terms *= coef[None, :]
    for t in range(coef.size):
        out[:, owner[t]] += terms[:, t]
    return out


if USING_NUMBA:
    from numba import njit

    @njit(cache=True)
    def _eval_numba(coef, exps, owner, npoly, values):  # pragma: no cover - compiled
        nb = values.shape[0]
        nt = coef.shape[0]
        nv = exps.shape[1]
        out = np.zeros((nb, npoly), dtype=np.complex128)
        for b in range(nb):
            for t in range(nt):
                acc = coef[t]
                for v in range(nv):
                    e = exps[t, v]
                    if e > 0:
                        x = values[b, v]
                        for _ in range(e):
                            acc *= x
                    elif e < 0:
                        x = 1.0 / values[b, v]
                        for _ in range(-e):
                            acc *= x
                out[b, owner[t]] += acc
        return out


def eval_polys(cp: CompiledPolys, values: np.ndarray, use_numba: bool | None = None) -> np.ndarray:
    """Evaluate at a batch of points: ``values`` has shape ``(batch, nvars)``."""
    values = np.ascontiguousarray(np.atleast_2d(values), dtype=np.complex128)
    if values.shape[1] != cp.nvars:
        raise ValueError(f"expected {cp.nvars} variables, got {values.shape[1]}")
    if use_numba is None:
        use_numba = USING_NUMBA
    if use_numba and USING_NUMBA and cp.coef.size:
        return _eval_numba(cp.coef, cp.exps, cp.owner, cp.npoly, values)
    return _eval_numpy(cp.coef, cp.exps, cp.owner, cp.npoly, values)
