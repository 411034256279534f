"""Exterior algebra over a named coframe.

A :class:`CoframeBasis` is an ordered list of generator 1-forms.  Each generator
is either the differential of a coordinate symbol or carries a declared value
for its exterior derivative.  Scalars are :class:`~crgeo.symexpr.ScalarExpr`
values; their differentials are expanded through the declared differentials of
the symbols they contain (with the chain rule for formal jet symbols).

Forms are sparse maps from strictly increasing generator-position tuples to
nonzero coefficients.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import gmpy2

from .symexpr import ONE, ZERO, ScalarExpr, SymbolId, as_expr, to_mpq

mpq = gmpy2.mpq

__all__ = [
    "ExtalgError",
    "BasisMismatchError",
    "MissingRuleError",
    "DegreeCapError",
    "NonInvertibleError",
    "CoframeBasis",
    "DiffForm",
    "wedge",
    "exterior_derivative",
    "change_coframe",
    "invert_matrix",
    "mat_mul",
    "identity_matrix",
    "solve_linear_forms",
    "LinearFormSolution",
    "MAX_DEGREE",
]

MAX_DEGREE = 4


class ExtalgError(ValueError):
    pass


class BasisMismatchError(ExtalgError):
    pass


class MissingRuleError(ExtalgError):
    pass


class DegreeCapError(ExtalgError):
    pass


class NonInvertibleError(ExtalgError):
    pass


class CoframeBasis:
    """Ordered generators with derivative rules.

    Parameters
    ----------
    names:
        Generator names, unique.
    exact:
        ``name -> symbol`` for generators that are the differential of a
        coordinate symbol.
    constants:
        Symbols treated as constants (zero differential).
    """

    def __init__(self, names: Sequence[str], exact: Mapping[str, SymbolId] | None = None,
                 constants: Iterable[SymbolId] = ()):
        names = list(names)
        if len(set(names)) != len(names):
            raise ExtalgError("generator names must be unique")
        self.names: tuple[str, ...] = tuple(names)
        self.position: dict[str, int] = {nm: k for k, nm in enumerate(names)}
        self.constants: frozenset = frozenset(constants)
        self._exact: dict[int, SymbolId] = {}
        self._rules: dict[int, DiffForm] = {}
        self._differentials: dict[SymbolId, DiffForm] = {}
        for nm, sym in (exact or {}).items():
            k = self.index(nm)
            self._exact[k] = sym
            self._differentials[sym] = self.gen(nm)

    def __len__(self) -> int:
        return len(self.names)

    def __repr__(self) -> str:
        return f"CoframeBasis({len(self.names)} generators)"

    def index(self, name: str) -> int:
        try:
            return self.position[name]
        except KeyError:
            raise ExtalgError(f"unknown generator {name!r}") from None

    # construction helpers -------------------------------------------------

    def gen(self, name: str, coeff=ONE) -> "DiffForm":
        c = as_expr(coeff)
        if c.is_zero():
            return DiffForm(self, 1, {})
        return DiffForm(self, 1, {(self.index(name),): c})

    def zero(self, degree: int) -> "DiffForm":
        return DiffForm(self, degree, {})

    def scalar(self, value) -> "DiffForm":
        v = as_expr(value)
        return DiffForm(self, 0, {(): v} if v else {})

    def one_form(self, coefficients: Mapping[str, object]) -> "DiffForm":
        terms = {}
        for nm, c in coefficients.items():
            c = as_expr(c)
            if c:
                terms[(self.index(nm),)] = c
        return DiffForm(self, 1, terms)

    # rules ----------------------------------------------------------------

    def set_rule(self, name: str, value: "DiffForm") -> None:
        """Declare d(generator) = value (a 2-form on this basis)."""
        k = self.index(name)
        if k in self._exact:
            raise ExtalgError(f"generator {name!r} is exact; it already has a rule")
        if value.basis is not self or value.degree != 2:
            raise ExtalgError("a generator rule must be a 2-form on the same basis")
        self._rules[k] = value

    def set_differential(self, sym: SymbolId, value: "DiffForm") -> None:
        """Declare the differential of a coordinate symbol as a 1-form."""
        if value.basis is not self or value.degree != 1:
            raise ExtalgError("a symbol differential must be a 1-form on the same basis")
        self._differentials[sym] = value

    def differential(self, sym: SymbolId) -> "DiffForm":
        if sym in self.constants:
            return self.zero(1)
        hit = self._differentials.get(sym)
        if hit is None:
            raise MissingRuleError(f"no differential declared for symbol {sym}")
        return hit

    def has_differential(self, sym: SymbolId) -> bool:
        return sym in self._differentials or sym in self.constants

    def generator_derivative(self, k: int) -> "DiffForm":
        if k in self._exact:
            return self.zero(2)
        rule = self._rules.get(k)
        if rule is None:
            raise MissingRuleError(f"no derivative rule for generator {self.names[k]!r}")
        return rule

    def is_exact(self, name: str) -> bool:
        return self.index(name) in self._exact

    def exact_symbol(self, name: str) -> SymbolId | None:
        return self._exact.get(self.index(name))

    def d_scalar(self, f) -> "DiffForm":
        f = as_expr(f)
        out: dict = {}
        seen: set = set()
        candidates = []
        for s in sorted(f.free_symbols(), key=lambda t: t.key):
            if s.kind == "jet":
                for t in self._differentials:
                    if t not in seen:
                        seen.add(t)
                        candidates.append(t)
            elif s not in seen:
                seen.add(s)
                candidates.append(s)
        for s in candidates:
            if s in self.constants:
                continue
            part = f.differentiate(s)
            if part.is_zero():
                continue
            ds = self.differential(s)
            for key, c in ds.terms.items():
                _acc(out, key, part * c)
        return DiffForm(self, 1, out)

    def verify_integrability(self) -> dict[str, "DiffForm"]:
        """d(d(theta)) for every generator with a declared rule; all zero when consistent."""
        return {self.names[k]: rule.d() for k, rule in self._rules.items()}


def _acc(terms: dict, key: tuple, value: ScalarExpr) -> None:
    if value.is_zero():
        return
    old = terms.get(key)
    if old is None:
        terms[key] = value
    else:
        new = old + value
        if new.is_zero():
            del terms[key]
        else:
            terms[key] = new


def _merge(a: tuple, b: tuple) -> tuple[int, tuple] | None:
    """Sign and sorted union of two increasing index tuples, or None on overlap."""
    if not a:
        return 1, b
    if not b:
        return 1, a
    out = []
    sign = 1
    i = j = 0
    la, lb = len(a), len(b)
    while i < la and j < lb:
        if a[i] == b[j]:
            return None
        if a[i] < b[j]:
            out.append(a[i])
            i += 1
        else:
            if (la - i) & 1:
                sign = -sign
            out.append(b[j])
            j += 1
    out.extend(a[i:])
    out.extend(b[j:])
    return sign, tuple(out)


class DiffForm:
    """Homogeneous differential form with :class:`ScalarExpr` coefficients."""

    __slots__ = ("basis", "degree", "terms")

    def __init__(self, basis: CoframeBasis, degree: int, terms: Mapping[tuple, ScalarExpr]):
        if degree > MAX_DEGREE:
            raise DegreeCapError(f"form degree {degree} exceeds the cap {MAX_DEGREE}")
        self.basis = basis
        self.degree = degree
        self.terms = {k: v for k, v in terms.items() if not v.is_zero()}

    # inspection -----------------------------------------------------------

    def is_zero(self) -> bool:
        return not self.terms

    def __bool__(self) -> bool:
        return bool(self.terms)

    def coefficient(self, *names: str) -> ScalarExpr:
        """Coefficient of the wedge of the named generators (any order)."""
        idx = [self.basis.index(nm) for nm in names]
        if len(set(idx)) != len(idx):
            return ZERO
        order = sorted(range(len(idx)), key=lambda k: idx[k])
        sign = _perm_sign(order)
        c = self.terms.get(tuple(sorted(idx)), ZERO)
        return c if sign > 0 else -c

    def components(self) -> list[tuple[tuple[str, ...], ScalarExpr]]:
        return [(tuple(self.basis.names[k] for k in key), self.terms[key]) for key in sorted(self.terms)]

    def scalar_value(self) -> ScalarExpr:
        if self.degree != 0:
            raise ExtalgError("not a 0-form")
        return self.terms.get((), ZERO)

    def free_symbols(self) -> set:
        out = set()
        for c in self.terms.values():
            out |= c.free_symbols()
        return out

    # arithmetic -----------------------------------------------------------

    def _check(self, other: "DiffForm") -> None:
        if other.basis is not self.basis:
            raise BasisMismatchError("forms live on different coframe bases")

    def __add__(self, other: "DiffForm") -> "DiffForm":
        if not isinstance(other, DiffForm):
            return NotImplemented
        self._check(other)
        if other.degree != self.degree:
            if not other.terms:
                return self
            if not self.terms:
                return other
            raise ExtalgError("cannot add forms of different degree")
        terms = dict(self.terms)
        for k, v in other.terms.items():
            _acc(terms, k, v)
        return DiffForm(self.basis, self.degree, terms)

    def __neg__(self) -> "DiffForm":
        return DiffForm(self.basis, self.degree, {k: -v for k, v in self.terms.items()})

    def __sub__(self, other: "DiffForm") -> "DiffForm":
        return self + (-other)

    def __mul__(self, scalar) -> "DiffForm":
        if isinstance(scalar, DiffForm):
            return NotImplemented
        s = as_expr(scalar)
        if s.is_zero():
            return DiffForm(self.basis, self.degree, {})
        return DiffForm(self.basis, self.degree, {k: v * s for k, v in self.terms.items()})

    __rmul__ = __mul__

    def __xor__(self, other: "DiffForm") -> "DiffForm":
        return wedge(self, other)

    def __eq__(self, other) -> bool:
        if not isinstance(other, DiffForm):
            return NotImplemented
        if other.basis is not self.basis:
            return False
        if not self.terms and not other.terms:
            return True
        return self.degree == other.degree and self.terms == other.terms

    def __hash__(self):
        return hash((id(self.basis), self.degree, frozenset(self.terms.items())))

    def map_coefficients(self, fn) -> "DiffForm":
        return DiffForm(self.basis, self.degree, {k: fn(v) for k, v in self.terms.items()})

    def substitute(self, mapping: Mapping[SymbolId, object]) -> "DiffForm":
        return self.map_coefficients(lambda c: c.substitute(mapping))

    def d(self) -> "DiffForm":
        return exterior_derivative(self)

    # printing -------------------------------------------------------------

    def __str__(self) -> str:
        if not self.terms:
            return "0"
        parts = []
        for names, c in self.components():
            wedge_txt = "^".join(names)
            if not names:
                parts.append(f"({c})")
            else:
                parts.append(f"({c})*{wedge_txt}")
        return " + ".join(parts)

    def __repr__(self) -> str:
        return f"DiffForm(degree={self.degree}, {self})"


def _perm_sign(order: Sequence[int]) -> int:
    sign = 1
    seen = list(order)
    for i in range(len(seen)):
        for j in range(i + 1, len(seen)):
            if seen[i] > seen[j]:
                sign = -sign
    return sign


def _as_form(x, basis: CoframeBasis | None) -> DiffForm:
    if isinstance(x, DiffForm):
        return x
    if basis is None:
        raise ExtalgError("a scalar operand needs a basis")
    return basis.scalar(x)


def wedge(a, b) -> DiffForm:
    """Exterior product.  Either operand may be a scalar."""
    basis = a.basis if isinstance(a, DiffForm) else (b.basis if isinstance(b, DiffForm) else None)
    a = _as_form(a, basis)
    b = _as_form(b, basis)
    if a.basis is not b.basis:
        raise BasisMismatchError("forms live on different coframe bases")
    deg = a.degree + b.degree
    if deg > MAX_DEGREE:
        raise DegreeCapError(f"form degree {deg} exceeds the cap {MAX_DEGREE}")
    out: dict = {}
    for ka, ca in a.terms.items():
        for kb, cb in b.terms.items():
            m = _merge(ka, kb)
            if m is None:
                continue
            sign, key = m
            prod = ca * cb
            _acc(out, key, prod if sign > 0 else -prod)
    return DiffForm(a.basis, deg, out)


def exterior_derivative(a) -> DiffForm:
    """d of a form, using the basis rules; the result has degree one higher."""
    if not isinstance(a, DiffForm):
        raise ExtalgError("use CoframeBasis.d_scalar for bare scalars")
    basis = a.basis
    if a.degree + 1 > MAX_DEGREE:
        raise DegreeCapError(f"form degree {a.degree + 1} exceeds the cap {MAX_DEGREE}")
    out: dict = {}
    for key, c in a.terms.items():
        dc = basis.d_scalar(c)
        gens = DiffForm(basis, len(key), {key: ONE})
        for k2, v in wedge(dc, gens).terms.items():
            _acc(out, k2, v)
        # d(theta_1 ^ ... ^ theta_p) by the graded Leibniz rule
        for pos, k in enumerate(key):
            dk = basis.generator_derivative(k)
            if dk.is_zero():
                continue
            left = DiffForm(basis, pos, {key[:pos]: ONE})
            right = DiffForm(basis, len(key) - pos - 1, {key[pos + 1:]: ONE})
            piece = wedge(wedge(left, dk), right)
            sign = -1 if pos & 1 else 1
            for k2, v in piece.terms.items():
                v = c * v
                _acc(out, k2, v if sign > 0 else -v)
    return DiffForm(basis, a.degree + 1, out)


# --------------------------------------------------------------------------
# Matrices of ScalarExpr


Matrix = list


def identity_matrix(n: int) -> Matrix:
    return [[ONE if i == j else ZERO for j in range(n)] for i in range(n)]


def mat_mul(a: Matrix, b: Matrix) -> Matrix:
    rows, inner, cols = len(a), len(b), len(b[0]) if b else 0
    out = []
    for i in range(rows):
        row = []
        ai = a[i]
        nz = [(k, ai[k]) for k in range(inner) if not as_expr(ai[k]).is_zero()]
        for j in range(cols):
            acc = ZERO
            for k, aik in nz:
                bkj = as_expr(b[k][j])
                if not bkj.is_zero():
                    acc = acc + as_expr(aik) * bkj
            row.append(acc)
        out.append(row)
    return out


def invert_matrix(g: Matrix) -> Matrix:
    """Gauss-Jordan inverse using only unit pivots (nonzero constants or
    single real-coefficient monomials).  Block-triangular matrices with
    monomial diagonal blocks always qualify."""
    n = len(g)
    if any(len(row) != n for row in g):
        raise NonInvertibleError("matrix is not square")
    a = [[as_expr(x) for x in row] for row in g]
    inv = identity_matrix(n)
    for col in range(n):
        pivot = None
        for r in range(col, n):
            if a[r][col].is_unit():
                pivot = r
                break
        if pivot is None:
            if all(a[r][col].is_zero() for r in range(col, n)):
                raise NonInvertibleError("matrix is singular")
            raise NonInvertibleError("no unit pivot available; matrix shape outside the supported class")
        a[col], a[pivot] = a[pivot], a[col]
        inv[col], inv[pivot] = inv[pivot], inv[col]
        p = a[col][col]
        a[col] = [x / p for x in a[col]]
        inv[col] = [x / p for x in inv[col]]
        for r in range(n):
            if r == col:
                continue
            f = a[r][col]
            if f.is_zero():
                continue
            a[r] = [x - f * y if not y.is_zero() else x for x, y in zip(a[r], a[col])]
            inv[r] = [x - f * y if not y.is_zero() else x for x, y in zip(inv[r], inv[col])]
    return inv


def change_coframe(a: DiffForm, g: Matrix, target: CoframeBasis | None = None,
                   g_inv: Matrix | None = None) -> DiffForm:
    """Rewrite ``a`` in the coframe ``theta = g . eta``.

    ``eta`` is the basis of ``a``.  ``target`` names the new generators
    (a fresh rule-less basis is created when omitted).  ``g_inv`` may be
    supplied when the inverse is known in closed form.
    """
    basis = a.basis
    n = len(basis)
    if len(g) != n:
        raise ExtalgError("coframe change matrix has the wrong size")
    if target is None:
        target = CoframeBasis([f"theta{k + 1}" for k in range(n)])
    if len(target) != n:
        raise ExtalgError("target basis has the wrong size")
    if g_inv is None:
        g_inv = invert_matrix(g)
    # eta^b = sum_c ginv[b][c] theta^c
    images: dict[int, list[tuple[int, ScalarExpr]]] = {}

    def image(b: int):
        hit = images.get(b)
        if hit is None:
            hit = [(c, as_expr(x)) for c, x in enumerate(g_inv[b]) if not as_expr(x).is_zero()]
            images[b] = hit
        return hit

    out: dict = {}
    for key, coeff in a.terms.items():
        partial = {(): coeff}
        for b in key:
            nxt: dict = {}
            for pk, pc in partial.items():
                for c, x in image(b):
                    m = _merge(pk, (c,))
                    if m is None:
                        continue
                    sign, k2 = m
                    v = pc * x
                    _acc(nxt, k2, v if sign > 0 else -v)
            partial = nxt
        for k2, v in partial.items():
            _acc(out, k2, v)
    return DiffForm(target, a.degree, out)


# --------------------------------------------------------------------------
# Linear solving for 1-form slots (Cartan's lemma bookkeeping)


@dataclass
class LinearFormSolution:
    values: dict[str, DiffForm]
    residuals: list[DiffForm]
    free_count: int = 0
    inconsistent: list = field(default_factory=list)

    @property
    def residual_zero(self) -> bool:
        return all(r.is_zero() for r in self.residuals)


def solve_linear_forms(targets: Sequence[DiffForm], slots: Sequence[str],
                       pattern: Sequence[Sequence[tuple]]) -> LinearFormSolution:
    """Find 1-forms for the named slots so that, for each target ``t``,
    ``targets[t] = sum(coef * slot ^ theta_gen for coef, slot, gen in pattern[t])``.

    Pattern coefficients are exact rationals, so the problem is a constant
    rational linear system whose right-hand sides are expressions.  Free
    variables are set to zero.  The residual of each target is what remains
    after subtracting the pattern evaluated at the solution; all-zero
    residuals certify exact solvability.
    """
    if len(targets) != len(pattern):
        raise ExtalgError("one pattern row per target is required")
    if not targets:
        return LinearFormSolution({}, [])
    basis = targets[0].basis
    n = len(basis)
    for t in targets:
        if t.basis is not basis:
            raise BasisMismatchError("targets live on different bases")
        if t.degree != 2 and not t.is_zero():
            raise ExtalgError("targets must be 2-forms")
    slot_pos = {s: k for k, s in enumerate(slots)}
    if len(slot_pos) != len(slots):
        raise ExtalgError("slot names must be unique")

    def var(s: int, c: int) -> int:
        return s * n + c

    # equations keyed by (target, u, v), u < v
    equations: dict[tuple, dict[int, mpq]] = {}
    for t, row in enumerate(pattern):
        for coef, slot, gen in row:
            coef = to_mpq(coef)
            if not coef:
                continue
            s = slot_pos[slot]
            g = basis.index(gen) if isinstance(gen, str) else int(gen)
            for c in range(n):
                if c == g:
                    continue
                if c < g:
                    key, sign = (t, c, g), 1
                else:
                    key, sign = (t, g, c), -1
                eq = equations.setdefault(key, {})
                v = var(s, c)
                val = eq.get(v, mpq(0)) + (coef if sign > 0 else -coef)
                if val:
                    eq[v] = val
                else:
                    eq.pop(v, None)

    # connected components by union-find over variables
    parent: dict[int, int] = {}

    def find(x):
        while parent.setdefault(x, x) != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for eq in equations.values():
        vs = list(eq)
        for v in vs[1:]:
            ra, rb = find(vs[0]), find(v)
            if ra != rb:
                parent[ra] = rb
    groups: dict[int, list] = {}
    for key, eq in equations.items():
        if not eq:
            continue
        groups.setdefault(find(next(iter(eq))), []).append(key)

    solution: dict[int, ScalarExpr] = {}
    free_total = 0
    for keys in groups.values():
        rows = []
        for key in keys:
            t, u, v = key
            rhs = targets[t].terms.get((u, v), ZERO)
            rows.append((dict(equations[key]), rhs))
        sol, nfree = _rref_solve(rows)
        free_total += nfree
        solution.update(sol)

    values: dict[str, DiffForm] = {}
    for s, name in enumerate(slots):
        terms = {}
        for c in range(n):
            x = solution.get(var(s, c))
            if x is not None and not x.is_zero():
                terms[(c,)] = x
        values[name] = DiffForm(basis, 1, terms)

    residuals = []
    for t, row in enumerate(pattern):
        r = targets[t]
        if r.is_zero():
            r = basis.zero(2)
        for coef, slot, gen in row:
            coef = to_mpq(coef)
            if not coef:
                continue
            g = basis.gen(gen) if isinstance(gen, str) else DiffForm(basis, 1, {(int(gen),): ONE})
            r = r - wedge(values[slot], g) * ScalarExpr.const(coef)
        residuals.append(r)
    return LinearFormSolution(values, residuals, free_total)


def _rref_solve(rows: list[tuple[dict, ScalarExpr]]) -> tuple[dict[int, ScalarExpr], int]:
    """Exact elimination for a small sparse rational system with expression
    right-hand sides; free variables are set to zero, inconsistent rows are
    left for the caller's residual computation."""
    pivots: list[tuple[int, dict, ScalarExpr]] = []
    allvars: set = set()
    for r, _ in rows:
        allvars |= set(r)
    work = [(dict(r), rhs) for r, rhs in rows]
    pivot_rows: dict[int, tuple[dict, ScalarExpr]] = {}
    for r, rhs in work:
        # reduce by existing pivots
        changed = True
        while changed:
            changed = False
            for v in list(r):
                if v in pivot_rows:
                    f = r[v]
                    pr, prhs = pivot_rows[v]
                    for w, c in pr.items():
                        nv = r.get(w, mpq(0)) - f * c
                        if nv:
                            r[w] = nv
                        else:
                            r.pop(w, None)
                    rhs = rhs - prhs.scale(f)
                    changed = True
                    break
        if not r:
            continue
        pv = min(r)
        f = r[pv]
        r = {w: c / f for w, c in r.items()}
        rhs = rhs.scale(1 / f)
        # eliminate pv from existing pivot rows
        for v, (pr, prhs) in list(pivot_rows.items()):
            if pv in pr:
                g = pr[pv]
                for w, c in r.items():
                    nv = pr.get(w, mpq(0)) - g * c
                    if nv:
                        pr[w] = nv
                    else:
                        pr.pop(w, None)
                pivot_rows[v] = (pr, prhs - rhs.scale(g))
        pivot_rows[pv] = (r, rhs)
    sol = {v: rhs for v, (r, rhs) in pivot_rows.items()}
    return sol, len(allvars) - len(pivot_rows)
