"""Exact symbolic polynomials over the Gaussian rationals.

Expressions are sums of monomials in indexed symbols.  Each monomial carries a
coefficient ``re + im*i`` with ``re`` and ``im`` exact rationals (``gmpy2.mpq``).
Internally the real and imaginary parts are kept as two separate sparse
polynomials, which keeps the purely real computations of the Grassmann bundle
free of complex bookkeeping.

Symbols are interned: constructing the same :class:`SymbolId` twice returns the
same object, so equality is identity and hashing is cheap.  Negative exponents
are permitted (Laurent monomials); the group parametrisations in
:mod:`crgeo.grassmann` rely on them for diagonal entries.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Iterator, Mapping

import gmpy2

mpq = gmpy2.mpq

__all__ = [
    "Index",
    "SymbolId",
    "ScalarExpr",
    "Binding",
    "SymexprError",
    "ExprSyntaxError",
    "IndexRangeError",
    "UnknownIdentifierError",
    "UnboundSymbolError",
    "DifferentiationError",
    "to_mpq",
    "as_expr",
    "ZERO",
    "ONE",
    "coordinate",
    "parameter",
    "jet",
    "z",
    "zb",
    "w",
    "wb",
    "p",
    "pb",
    "P",
    "Pb",
    "c_sym",
    "F",
    "parse_expr",
    "differentiate",
    "conjugate",
    "evaluate",
    "evaluate_exact",
]


class SymexprError(ValueError):
    """Base class for errors raised by this module."""


class ExprSyntaxError(SymexprError):
    def __init__(self, message: str, position: int):
        super().__init__(f"{message} at position {position}")
        self.position = position


class IndexRangeError(SymexprError):
    pass


class UnknownIdentifierError(SymexprError):
    pass


class UnboundSymbolError(SymexprError):
    pass


class DifferentiationError(SymexprError):
    pass


def to_mpq(value) -> mpq:
    """Convert an int, Fraction, mpq or decimal string to ``mpq`` exactly."""
    if isinstance(value, type(mpq(0))):
        return value
    if isinstance(value, Fraction):
        return mpq(value.numerator, value.denominator)
    if isinstance(value, int):
        return mpq(value)
    if isinstance(value, str):
        f = Fraction(value)
        return mpq(f.numerator, f.denominator)
    if isinstance(value, float):
        f = Fraction(value)
        return mpq(f.numerator, f.denominator)
    raise TypeError(f"cannot convert {value!r} to an exact rational")


# --------------------------------------------------------------------------
# Symbols


@dataclass(frozen=True, order=True)
class Index:
    """One index slot: class ``"roman"`` or ``"greek"``, 1-based value, bar flag."""

    cls: str
    value: int
    barred: bool = False

    def bar(self) -> Index:
        return Index(self.cls, self.value, not self.barred)


_KIND_ORDER = {"coordinate": 0, "parameter": 1, "jet": 2}
_BY_UID: list = []


class SymbolId:
    """Interned identifier of a symbol.

    ``kind`` is ``"coordinate"``, ``"parameter"`` or ``"jet"``.  Jet symbols
    stand for formal partial derivatives of an unknown function; the derivation
    chain is stored sorted so mixed partials in either order coincide.  Real
    symbols (``real=True``) are fixed by conjugation; for complex symbols the
    bar involution flips every index bar, or the ``conj`` flag when the symbol
    carries no indices.
    """

    __slots__ = ("kind", "name", "indices", "chain", "real", "conj", "uid", "key", "_bar")
    _table: dict = {}

    def __new__(cls, kind: str, name: str, indices: Iterable[Index] = (),
                chain: Iterable["SymbolId"] = (), real: bool = False, conj: bool = False):
        if kind not in _KIND_ORDER:
            raise ValueError(f"unknown symbol kind {kind!r}")
        indices = tuple(indices)
        chain = tuple(sorted(chain, key=lambda s: s.key))
        if kind != "jet" and chain:
            raise ValueError("only jet symbols carry a derivation chain")
        if indices and conj:
            raise ValueError("indexed symbols encode conjugation in their index bars")
        if real:
            conj = False
        ident = (kind, name, indices, chain, real, conj)
        hit = cls._table.get(ident)
        if hit is not None:
            return hit
        self = object.__new__(cls)
        self.kind = kind
        self.name = name
        self.indices = indices
        self.chain = chain
        self.real = real
        self.conj = conj
        self.uid = len(cls._table)
        _BY_UID.append(self)
        self.key = (
            _KIND_ORDER[kind],
            name,
            conj,
            tuple((i.cls, i.value, i.barred) for i in indices),
            tuple(s.key for s in chain),
        )
        self._bar = None
        cls._table[ident] = self
        return self

    def __reduce__(self):
        return (SymbolId, (self.kind, self.name, self.indices, self.chain, self.real, self.conj))

    # equality and hashing are by identity (symbols are interned)

    def __lt__(self, other: "SymbolId") -> bool:
        return self.key < other.key

    def bar(self) -> "SymbolId":
        """The conjugate partner; ``s.bar().bar() is s``."""
        if self._bar is None:
            if self.real:
                self._bar = self
            elif self.indices:
                self._bar = SymbolId(self.kind, self.name, [i.bar() for i in self.indices],
                                     [s.bar() for s in self.chain])
            else:
                self._bar = SymbolId(self.kind, self.name, (), [s.bar() for s in self.chain],
                                     conj=not self.conj)
        return self._bar

    def with_chain(self, extra: "SymbolId") -> "SymbolId":
        return SymbolId(self.kind, self.name, self.indices, self.chain + (extra,), self.real, self.conj)

    def __repr__(self) -> str:
        return f"SymbolId({self})"

    def __str__(self) -> str:
        return _format_symbol(self)


def _format_symbol(s: SymbolId) -> str:
    head = s.name
    idx = s.indices
    if idx and all(i.barred for i in idx) and s.name in _GRAMMAR_FAMILIES:
        head += "b"
        parts = [str(i.value) for i in idx]
    else:
        parts = [f"{i.value}b" if i.barred else str(i.value) for i in idx]
    if s.conj:
        head += "b"
    if s.chain:
        chain = ",".join(_format_symbol(c) for c in s.chain)
        return f"{head}[{','.join(parts)};{chain}]"
    if parts:
        return f"{head}[{','.join(parts)}]"
    return head


def coordinate(name: str, *indices: Index, real: bool = False, conj: bool = False) -> SymbolId:
    return SymbolId("coordinate", name, indices, (), real, conj)


def parameter(name: str, *indices: Index, real: bool = False) -> SymbolId:
    return SymbolId("parameter", name, indices, (), real)


def jet(name: str, *indices: Index) -> SymbolId:
    return SymbolId("jet", name, indices)


def _g(v: int, barred: bool = False) -> Index:
    return Index("greek", v, barred)


def _r(v: int, barred: bool = False) -> Index:
    return Index("roman", v, barred)


def z(mu: int) -> SymbolId:
    return coordinate("z", _g(mu))


def zb(mu: int) -> SymbolId:
    return coordinate("z", _g(mu, True))


def w(i: int) -> SymbolId:
    return coordinate("w", _r(i))


def wb(i: int) -> SymbolId:
    return coordinate("w", _r(i, True))


def p(i: int, mu: int) -> SymbolId:
    """Fibre coordinate p^i_mu."""
    return coordinate("p", _r(i), _g(mu))


def pb(i: int, mu: int) -> SymbolId:
    """Conjugate fibre coordinate, the conjugate of p^i_mu."""
    return coordinate("p", _r(i, True), _g(mu, True))


def P(mu: int) -> SymbolId:
    return coordinate("P", _g(mu))


def Pb(mu: int) -> SymbolId:
    return coordinate("P", _g(mu, True))


def c_sym(barred: bool = False) -> SymbolId:
    return coordinate("c", conj=barred)


def F(i: int, mu: int) -> SymbolId:
    """Jet symbol for the right-hand side F^i_{mu-bar} of the system."""
    return jet("F", _r(i), _g(mu, True))


# Grammar families: name -> index classes.  Used by the parser and printer.
_GRAMMAR_FAMILIES: dict[str, tuple[str, ...]] = {
    "z": ("greek",),
    "w": ("roman",),
    "p": ("roman", "greek"),
    "P": ("greek",),
}

# Arguments of the formal function families: a symbol is an argument of a jet
# family when its name is listed and, for names mapped to True, its indices are
# uniformly barred or uniformly unbarred.
_JET_ARGUMENTS: dict[str, dict[str, bool]] = {
    "F": {"z": False, "w": False, "p": True},
    "f": {"z": False, "P": False},
}


def _is_jet_argument(j: SymbolId, s: SymbolId) -> bool:
    spec = _JET_ARGUMENTS.get(j.name)
    if spec is None:
        return s.kind == "coordinate"
    if s.name not in spec:
        return False
    if j.name == "f" and s.name == "z" and any(i.barred for i in s.indices):
        return False
    if spec[s.name]:
        bars = {i.barred for i in s.indices}
        return len(bars) == 1
    return True


# --------------------------------------------------------------------------
# Sparse polynomial core.
#
# A monomial is encoded as a Python int holding its exponent vector in balanced
# base 2**16: symbol ``s`` contributes ``e * 2**(16*s.uid)``.  Exponents stay far
# inside (-2**15, 2**15), so the encoding is unique and monomial multiplication
# is integer addition.  A polynomial is a dict monomial -> nonzero mpq.

_W = 16
_B = 1 << _W
_HALF = _B >> 1
_MASK = _B - 1
_ONE = 0
_DECODE_CACHE: dict = {}


def _enc(pairs: Iterable[tuple[SymbolId, int]]) -> int:
    m = 0
    for s, e in pairs:
        if e:
            m += e << (_W * s.uid)
    return m


def _dec(m: int) -> tuple:
    """Decode to a tuple of (SymbolId, exponent) sorted by uid."""
    hit = _DECODE_CACHE.get(m)
    if hit is not None:
        return hit
    out = []
    x = m
    uid = 0
    while x:
        low = x & _MASK
        if low == 0:
            # skip empty slots quickly
            tz = (x & -x).bit_length() - 1
            step = tz // _W
            x >>= _W * step
            uid += step
            continue
        e = low - _B if low >= _HALF else low
        out.append((_BY_UID[uid], e))
        x = (x - e) >> _W
        uid += 1
    res = tuple(out)
    if len(_DECODE_CACHE) > 500_000:
        _DECODE_CACHE.clear()
    _DECODE_CACHE[m] = res
    return res


_BIAS: list = [_HALF]


def _exponent(m: int, s: SymbolId) -> int:
    """Exponent of ``s`` in the monomial ``m``."""
    uid = s.uid
    while len(_BIAS) <= uid:
        _BIAS.append(_BIAS[-1] + (_HALF << (_W * len(_BIAS))))
    # biasing every lower digit to be nonnegative removes borrows
    shift = _W * uid
    return (((m + _BIAS[uid]) >> shift) & _MASK) - _HALF


def _poly_add_into(acc: dict, src: dict, scale=None) -> None:
    get = acc.get
    if scale is None:
        for m, c in src.items():
            v = get(m)
            if v is None:
                acc[m] = c
            else:
                v = v + c
                if v:
                    acc[m] = v
                else:
                    del acc[m]
    else:
        for m, c in src.items():
            v = get(m)
            c = c * scale
            if v is None:
                acc[m] = c
            else:
                v = v + c
                if v:
                    acc[m] = v
                else:
                    del acc[m]


def _poly_mul_into(acc: dict, a: dict, b: dict, sign: int = 1) -> None:
    if len(a) > len(b):
        a, b = b, a
    get = acc.get
    bitems = list(b.items())
    for ma, ca in a.items():
        if sign < 0:
            ca = -ca
        for mb, cb in bitems:
            m = ma + mb
            v = get(m)
            if v is None:
                acc[m] = ca * cb
            else:
                v = v + ca * cb
                if v:
                    acc[m] = v
                else:
                    del acc[m]


def _mono_degree(m: int) -> int:
    return sum(e for _, e in _dec(m))


def _mono_sort_key(m: int):
    pairs = _dec(m)
    return (-sum(e for _, e in pairs), tuple((s.key, -e) for s, e in sorted(pairs, key=lambda t: t[0].key)))


# --------------------------------------------------------------------------
# ScalarExpr


class ScalarExpr:
    """Immutable Gaussian-rational Laurent polynomial in :class:`SymbolId` symbols."""

    __slots__ = ("_re", "_im", "_hash")

    def __init__(self, re_part: Mapping | None = None, im_part: Mapping | None = None,
                 _trusted: bool = False):
        if _trusted:
            self._re = re_part
            self._im = im_part
        else:
            self._re = self._canon(re_part or {})
            self._im = self._canon(im_part or {})
        self._hash = None

    @staticmethod
    def _canon(part: Mapping) -> dict:
        """Accepts monomials given as encoded ints or as (symbol, exponent) pairs."""
        out: dict = {}
        for mono, coeff in part.items():
            if not isinstance(mono, int):
                mono = _enc(mono)
            c = to_mpq(coeff)
            if not c:
                continue
            v = out.get(mono, mpq(0)) + c
            if v:
                out[mono] = v
            else:
                out.pop(mono, None)
        return out

    # construction ---------------------------------------------------------

    @classmethod
    def const(cls, re_value=0, im_value=0) -> "ScalarExpr":
        r = to_mpq(re_value)
        i = to_mpq(im_value)
        return cls({_ONE: r} if r else {}, {_ONE: i} if i else {}, _trusted=True)

    @classmethod
    def symbol(cls, s: SymbolId, power: int = 1) -> "ScalarExpr":
        if power == 0:
            return cls.const(1)
        return cls({power << (_W * s.uid): mpq(1)}, {}, _trusted=True)

    @classmethod
    def imag_unit(cls) -> "ScalarExpr":
        return cls.const(0, 1)

    def __reduce__(self):
        return (_rebuild_expr, ([(_dec(m), c) for m, c in self._re.items()],
                                [(_dec(m), c) for m, c in self._im.items()]))

    # inspection -----------------------------------------------------------

    def is_zero(self) -> bool:
        return not self._re and not self._im

    def __bool__(self) -> bool:
        return not self.is_zero()

    def is_constant(self) -> bool:
        return all(m == _ONE for m in self._re) and all(m == _ONE for m in self._im)

    def constant_value(self) -> tuple[mpq, mpq]:
        """Exact (re, im) of a constant expression."""
        if not self.is_constant():
            raise SymexprError("expression is not constant")
        return self._re.get(_ONE, mpq(0)), self._im.get(_ONE, mpq(0))

    def is_unit(self) -> bool:
        """True for a nonzero constant times a single monomial with real coefficient."""
        if self.is_constant():
            return not self.is_zero()
        return self.n_terms() == 1 and self.is_real_coefficients()

    def is_real_coefficients(self) -> bool:
        return not self._im

    def _raw_monomials(self) -> list[int]:
        ms = set(self._re) | set(self._im)
        return sorted(ms, key=_mono_sort_key)

    def monomials(self) -> list[tuple]:
        """Monomials in canonical print order, as (symbol, exponent) tuples."""
        return [_dec(m) for m in self._raw_monomials()]

    def terms(self) -> Iterator[tuple[tuple, mpq, mpq]]:
        """Yield ``(monomial, re, im)`` in canonical print order."""
        for m in self._raw_monomials():
            yield _dec(m), self._re.get(m, mpq(0)), self._im.get(m, mpq(0))

    def coefficient(self, monomial: Iterable[tuple[SymbolId, int]] = ()) -> tuple[mpq, mpq]:
        m = _enc(monomial)
        return self._re.get(m, mpq(0)), self._im.get(m, mpq(0))

    def free_symbols(self) -> set[SymbolId]:
        out = set()
        for part in (self._re, self._im):
            for m in part:
                for s, _ in _dec(m):
                    out.add(s)
        return out

    def degree(self) -> int:
        return max((_mono_degree(m) for m in set(self._re) | set(self._im)), default=0)

    def n_terms(self) -> int:
        return len(set(self._re) | set(self._im))

    # equality -------------------------------------------------------------

    def __eq__(self, other) -> bool:
        if not isinstance(other, ScalarExpr):
            try:
                other = as_expr(other)
            except TypeError:
                return NotImplemented
        return self._re == other._re and self._im == other._im

    def __hash__(self) -> int:
        if self._hash is None:
            self._hash = hash((frozenset(self._re.items()), frozenset(self._im.items())))
        return self._hash

    # arithmetic -----------------------------------------------------------

    def __add__(self, other) -> "ScalarExpr":
        other = as_expr(other)
        if other.is_zero():
            return self
        if self.is_zero():
            return other
        re_part = dict(self._re)
        _poly_add_into(re_part, other._re)
        im_part = dict(self._im)
        _poly_add_into(im_part, other._im)
        return ScalarExpr(re_part, im_part, _trusted=True)

    __radd__ = __add__

    def __neg__(self) -> "ScalarExpr":
        return ScalarExpr({m: -c for m, c in self._re.items()},
                          {m: -c for m, c in self._im.items()}, _trusted=True)

    def __sub__(self, other) -> "ScalarExpr":
        other = as_expr(other)
        if other.is_zero():
            return self
        re_part = dict(self._re)
        _poly_add_into(re_part, other._re, -1)
        im_part = dict(self._im)
        _poly_add_into(im_part, other._im, -1)
        return ScalarExpr(re_part, im_part, _trusted=True)

    def __rsub__(self, other) -> "ScalarExpr":
        return as_expr(other) - self

    def __mul__(self, other) -> "ScalarExpr":
        other = as_expr(other)
        if self.is_zero() or other.is_zero():
            return ZERO
        re_part: dict = {}
        im_part: dict = {}
        a, b, c, d = self._re, self._im, other._re, other._im
        if a and c:
            _poly_mul_into(re_part, a, c)
        if b and d:
            _poly_mul_into(re_part, b, d, -1)
        if a and d:
            _poly_mul_into(im_part, a, d)
        if b and c:
            _poly_mul_into(im_part, b, c)
        return ScalarExpr(re_part, im_part, _trusted=True)

    __rmul__ = __mul__

    def scale(self, re_value, im_value=0) -> "ScalarExpr":
        """Multiply by the exact constant ``re_value + im_value*i``."""
        r = to_mpq(re_value)
        i = to_mpq(im_value)
        if not i:
            if not r:
                return ZERO
            return ScalarExpr({m: c * r for m, c in self._re.items()},
                              {m: c * r for m, c in self._im.items()}, _trusted=True)
        return self * ScalarExpr.const(r, i)

    def __truediv__(self, other) -> "ScalarExpr":
        other = as_expr(other)
        if other.is_constant():
            r, i = other.constant_value()
            den = r * r + i * i
            if not den:
                raise ZeroDivisionError("division by zero expression")
            return self.scale(r / den, -i / den)
        if other.n_terms() == 1 and other.is_real_coefficients():
            (m, c), = other._re.items()
            return self * ScalarExpr({-m: 1 / c}, {}, _trusted=True)
        raise SymexprError("division is only defined by constants and real monomials")

    def __pow__(self, k: int) -> "ScalarExpr":
        if not isinstance(k, int):
            raise TypeError("exponent must be an integer")
        if k < 0:
            if self.n_terms() != 1:
                raise SymexprError("negative powers are only defined for single monomials")
            return ONE / (self ** (-k))
        out = ONE
        base = self
        while k:
            if k & 1:
                out = out * base
            k >>= 1
            if k:
                base = base * base
        return out

    # structural operations ------------------------------------------------

    def conjugate(self) -> "ScalarExpr":
        cache: dict = {}

        def bar_mono(m):
            hit = cache.get(m)
            if hit is None:
                hit = _enc((s.bar(), e) for s, e in _dec(m))
                cache[m] = hit
            return hit

        return ScalarExpr({bar_mono(m): c for m, c in self._re.items()},
                          {bar_mono(m): -c for m, c in self._im.items()}, _trusted=True)

    def real_part(self) -> "ScalarExpr":
        return (self + self.conjugate()).scale(mpq(1, 2))

    def first_order_at_units(self, units: Iterable[SymbolId]) -> tuple[tuple[mpq, mpq], dict]:
        """Value and gradient at the point where ``units`` are 1 and every
        other symbol is 0.  Only real-part coefficients of the gradient are
        keyed by symbol; each entry is a ``(re, im)`` pair."""
        shifts = [(s, _W * s.uid) for s in units]
        val = [mpq(0), mpq(0)]
        grad: dict = {}
        for part, slot in ((self._re, 0), (self._im, 1)):
            for m, c in part.items():
                rest = m
                ds = []
                for s, sh in shifts:
                    hi = (m + (1 << sh >> 1)) >> sh if sh else m
                    e = ((hi + _HALF) & _MASK) - _HALF
                    if e:
                        rest -= e << sh
                        ds.append((s, e))
                if rest == 0:
                    val[slot] += c
                    for s, e in ds:
                        g = grad.setdefault(s, [mpq(0), mpq(0)])
                        g[slot] += c * e
                    continue
                if rest & (rest - 1) or rest < 0 or (rest.bit_length() - 1) % _W:
                    continue
                sym = _BY_UID[(rest.bit_length() - 1) // _W]
                g = grad.setdefault(sym, [mpq(0), mpq(0)])
                g[slot] += c
        return (val[0], val[1]), {k: (v[0], v[1]) for k, v in grad.items() if v[0] or v[1]}

    def differentiate(self, s: SymbolId) -> "ScalarExpr":
        if s.kind == "jet":
            raise DifferentiationError(f"cannot differentiate with respect to jet symbol {s}")
        unit = 1 << (_W * s.uid)
        re_part: dict = {}
        im_part: dict = {}
        for src, dst in ((self._re, re_part), (self._im, im_part)):
            for m, c in src.items():
                e = _exponent(m, s)
                if e:
                    _poly_add_into(dst, {m - unit: c * e})
                for t, et in _dec(m):
                    if t.kind == "jet" and _is_jet_argument(t, s):
                        tunit = 1 << (_W * t.uid)
                        nxt = t.with_chain(s)
                        mono = m - tunit + (1 << (_W * nxt.uid))
                        _poly_add_into(dst, {mono: c * et})
        return ScalarExpr(re_part, im_part, _trusted=True)

    def substitute(self, mapping: Mapping[SymbolId, "ScalarExpr"]) -> "ScalarExpr":
        """Replace symbols by expressions (exact, simultaneous)."""
        if not mapping:
            return self
        mapping = {k: as_expr(v) for k, v in mapping.items()}
        power_cache: dict = {}

        def power(s, e):
            key = (s, e)
            hit = power_cache.get(key)
            if hit is None:
                hit = mapping[s] ** e
                power_cache[key] = hit
            return hit

        out_re: dict = {}
        out_im: dict = {}
        for part, is_im in ((self._re, False), (self._im, True)):
            for m, c in part.items():
                pairs = _dec(m)
                subs = [(s, e) for s, e in pairs if s in mapping]
                if not subs:
                    _poly_add_into(out_im if is_im else out_re, {m: c})
                    continue
                kept = m - _enc(subs)
                term = ScalarExpr({}, {kept: c}, _trusted=True) if is_im else \
                    ScalarExpr({kept: c}, {}, _trusted=True)
                for s, e in subs:
                    term = term * power(s, e)
                _poly_add_into(out_re, term._re)
                _poly_add_into(out_im, term._im)
        return ScalarExpr(out_re, out_im, _trusted=True)

    # printing -------------------------------------------------------------

    def __str__(self) -> str:
        return self.to_string()

    def __repr__(self) -> str:
        return f"ScalarExpr({self.to_string()!r})"

    def to_string(self) -> str:
        if self.is_zero():
            return "0"
        pieces = []
        for m, r, i in self.terms():
            coeff, negative = _format_coeff(r, i)
            factors = []
            for s, e in sorted(m, key=lambda t: t[0].key):
                if e == 1:
                    factors.append(str(s))
                elif e > 0:
                    factors.append(f"{s}^{e}")
                else:
                    factors.append(f"{s}^({e})")
            if coeff == "1" and factors:
                body = "*".join(factors)
            elif factors:
                body = coeff + "*" + "*".join(factors)
            else:
                body = coeff
            pieces.append(("-" if negative else "+", body))
        first_sign, first_body = pieces[0]
        text = ("-" if first_sign == "-" else "") + first_body
        for sign, body in pieces[1:]:
            text += f" {sign} {body}"
        return text


def _rebuild_expr(re_items, im_items) -> ScalarExpr:
    return ScalarExpr(dict(re_items), dict(im_items))


def _fmt_q(q: mpq) -> str:
    if q.denominator == 1:
        return str(q.numerator)
    return f"{q.numerator}/{q.denominator}"


def _format_coeff(r: mpq, i: mpq) -> tuple[str, bool]:
    """Return (text, negative) for a coefficient; text carries no leading sign."""
    if not i:
        return _fmt_q(abs(r)), r < 0
    if not r:
        mag = abs(i)
        return ("i" if mag == 1 else f"{_fmt_q(mag)}*i"), i < 0
    sign = "+" if i > 0 else "-"
    mag = abs(i)
    imag = "i" if mag == 1 else f"{_fmt_q(mag)}*i"
    if r < 0:
        inner_sign = "-" if i > 0 else "+"
        return f"({_fmt_q(-r)} {inner_sign} {imag})", True
    return f"({_fmt_q(r)} {sign} {imag})", False


ZERO = ScalarExpr({}, {}, _trusted=True)
ONE = ScalarExpr({_ONE: mpq(1)}, {}, _trusted=True)


def as_expr(value) -> ScalarExpr:
    if isinstance(value, ScalarExpr):
        return value
    if isinstance(value, SymbolId):
        return ScalarExpr.symbol(value)
    if isinstance(value, (int, Fraction, type(mpq(0)))):
        return ScalarExpr.const(value)
    if isinstance(value, complex):
        raise TypeError("floating point values are not exact; use ScalarExpr.const")
    raise TypeError(f"cannot interpret {value!r} as an expression")


ScalarExpr.zero = ZERO
ScalarExpr.one = ONE


# --------------------------------------------------------------------------
# Functional API


def differentiate(e: ScalarExpr, s: SymbolId) -> ScalarExpr:
    return as_expr(e).differentiate(s)


def conjugate(e: ScalarExpr) -> ScalarExpr:
    return as_expr(e).conjugate()


class Binding:
    """Complex values for symbols, closed under the bar involution.

    Values given for one member of a conjugate pair are mirrored onto the
    partner.  Supplying both members with inconsistent values raises.
    """

    def __init__(self, values: Mapping[SymbolId, complex] | None = None, tol: float = 1e-12):
        self._values: dict[SymbolId, complex] = {}
        for s, v in (values or {}).items():
            self.set(s, v, tol)

    def set(self, s: SymbolId, value: complex, tol: float = 1e-12) -> None:
        value = complex(value)
        partner = s.bar()
        if s.real and abs(value.imag) > tol * max(1.0, abs(value)):
            raise SymexprError(f"real symbol {s} bound to non-real value {value}")
        for sym, val in ((s, value), (partner, value.conjugate())):
            old = self._values.get(sym)
            if old is not None and abs(old - val) > tol * max(1.0, abs(val)):
                raise SymexprError(f"binding for {sym} is not conjugate-consistent")
            self._values[sym] = val

    def __getitem__(self, s: SymbolId) -> complex:
        try:
            return self._values[s]
        except KeyError:
            raise UnboundSymbolError(f"symbol {s} is not bound") from None

    def __contains__(self, s: SymbolId) -> bool:
        return s in self._values

    def items(self):
        return self._values.items()


def evaluate(e: ScalarExpr, b: Binding | Mapping[SymbolId, complex]) -> complex:
    """Numeric value of ``e`` in double precision (lossy path)."""
    if not isinstance(b, Binding):
        b = Binding(b)
    total = 0j
    for part, unit in ((e._re, 1.0), (e._im, 1j)):
        for m, c in part.items():
            v = complex(float(c)) * unit
            for s, k in _dec(m):
                v *= b[s] ** k
            total += v
    return total


def evaluate_exact(e: ScalarExpr, values: Mapping[SymbolId, tuple]) -> tuple[mpq, mpq]:
    """Exact value at a Gaussian-rational point.

    ``values`` maps symbols to ``(re, im)`` pairs; conjugate partners are
    filled in automatically.
    """
    full: dict[SymbolId, ScalarExpr] = {}
    for s, (r, i) in values.items():
        full[s] = ScalarExpr.const(r, i)
        full.setdefault(s.bar(), ScalarExpr.const(r, -to_mpq(i)))
    missing = e.free_symbols() - set(full)
    if missing:
        raise UnboundSymbolError(f"symbols not bound: {', '.join(sorted(map(str, missing)))}")
    return e.substitute(full).constant_value()


# --------------------------------------------------------------------------
# Parser (precedence climbing)

_TOKEN = re.compile(r"\s*(?:(\d+)|([A-Za-z_][A-Za-z_0-9]*)|(.))")


@dataclass
class _Tok:
    kind: str  # num, ident, op, end
    text: str
    pos: int


def _tokenize(text: str) -> list[_Tok]:
    toks = []
    pos = 0
    n = len(text)
    while pos < n:
        m = _TOKEN.match(text, pos)
        if m is None:
            break
        if m.group(1) is not None:
            toks.append(_Tok("num", m.group(1), m.start(1)))
        elif m.group(2) is not None:
            toks.append(_Tok("ident", m.group(2), m.start(2)))
        elif m.group(3) is not None:
            ch = m.group(3)
            if ch not in "+-*^/()[],;":
                raise ExprSyntaxError(f"unexpected character {ch!r}", m.start(3))
            toks.append(_Tok("op", ch, m.start(3)))
        pos = m.end()
    toks.append(_Tok("end", "", len(text)))
    return toks


class _Parser:
    def __init__(self, text: str, n: int, d: int, constants: Mapping[str, ScalarExpr]):
        self.text = text
        self.toks = _tokenize(text)
        self.i = 0
        self.n = n
        self.d = d
        self.constants = constants

    def peek(self) -> _Tok:
        return self.toks[self.i]

    def take(self) -> _Tok:
        t = self.toks[self.i]
        self.i += 1
        return t

    def expect(self, text: str) -> _Tok:
        t = self.take()
        if t.text != text:
            raise ExprSyntaxError(f"expected {text!r}, found {t.text or 'end of input'!r}", t.pos)
        return t

    def parse(self) -> ScalarExpr:
        e = self.expr()
        t = self.peek()
        if t.kind != "end":
            raise ExprSyntaxError(f"unexpected token {t.text!r}", t.pos)
        return e

    def expr(self) -> ScalarExpr:
        e = self.term()
        while self.peek().text in ("+", "-"):
            op = self.take().text
            rhs = self.term()
            e = e + rhs if op == "+" else e - rhs
        return e

    def term(self) -> ScalarExpr:
        e = self.unary()
        while self.peek().text == "*":
            self.take()
            e = e * self.unary()
        return e

    def unary(self) -> ScalarExpr:
        if self.peek().text == "-":
            self.take()
            return -self.unary()
        if self.peek().text == "+":
            self.take()
            return self.unary()
        return self.power()

    def power(self) -> ScalarExpr:
        base = self.atom()
        if self.peek().text == "^":
            tok = self.take()
            k = self.exponent()
            try:
                return base ** k
            except SymexprError as exc:
                raise ExprSyntaxError(str(exc), tok.pos) from None
        return base

    def exponent(self) -> int:
        t = self.peek()
        sign = 1
        if t.text == "(":
            self.take()
            if self.peek().text == "-":
                self.take()
                sign = -1
            num = self.take()
            if num.kind != "num":
                raise ExprSyntaxError("exponent must be an integer", num.pos)
            self.expect(")")
            return sign * int(num.text)
        if t.text == "-":
            self.take()
            sign = -1
            t = self.peek()
        if t.kind != "num":
            raise ExprSyntaxError("exponent must be an integer", t.pos)
        self.take()
        return sign * int(t.text)

    def atom(self) -> ScalarExpr:
        t = self.take()
        if t.kind == "num":
            value = mpq(int(t.text))
            if self.peek().text == "/":
                self.take()
                den = self.take()
                if den.kind != "num":
                    raise ExprSyntaxError("'/' is only allowed between integer literals", den.pos)
                if int(den.text) == 0:
                    raise ExprSyntaxError("zero denominator", den.pos)
                value = mpq(int(t.text), int(den.text))
            return ScalarExpr.const(value)
        if t.text == "(":
            e = self.expr()
            self.expect(")")
            return e
        if t.kind == "ident":
            return self.identifier(t)
        raise ExprSyntaxError(f"unexpected token {t.text or 'end of input'!r}", t.pos)

    def identifier(self, t: _Tok) -> ScalarExpr:
        name = t.text
        if name == "i":
            return ScalarExpr.imag_unit()
        if name == "conj":
            self.expect("(")
            e = self.expr()
            self.expect(")")
            return e.conjugate()
        if name in self.constants:
            return as_expr(self.constants[name])
        if name in ("c", "cb"):
            return ScalarExpr.symbol(c_sym(name == "cb"))
        return ScalarExpr.symbol(self.indexed_symbol(t))

    def index_list(self) -> list[tuple[int, bool, int]]:
        """Parse ``[v, vb, ...]``; returns (value, barred, position) triples."""
        self.expect("[")
        out = []
        while True:
            tok = self.take()
            if tok.kind != "num":
                raise ExprSyntaxError("expected an index", tok.pos)
            barred = False
            nxt = self.peek()
            if nxt.kind == "ident" and nxt.text == "b" and nxt.pos == tok.pos + len(tok.text):
                self.take()
                barred = True
            out.append((int(tok.text), barred, tok.pos))
            if self.peek().text == ",":
                self.take()
                continue
            break
        return out

    def check_range(self, cls: str, value: int, pos: int) -> None:
        top = self.n if cls == "greek" else self.d
        if not 1 <= value <= top:
            label = "n" if cls == "greek" else "d"
            raise IndexRangeError(f"index {value} at position {pos} outside 1..{top} ({label}={top})")

    def indexed_symbol(self, t: _Tok) -> SymbolId:
        name = t.text
        barred_family = False
        base = name
        if name in _GRAMMAR_FAMILIES:
            base = name
        elif name.endswith("b") and name[:-1] in _GRAMMAR_FAMILIES:
            base = name[:-1]
            barred_family = True
        elif name == "F":
            return self.jet_symbol(t)
        else:
            raise UnknownIdentifierError(f"unknown identifier {name!r} at position {t.pos}")
        classes = _GRAMMAR_FAMILIES[base]
        if self.peek().text != "[":
            raise ExprSyntaxError(f"{name} needs {len(classes)} index(es)", self.peek().pos)
        idx = self.index_list()
        self.expect("]")
        if len(idx) != len(classes):
            raise ExprSyntaxError(f"{name} takes {len(classes)} index(es), got {len(idx)}", t.pos)
        indices = []
        for cls, (value, barred, pos) in zip(classes, idx):
            self.check_range(cls, value, pos)
            indices.append(Index(cls, value, barred or barred_family))
        return coordinate(base, *indices)

    def jet_symbol(self, t: _Tok) -> SymbolId:
        idx = self.index_list()
        if len(idx) != 2:
            raise ExprSyntaxError("F takes two indices", t.pos)
        (iv, ib, ipos), (mv, mb, mpos) = idx
        self.check_range("roman", iv, ipos)
        self.check_range("greek", mv, mpos)
        s = jet("F", Index("roman", iv, ib), Index("greek", mv, mb))
        if self.peek().text == ";":
            self.take()
            while True:
                tok = self.take()
                if tok.kind != "ident":
                    raise ExprSyntaxError("expected a coordinate in the derivation chain", tok.pos)
                arg = ScalarExpr.symbol(self.indexed_symbol(tok)) if tok.text not in ("c", "cb") \
                    else ScalarExpr.symbol(c_sym(tok.text == "cb"))
                (sym, _), = arg.monomials()[0]
                s = s.with_chain(sym)
                if self.peek().text == ",":
                    self.take()
                    continue
                break
        self.expect("]")
        return s


def parse_expr(text: str, n: int, d: int, constants: Mapping[str, object] | None = None) -> ScalarExpr:
    """Parse ``text`` in the expression grammar for a system with ``n`` greek
    and ``d`` roman index values.

    ``constants`` maps extra identifiers (e.g. ``k``) to exact values.
    """
    consts = {k: as_expr(v) if not isinstance(v, str) else ScalarExpr.const(to_mpq(v))
              for k, v in (constants or {}).items()}
    return _Parser(text, n, d, consts).parse()
