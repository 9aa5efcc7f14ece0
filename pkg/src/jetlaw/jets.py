"""Jet coordinates, multi-indices, total derivatives, and prolonged
evolutionary vector fields.

Multi-indices are unordered multisets of independent-variable names; mixed
derivatives are interned in sorted order at construction.  All sums "over
all multi-indices" enumerate only the jets actually present in the operand,
which keeps the formally infinite prolongation sums finite.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Sequence

from . import expr as ex
from .expr import DimensionError, Expr, Frac, JetlawError

__all__ = [
    "MultiIndex",
    "midx",
    "signed_factor",
    "total_derivative",
    "total_derivative_multi",
    "signed_total_derivative_multi",
    "Characteristic",
    "prolong_apply",
]

MultiIndex = tuple  # sorted tuple of independent-variable names


def midx(*names: str) -> MultiIndex:
    return tuple(sorted(names))


def signed_factor(J: MultiIndex) -> int:
    return -1 if len(J) % 2 else 1


def _diff_atom_total(a, i: str) -> Frac:
    """Total-derivative action on a single generator."""
    if isinstance(a, ex.IndepAtom):
        return ex.F_ONE if a.name == i else ex.F_ZERO
    if isinstance(a, ex.JetAtom):
        return ex._atom_frac(ex.jet_atom(a.dep, a.midx + (i,)))
    if isinstance(a, ex.ConstAtom):
        return ex.F_ZERO
    if isinstance(a, ex.OpaqueAtom):
        total = ex.F_ZERO
        for s_idx, arg in enumerate(a.args, start=1):
            d = _diff_frac_total(arg, i)
            if ex.f_is_zero(d):
                continue
            tagged = ex.opaque_atom(a.fname, a.tags + (s_idx,), a.args)
            total = ex.f_add(total, ex.f_mul(ex._atom_frac(tagged), d))
        return total
    if isinstance(a, ex.ElemAtom):
        d = _diff_frac_total(a.arg, i)
        if ex.f_is_zero(d):
            return ex.F_ZERO
        return ex.f_mul(ex._elem_derivative(a), d)
    if isinstance(a, ex.RootAtom):
        d = _diff_frac_total(a.base, i)
        if ex.f_is_zero(d):
            return ex.F_ZERO
        r = ex._atom_frac(a)
        return ex.f_scale(ex.f_div(ex.f_mul(r, d), a.base), Fraction(1, a.k))
    raise JetlawError("cannot total-differentiate atom")


def _diff_poly_total(p: dict, i: str) -> Frac:
    total = ex.F_ZERO
    fast: dict = {}
    for m, c in p.items():
        for idx, (g, e) in enumerate(m):
            d = _diff_atom_total(g, i)
            if ex.f_is_zero(d):
                continue
            rest = m[:idx] + ((g, e - 1),) + m[idx + 1 :]
            rest = tuple(t for t in rest if t[1])
            # fast path: derivative is a single clean monomial with unit den
            if d.den == ex.ONE_P and len(d.num) == 1:
                (dm, dc), = d.num.items()
                mm = ex.m_mul(rest, dm)
                fast[mm] = fast.get(mm, 0) + c * e * dc
            else:
                coeff = ex.Frac(ex.p_norm({rest: c * e}), ex.ONE_P)
                total = ex.f_add(total, ex.f_mul(coeff, d))
    if fast:
        total = ex.f_add(total, ex.f_from_poly(fast))
    return total


def _diff_frac_total(f: Frac, i: str) -> Frac:
    dn = _diff_poly_total(f.num, i)
    if f.den == ex.ONE_P:
        return dn
    dd = _diff_poly_total(f.den, i)
    den_f = ex.Frac(f.den, ex.ONE_P)
    return ex.f_div(
        ex.f_sub(ex.f_mul(dn, den_f), ex.f_mul(ex.Frac(f.num, ex.ONE_P), dd)),
        ex.f_mul(den_f, den_f),
    )


def total_derivative(e: Expr, i: str) -> Expr:
    """D_i e, with the chain rule through opaque and elementary atoms."""
    return Expr(_diff_frac_total(e.frac, i))


def total_derivative_multi(e: Expr, J: Iterable[str]) -> Expr:
    out = e
    for i in J:
        out = total_derivative(out, i)
    return out


def signed_total_derivative_multi(e: Expr, J: Iterable[str]) -> Expr:
    """(-D)_J e = (-1)^|J| D_J e."""
    J = tuple(J)
    out = total_derivative_multi(e, J)
    return -out if len(J) % 2 else out


@dataclass(frozen=True)
class Characteristic:
    """Components alpha^a of an evolutionary vector field, one per
    dependent variable."""

    deps: tuple
    exprs: tuple

    def __post_init__(self):
        if len(self.deps) != len(self.exprs):
            raise DimensionError("characteristic length mismatch")

    def __iter__(self):
        return iter(self.exprs)

    def component(self, dep: str) -> Expr:
        return self.exprs[self.deps.index(dep)]

    def __getitem__(self, k: int) -> Expr:
        return self.exprs[k]


def characteristic(deps: Sequence[str], exprs: Sequence[Expr]) -> Characteristic:
    return Characteristic(tuple(deps), tuple(exprs))


def prolong_apply(alpha: Characteristic, e: Expr) -> Expr:
    """Evolutionary vector field action: sum over the operand's jet atoms of
    (D_J alpha^a) * de/du^a_J."""
    jets = [a for a in e.atoms(deep=True) if isinstance(a, ex.JetAtom)]
    missing = {a.dep for a in jets} - set(alpha.deps)
    # jets of deps outside alpha act as parameters only if alpha covers the
    # operand's dependent variables; phantom separation is the caller's job
    if missing:
        raise DimensionError(
            f"characteristic does not cover dependent variables {sorted(missing)}"
        )
    total = ex.F_ZERO
    dj_cache: dict = {}
    for a in sorted(jets, key=lambda a: a.skey):
        de = ex.f_diff_atom(e.frac, a)
        if ex.f_is_zero(de):
            continue
        key = (a.dep, a.midx)
        da = dj_cache.get(key)
        if da is None:
            da = total_derivative_multi(alpha.component(a.dep), a.midx)
            dj_cache[key] = da
        total = ex.f_add(total, ex.f_mul(de, da.frac))
    return Expr(total)
