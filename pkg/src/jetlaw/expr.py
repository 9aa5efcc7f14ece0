"""Exact symbolic expression kernel over jet-space atoms.

Every expression is kept in a canonical form: a reduced fraction of two
multivariate polynomials with rational coefficients whose generators are
atoms (independent variables, jet variables, symbolic constants, opaque
function atoms, elementary atoms).  Arithmetic is exact; no floating point
enters the symbolic layer.

Atom ordering (fixed total order on generators): independent variables <
jet variables (by dependent name, then graded-lex on the multi-index) <
symbolic constants < opaque atoms < elementary atoms, alphabetical within
each class.

Rewrites performed during normalization, and only these:
  * exp(a)*exp(b) -> exp(a+b), exp(0) -> 1, and exp never stays in a
    denominator's leading monomial;
  * cosh(z)^2 -> 1 + sinh(z)^2;
  * root collapse r^k -> base for the k-th-root atom r.
sin/cos carry derivative rules but no algebraic relations; the numeric
fallback in ``is_zero`` guards against a false "nonzero" verdict.
"""

from __future__ import annotations

import itertools
from fractions import Fraction
from typing import Iterable, Mapping

__all__ = [
    "Expr",
    "JetlawError",
    "ZeroDenominatorError",
    "IllegalSubstitutionError",
    "PowerCapError",
    "DimensionError",
    "rational",
    "indep",
    "jet",
    "const",
    "opaque",
    "exp_",
    "sin_",
    "cos_",
    "sinh_",
    "cosh_",
    "lambertw_",
    "power",
    "normalize",
    "is_zero",
    "substitute",
    "atom_partial",
    "OpaqueRule",
    "slot",
    "set_power_cap",
    "get_power_cap",
]


class JetlawError(Exception):
    pass


class ZeroDenominatorError(JetlawError):
    pass


class IllegalSubstitutionError(JetlawError):
    pass


class PowerCapError(JetlawError):
    pass


class DimensionError(JetlawError):
    pass


# Powers above this exponent are not expanded unless the cap is raised
# explicitly (bounds blow-up on steep nonlinear right-hand sides).
_POWER_CAP = 12


def set_power_cap(n: int) -> None:
    global _POWER_CAP
    _POWER_CAP = int(n)


def get_power_cap() -> int:
    return _POWER_CAP


# ---------------------------------------------------------------------------
# Atoms

K_INDEP, K_JET, K_CONST, K_OPAQUE, K_ELEM = 0, 1, 2, 3, 4

_ATOMS: dict = {}


class Atom:
    """Interned generator of the polynomial layer."""

    __slots__ = ("kind", "skey", "_h")

    def __init__(self, kind: int, skey_str: str):
        self.kind = kind
        self.skey = (kind, skey_str)
        self._h = hash(self.skey)

    def __hash__(self):
        return self._h

    def __lt__(self, other):
        return self.skey < other.skey

    def __repr__(self):
        return f"<{atom_text(self)}>"


class IndepAtom(Atom):
    __slots__ = ("name",)

    def __init__(self, name: str):
        self.name = name
        super().__init__(K_INDEP, name)


class JetAtom(Atom):
    __slots__ = ("dep", "midx")

    def __init__(self, dep: str, midx: tuple):
        self.dep = dep
        self.midx = midx  # sorted tuple of independent-variable names
        super().__init__(K_JET, "%s\x00%04d\x00%s" % (dep, len(midx), ",".join(midx)))


class ConstAtom(Atom):
    __slots__ = ("name",)

    def __init__(self, name: str):
        self.name = name
        super().__init__(K_CONST, name)


class OpaqueAtom(Atom):
    """Uninterpreted function atom f_{,tags}(args); tags are 1-based slots."""

    __slots__ = ("fname", "tags", "args")

    def __init__(self, fname: str, tags: tuple, args: tuple):
        self.fname = fname
        self.tags = tags  # sorted tuple of int slots (mixed partials interned symmetric)
        self.args = args  # tuple of Frac
        s = "%s\x00%s\x00%s" % (
            fname,
            ",".join(map(str, tags)),
            "\x01".join(f.skey() for f in args),
        )
        super().__init__(K_OPAQUE, s)


class ElemAtom(Atom):
    __slots__ = ("fn", "arg")

    def __init__(self, fn: str, arg):
        self.fn = fn  # exp | sin | cos | sinh | cosh | W
        self.arg = arg  # Frac
        super().__init__(K_ELEM, "%s\x00%s" % (fn, arg.skey()))


class RootAtom(Atom):
    """k-th root of a base expression; r^k collapses to the base."""

    __slots__ = ("base", "k")

    def __init__(self, base, k: int):
        self.base = base  # Frac
        self.k = k
        super().__init__(K_ELEM, "root\x00%04d\x00%s" % (k, base.skey()))


def _intern(cls, *args):
    key = (cls.__name__,) + tuple(
        a.skey() if isinstance(a, Frac) else tuple(x.skey() for x in a) if isinstance(a, tuple) and a and isinstance(a[0], Frac) else a
        for a in args
    )
    got = _ATOMS.get(key)
    if got is None:
        got = cls(*args)
        _ATOMS[key] = got
    return got


def indep_atom(name: str) -> IndepAtom:
    return _intern(IndepAtom, name)


def jet_atom(dep: str, midx: Iterable[str]) -> JetAtom:
    return _intern(JetAtom, dep, tuple(sorted(midx)))


def const_atom(name: str) -> ConstAtom:
    return _intern(ConstAtom, name)


def opaque_atom(fname: str, tags: Iterable[int], args: tuple) -> OpaqueAtom:
    return _intern(OpaqueAtom, fname, tuple(sorted(tags)), tuple(args))


def elem_atom(fn: str, arg) -> ElemAtom:
    return _intern(ElemAtom, fn, arg)


def root_atom(base, k: int) -> RootAtom:
    return _intern(RootAtom, base, k)


# ---------------------------------------------------------------------------
# Sparse multivariate polynomials: dict {monomial: Fraction}, a monomial is a
# sorted tuple of (Atom, positive int exponent); the empty tuple is 1.

Mono = tuple
ZERO_P: dict = {}
ONE_P: dict = {(): Fraction(1)}


def m_mul(m1: Mono, m2: Mono) -> Mono:
    if not m1:
        return m2
    if not m2:
        return m1
    d = dict(m1)
    for a, e in m2:
        d[a] = d.get(a, 0) + e
    return tuple(sorted(((a, e) for a, e in d.items() if e), key=lambda t: t[0].skey))


def m_key(m: Mono):
    # graded, then lexicographic on (atom skey, exponent); total deterministic order
    return (sum(e for _, e in m), tuple((a.skey, e) for a, e in m))


def p_add(p: dict, q: dict) -> dict:
    if not p:
        return q
    if not q:
        return p
    r = dict(p)
    for m, c in q.items():
        nc = r.get(m, 0) + c
        if nc:
            r[m] = nc
        else:
            r.pop(m, None)
    return r


def p_neg(p: dict) -> dict:
    return {m: -c for m, c in p.items()}


def p_scale(p: dict, c: Fraction) -> dict:
    if not c:
        return ZERO_P
    return {m: v * c for m, v in p.items()}


def _mono_needs_fix(m: Mono) -> bool:
    n_exp = 0
    for a, e in m:
        if isinstance(a, ElemAtom):
            if a.fn == "exp":
                n_exp += 1
                if e != 1:
                    return True
            elif a.fn == "cosh" and e >= 2:
                return True
        elif isinstance(a, RootAtom) and e >= a.k:
            return True
    return n_exp > 1


def _fix_mono(m: Mono, c: Fraction) -> dict:
    """Expand one monomial into a normalized polynomial (exp collection,
    cosh^2 -> 1+sinh^2, root collapse)."""
    plain = []
    exp_arg = None
    extra = ONE_P
    for a, e in m:
        if isinstance(a, ElemAtom) and a.fn == "exp":
            contrib = a.arg if e == 1 else f_scale(a.arg, Fraction(e))
            exp_arg = contrib if exp_arg is None else f_add(exp_arg, contrib)
        elif isinstance(a, ElemAtom) and a.fn == "cosh" and e >= 2:
            half, rem = divmod(e, 2)
            s = elem_atom("sinh", a.arg)
            base = p_add(ONE_P, {((s, 2),): Fraction(1)})
            extra = p_mul(extra, p_pow(base, half))
            if rem:
                plain.append((a, 1))
        elif isinstance(a, RootAtom) and e >= a.k:
            q, rem = divmod(e, a.k)
            bnum, bden = a.base.num, a.base.den
            # base is a fraction; multiply numerator power in, denominator
            # joins through f-normalization by the caller only when needed.
            if bden != ONE_P:
                raise JetlawError("root atom with non-polynomial base")
            extra = p_mul(extra, p_pow(bnum, q))
            if rem:
                plain.append((a, rem))
        else:
            plain.append((a, e))
    if exp_arg is not None and not f_is_zero(exp_arg):
        plain.append((elem_atom("exp", exp_arg), 1))
    plain = tuple(sorted(plain, key=lambda t: t[0].skey))
    return p_scale(p_mul_mono(extra, plain), c)


def p_norm(p: dict) -> dict:
    """Apply the monomial-level rewrites to a fixpoint; no-op when clean."""
    for _ in range(10):
        bad = [m for m in p if _mono_needs_fix(m)]
        if not bad:
            return p
        r = {m: c for m, c in p.items() if not _mono_needs_fix(m)}
        for m in bad:
            r = p_add(r, _fix_mono(m, p[m]))
        p = r
    raise JetlawError("monomial rewriting did not settle")


def p_mul_mono(p: dict, m: Mono, c: Fraction = Fraction(1)) -> dict:
    if not c or not p:
        return ZERO_P
    return {m_mul(mm, m): cc * c for mm, cc in p.items()}


def p_mul(p: dict, q: dict) -> dict:
    if not p or not q:
        return ZERO_P
    if len(p) > len(q):
        p, q = q, p
    r: dict = {}
    for m, c in p.items():
        for m2, c2 in q.items():
            mm = m_mul(m, m2)
            nc = r.get(mm, 0) + c * c2
            if nc:
                r[mm] = nc
            else:
                r.pop(mm, None)
    return p_norm(r)


def p_pow(p: dict, n: int) -> dict:
    if n == 0:
        return ONE_P
    if n == 1:
        return p
    if len(p) > 1 and n > _POWER_CAP:
        raise PowerCapError(
            f"refusing to expand power {n} > cap {_POWER_CAP}; raise the cap explicitly"
        )
    r = ONE_P
    b = p
    k = n
    while k:
        if k & 1:
            r = p_mul(r, b)
        b = p_mul(b, b) if k > 1 else b
        k >>= 1
    return r


def p_leading(p: dict) -> tuple:
    m = max(p, key=m_key)
    return m, p[m]


def p_atoms(p: dict) -> set:
    s = set()
    for m in p:
        for a, _ in m:
            s.add(a)
    return s


# --- multivariate gcd (primitive PRS); guarded, falls back to monomial gcd

_GCD_TERM_LIMIT = 220


class _GcdGiveUp(Exception):
    pass


def _to_univ(p: dict, g: Atom) -> dict:
    """View p as a univariate poly in g: {degree: poly-without-g}."""
    out: dict = {}
    for m, c in p.items():
        deg = 0
        rest = []
        for a, e in m:
            if a is g:
                deg = e
            else:
                rest.append((a, e))
        rest = tuple(rest)
        d = out.setdefault(deg, {})
        d[rest] = d.get(rest, 0) + c
    return {k: v for k, v in out.items() if any(v.values())}


def _from_univ(u: dict, g: Atom) -> dict:
    out: dict = {}
    for deg, coeff in u.items():
        for m, c in coeff.items():
            mm = m_mul(m, ((g, deg),)) if deg else m
            out[mm] = out.get(mm, 0) + c
    return {m: c for m, c in out.items() if c}


def _u_deg(u: dict) -> int:
    return max(u) if u else -1


def p_divexact(p: dict, d: dict):
    """Exact multivariate division; returns quotient or None."""
    if not p:
        return ZERO_P
    if d == ONE_P:
        return p
    quot: dict = {}
    rem = dict(p)
    dm, dc = p_leading(d)
    dset = dict(dm)
    steps = 0
    while rem:
        steps += 1
        if steps > 4000:
            return None
        m, c = p_leading(rem)
        mm = dict(m)
        q = {}
        ok = True
        for a, e in dset.items():
            if mm.get(a, 0) < e:
                ok = False
                break
        if not ok:
            return None
        for a, e in mm.items():
            ne = e - dset.get(a, 0)
            if ne:
                q[a] = ne
        qm = tuple(sorted(q.items(), key=lambda t: t[0].skey))
        qc = c / dc
        quot[qm] = quot.get(qm, 0) + qc
        rem = p_add(rem, p_neg(p_mul_mono(d, qm, qc)))
    return {m: c for m, c in quot.items() if c}


def _p_content_gcd(polys):
    g = None
    for p in polys:
        g = p if g is None else _p_gcd(g, p)
        if g == ONE_P:
            return ONE_P
    return g if g is not None else ONE_P


_GCD_BUDGET = [0]


def p_gcd(a: dict, b: dict) -> dict:
    _GCD_BUDGET[0] = 600
    try:
        return _p_gcd(a, b)
    except _GcdGiveUp:
        return ONE_P


def _p_gcd(a: dict, b: dict) -> dict:
    _GCD_BUDGET[0] -= 1
    if _GCD_BUDGET[0] <= 0:
        raise _GcdGiveUp
    if not a:
        return b
    if not b:
        return a
    if a == ONE_P or b == ONE_P:
        return ONE_P
    if len(a) == 1 and len(b) == 1:
        # monomial gcd
        ma, ca = next(iter(a.items())), None
        mb = next(iter(b))
        da, db = dict(ma[0]), dict(mb)
        g = {x: min(e, db[x]) for x, e in da.items() if x in db and min(e, db[x]) > 0}
        return {tuple(sorted(g.items(), key=lambda t: t[0].skey)): Fraction(1)}
    if len(a) > _GCD_TERM_LIMIT or len(b) > _GCD_TERM_LIMIT:
        raise _GcdGiveUp
    common = p_atoms(a) & p_atoms(b)
    if not common:
        return ONE_P
    g = max(common, key=lambda x: x.skey)
    ua, ub = _to_univ(a, g), _to_univ(b, g)
    ca = _p_content_gcd(ua.values())
    cb = _p_content_gcd(ub.values())
    cont = _p_gcd(ca, cb)
    pa = {d: p_divexact(c, ca) for d, c in ua.items()}
    pb = {d: p_divexact(c, cb) for d, c in ub.items()}
    if any(v is None for v in pa.values()) or any(v is None for v in pb.values()):
        raise _GcdGiveUp
    if _u_deg(pa) < _u_deg(pb):
        pa, pb = pb, pa
    # primitive PRS
    rounds = 0
    while True:
        rounds += 1
        if rounds > 40:
            raise _GcdGiveUp
        r = _u_prem(pa, pb, g)
        if not r:
            prim = _from_univ(pb, g)
            return p_mul(cont, prim)
        if _u_deg(r) == 0:
            return cont
        cr = _p_content_gcd(r.values())
        r = {d: p_divexact(c, cr) for d, c in r.items()}
        if any(v is None for v in r.values()):
            raise _GcdGiveUp
        pa, pb = pb, r


def _u_prem(pa: dict, pb: dict, g: Atom) -> dict:
    """Pseudo-remainder of univariate-view polys (coefficients are polys)."""
    da, db = _u_deg(pa), _u_deg(pb)
    lb = pb[db]
    r = {d: dict(c) for d, c in pa.items()}
    while _u_deg(r) >= db and r:
        dr = _u_deg(r)
        lr = r[dr]
        if sum(len(c) for c in r.values()) > _GCD_TERM_LIMIT * 2:
            raise _GcdGiveUp
        new: dict = {}
        for d, c in r.items():
            if d == dr:
                continue
            new[d] = p_mul(c, lb)
        for d, c in pb.items():
            if d == db:
                continue
            t = p_mul(c, lr)
            shift = d + dr - db
            new[shift] = p_add(new.get(shift, ZERO_P), p_neg(t))
        r = {d: c for d, c in new.items() if c}
    return r


# ---------------------------------------------------------------------------
# Fractions of polynomials (the canonical form)


class Frac:
    """Reduced fraction of two polynomials; the canonical expression form."""

    __slots__ = ("num", "den", "_skey", "_h")

    def __init__(self, num: dict, den: dict):
        self.num = num
        self.den = den
        self._skey = None
        self._h = None

    def skey(self) -> str:
        if self._skey is None:
            self._skey = _frac_key(self)
        return self._skey

    def __hash__(self):
        if self._h is None:
            self._h = hash(self.skey())
        return self._h

    def __eq__(self, other):
        return isinstance(other, Frac) and self.skey() == other.skey()

    def __repr__(self):
        return f"Frac({frac_text(self)})"


def _poly_key(p: dict) -> str:
    items = sorted(p.items(), key=lambda t: m_key(t[0]))
    parts = []
    for m, c in items:
        ms = ";".join("%s^%d" % (a.skey[1], e) for a, e in m)
        parts.append("%s|%s/%s" % (ms, c.numerator, c.denominator))
    return "&".join(parts)


def _frac_key(f: Frac) -> str:
    return _poly_key(f.num) + "//" + _poly_key(f.den)


F_ZERO: Frac
F_ONE: Frac


def f_make(num: dict, den: dict) -> Frac:
    if not den:
        raise ZeroDenominatorError("zero denominator")
    num = p_norm(num)
    den = p_norm(den)
    if not num:
        return Frac(ZERO_P, ONE_P)
    # keep exp atoms out of the denominator's leading monomial
    for _ in range(6):
        m, _c = p_leading(den)
        exps = [(a, e) for a, e in m if isinstance(a, ElemAtom) and a.fn == "exp"]
        if not exps:
            break
        conj = ONE_P
        for a, e in exps:
            neg = elem_atom("exp", f_neg(a.arg))
            conj = p_mul(conj, {((neg, e),): Fraction(1)})
        num = p_mul(num, conj)
        den = p_mul(den, conj)
    if den != ONE_P:
        # monomial content reduction: common atoms with min exponents
        gm = _common_mono(num, den)
        if gm:
            num = _div_mono(num, gm)
            den = _div_mono(den, gm)
    # a single-monomial denominator is fully reduced by the content step;
    # the polynomial gcd is only worth attempting on small multi-term ones
    if den != ONE_P and 2 <= len(den) <= 24 and len(num) <= 60:
        g = p_gcd(num, den)
        if g != ONE_P and g:
            n2 = p_divexact(num, g)
            d2 = p_divexact(den, g)
            if n2 is not None and d2 is not None:
                num, den = n2, d2
    # canonical scaling: leading denominator coefficient is 1
    _, lc = p_leading(den)
    if lc != 1:
        inv = Fraction(1) / lc
        num = p_scale(num, inv)
        den = p_scale(den, inv)
    return Frac(num, den)


def _common_mono(p: dict, q: dict):
    def content(poly):
        it = iter(poly)
        first = dict(next(it))
        for m in it:
            d = dict(m)
            for a in list(first):
                e = d.get(a, 0)
                if e <= 0:
                    first.pop(a)
                else:
                    first[a] = min(first[a], e)
            if not first:
                return {}
        return first

    cp, cq = content(p), content(q)
    g = {}
    for a, e in cp.items():
        if a in cq:
            g[a] = min(e, cq[a])
    return tuple(sorted(g.items(), key=lambda t: t[0].skey))


def _div_mono(p: dict, gm: Mono) -> dict:
    gd = dict(gm)
    out = {}
    for m, c in p.items():
        d = dict(m)
        for a, e in gd.items():
            d[a] -= e
            if not d[a]:
                del d[a]
        out[tuple(sorted(d.items(), key=lambda t: t[0].skey))] = c
    return out


def f_from_poly(p: dict) -> Frac:
    p = p_norm(p)
    return Frac(p, ONE_P) if p else Frac(ZERO_P, ONE_P)


def f_add(a: Frac, b: Frac) -> Frac:
    if a.den == b.den:
        return f_make(p_add(a.num, b.num), a.den)
    return f_make(
        p_add(p_mul(a.num, b.den), p_mul(b.num, a.den)), p_mul(a.den, b.den)
    )


def f_neg(a: Frac) -> Frac:
    return Frac(p_neg(a.num), a.den)


def f_sub(a: Frac, b: Frac) -> Frac:
    return f_add(a, f_neg(b))


def f_mul(a: Frac, b: Frac) -> Frac:
    return f_make(p_mul(a.num, b.num), p_mul(a.den, b.den))


def f_scale(a: Frac, c: Fraction) -> Frac:
    return Frac(p_scale(a.num, c), a.den) if c else Frac(ZERO_P, ONE_P)


def f_div(a: Frac, b: Frac) -> Frac:
    if not b.num:
        raise ZeroDenominatorError("zero denominator")
    return f_make(p_mul(a.num, b.den), p_mul(a.den, b.num))


def f_pow(a: Frac, n: int) -> Frac:
    if n == 0:
        return F_ONE
    if n < 0:
        return f_pow(f_div(F_ONE, a), -n)
    return f_make(p_pow(a.num, n), p_pow(a.den, n))


def f_is_zero(a: Frac) -> bool:
    return not a.num


F_ZERO = Frac(ZERO_P, ONE_P)
F_ONE = Frac(dict(ONE_P), ONE_P)


# ---------------------------------------------------------------------------
# Atom collection / differentiation


def f_atoms(a: Frac, deep: bool = False) -> set:
    s = p_atoms(a.num) | p_atoms(a.den)
    if not deep:
        return s
    out = set()
    stack = list(s)
    while stack:
        g = stack.pop()
        if g in out:
            continue
        out.add(g)
        if isinstance(g, OpaqueAtom):
            for arg in g.args:
                stack.extend(p_atoms(arg.num) | p_atoms(arg.den))
        elif isinstance(g, ElemAtom):
            stack.extend(p_atoms(g.arg.num) | p_atoms(g.arg.den))
        elif isinstance(g, RootAtom):
            stack.extend(p_atoms(g.base.num) | p_atoms(g.base.den))
    return out


def atom_diff(g: Atom, a: Atom) -> Frac:
    """Partial derivative of generator g with respect to atom a (chain rule
    through compound-atom arguments; other simple atoms held fixed)."""
    if g is a:
        return F_ONE
    if isinstance(g, (IndepAtom, JetAtom, ConstAtom)):
        return F_ZERO
    if isinstance(g, OpaqueAtom):
        total = F_ZERO
        for s_idx, arg in enumerate(g.args, start=1):
            d = f_diff_atom(arg, a)
            if f_is_zero(d):
                continue
            tagged = opaque_atom(g.fname, g.tags + (s_idx,), g.args)
            total = f_add(total, f_mul(_atom_frac(tagged), d))
        return total
    if isinstance(g, ElemAtom):
        d = f_diff_atom(g.arg, a)
        if f_is_zero(d):
            return F_ZERO
        return f_mul(_elem_derivative(g), d)
    if isinstance(g, RootAtom):
        d = f_diff_atom(g.base, a)
        if f_is_zero(d):
            return F_ZERO
        # d(base^(1/k)) = (1/k) * r * d(base) / base
        r = _atom_frac(g)
        return f_scale(f_div(f_mul(r, d), g.base), Fraction(1, g.k))
    raise JetlawError(f"cannot differentiate atom {g!r}")


def _elem_derivative(g: ElemAtom) -> Frac:
    z = g.arg
    if g.fn == "exp":
        return _atom_frac(g)
    if g.fn == "sin":
        return _atom_frac(elem_atom("cos", z))
    if g.fn == "cos":
        return f_neg(_atom_frac(elem_atom("sin", z)))
    if g.fn == "sinh":
        return _atom_frac(elem_atom("cosh", z))
    if g.fn == "cosh":
        return _atom_frac(elem_atom("sinh", z))
    if g.fn == "W":
        w = _atom_frac(g)
        return f_div(w, f_mul(z, f_add(F_ONE, w)))
    raise JetlawError(f"unknown elementary function {g.fn}")


def _atom_frac(a: Atom) -> Frac:
    return Frac({((a, 1),): Fraction(1)}, ONE_P)


def p_diff_atom(p: dict, a: Atom) -> Frac:
    total = F_ZERO
    fast: dict = {}
    for m, c in p.items():
        for idx, (g, e) in enumerate(m):
            if g is a:
                rest = m[:idx] + ((g, e - 1),) + m[idx + 1 :]
                rest = tuple(t for t in rest if t[1])
                fast[rest] = fast.get(rest, 0) + c * e
            elif g.kind >= K_OPAQUE:
                d = atom_diff(g, a)
                if f_is_zero(d):
                    continue
                rest = list(m)
                rest[idx] = (g, e - 1)
                rest = tuple(t for t in rest if t[1])
                term = f_mul(Frac(p_norm({rest: c * e}), ONE_P), d)
                total = f_add(total, term)
    if fast:
        total = f_add(total, f_from_poly(fast))
    return total


def f_diff_atom(f: Frac, a: Atom) -> Frac:
    dn = p_diff_atom(f.num, a)
    if f.den == ONE_P:
        return dn
    dd = p_diff_atom(f.den, a)
    den_f = Frac(f.den, ONE_P)
    # (n/d)' = (n' d - n d') / d^2
    return f_div(f_sub(f_mul(dn, den_f), f_mul(Frac(f.num, ONE_P), dd)), f_mul(den_f, den_f))


# ---------------------------------------------------------------------------
# Printing (DSL round-trippable text)


def _frac_num_text(q: Fraction) -> str:
    if q.denominator == 1:
        return str(q.numerator)
    return f"{q.numerator}/{q.denominator}"


def atom_text(a: Atom) -> str:
    if isinstance(a, (IndepAtom, ConstAtom)):
        return a.name
    if isinstance(a, JetAtom):
        if not a.midx:
            return a.dep
        return "%s[%s]" % (a.dep, ",".join(a.midx))
    if isinstance(a, OpaqueAtom):
        args = ",".join(frac_text(x) for x in a.args)
        if not a.tags:
            return "%s(%s)" % (a.fname, args)
        return "pd(%s,%s)(%s)" % (a.fname, ",".join(map(str, a.tags)), args)
    if isinstance(a, ElemAtom):
        return "%s(%s)" % (a.fn, frac_text(a.arg))
    if isinstance(a, RootAtom):
        return "(%s)^(1/%d)" % (frac_text(a.base), a.k)
    raise JetlawError("unprintable atom")


def _atom_pow_text(a: Atom, e: int) -> str:
    if isinstance(a, RootAtom):
        q = Fraction(e, a.k)
        base = frac_text(a.base)
        if not (base.isidentifier() or base.isdigit()):
            base = "(%s)" % base
        return "%s^(%s)" % (base, _frac_num_text(q))
    t = atom_text(a)
    if e == 1:
        return t
    return "%s^%d" % (t, e)


def _poly_text(p: dict) -> str:
    if not p:
        return "0"
    items = sorted(p.items(), key=lambda t: m_key(t[0]), reverse=True)
    parts = []
    for m, c in items:
        factors = [_atom_pow_text(a, e) for a, e in m]
        if c == 1 and factors:
            term = "*".join(factors)
        elif c == -1 and factors:
            term = "-" + "*".join(factors)
        else:
            cs = _frac_num_text(c)
            if "/" in cs:
                cs = "(%s)" % cs
            term = "*".join([cs] + factors)
        if parts and not term.startswith("-"):
            parts.append("+" + term)
        else:
            parts.append(term)
    return "".join(parts)


def frac_text(f: Frac) -> str:
    nt = _poly_text(f.num)
    if f.den == ONE_P:
        return nt
    dt = _poly_text(f.den)
    return "(%s)/(%s)" % (nt, dt)


# ---------------------------------------------------------------------------
# The user-facing immutable Expression


def _coerce(x) -> "Expr":
    if isinstance(x, Expr):
        return x
    if isinstance(x, (int, Fraction)):
        return Expr(Frac(p_norm({(): Fraction(x)}) if x else ZERO_P, ONE_P))
    raise TypeError(f"cannot coerce {x!r} to Expr")


class Expr:
    """Immutable expression; always held in canonical (normalized) form."""

    __slots__ = ("frac",)

    def __init__(self, frac: Frac):
        object.__setattr__(self, "frac", frac)

    def __setattr__(self, *_):
        raise AttributeError("Expr is immutable")

    # arithmetic
    def __add__(self, other):
        return Expr(f_add(self.frac, _coerce(other).frac))

    __radd__ = __add__

    def __sub__(self, other):
        return Expr(f_sub(self.frac, _coerce(other).frac))

    def __rsub__(self, other):
        return Expr(f_sub(_coerce(other).frac, self.frac))

    def __neg__(self):
        return Expr(f_neg(self.frac))

    def __mul__(self, other):
        return Expr(f_mul(self.frac, _coerce(other).frac))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return Expr(f_div(self.frac, _coerce(other).frac))

    def __rtruediv__(self, other):
        return Expr(f_div(_coerce(other).frac, self.frac))

    def __pow__(self, n):
        if isinstance(n, int):
            return Expr(f_pow(self.frac, n))
        if isinstance(n, Fraction):
            return power(self, n)
        raise TypeError("exponent must be int or Fraction")

    def __eq__(self, other):
        if isinstance(other, (int, Fraction)):
            other = _coerce(other)
        return isinstance(other, Expr) and self.frac == other.frac

    def __hash__(self):
        return hash(self.frac)

    def __repr__(self):
        return f"Expr({self.text()})"

    def text(self) -> str:
        return frac_text(self.frac)

    def atoms(self, deep: bool = False) -> set:
        return f_atoms(self.frac, deep=deep)

    def jets(self, dep: str | None = None) -> list:
        out = [
            a
            for a in f_atoms(self.frac, deep=True)
            if isinstance(a, JetAtom) and (dep is None or a.dep == dep)
        ]
        return sorted(out, key=lambda a: a.skey)

    def is_rational(self) -> bool:
        return self.frac.den == ONE_P and all(not m for m in self.frac.num)

    def as_fraction(self) -> Fraction:
        if not self.is_rational():
            raise JetlawError("not a rational constant")
        return self.frac.num.get((), Fraction(0))


ZERO = Expr(F_ZERO)
ONE = Expr(F_ONE)


def rational(x) -> Expr:
    return _coerce(Fraction(x))


def indep(name: str) -> Expr:
    return Expr(_atom_frac(indep_atom(name)))


def jet(dep: str, *idx: str) -> Expr:
    return Expr(_atom_frac(jet_atom(dep, idx)))


def const(name: str) -> Expr:
    return Expr(_atom_frac(const_atom(name)))


def opaque(fname: str, *args: Expr, tags: Iterable[int] = ()) -> Expr:
    return Expr(_atom_frac(opaque_atom(fname, tags, tuple(a.frac for a in args))))


def _elem(fn: str, e: Expr) -> Expr:
    f = e.frac
    if fn == "exp":
        if f_is_zero(f):
            return ONE
        return Expr(_atom_frac(elem_atom("exp", f)))
    if fn in ("sin", "sinh") and f_is_zero(f):
        return ZERO
    if fn in ("cos", "cosh") and f_is_zero(f):
        return ONE
    if fn == "W" and f_is_zero(f):
        return ZERO
    return Expr(_atom_frac(elem_atom(fn, f)))


def exp_(e: Expr) -> Expr:
    return _elem("exp", e)


def sin_(e: Expr) -> Expr:
    return _elem("sin", e)


def cos_(e: Expr) -> Expr:
    return _elem("cos", e)


def sinh_(e: Expr) -> Expr:
    return _elem("sinh", e)


def cosh_(e: Expr) -> Expr:
    return _elem("cosh", e)


def lambertw_(e: Expr) -> Expr:
    return _elem("W", e)


def power(e: Expr, q) -> Expr:
    """e**q for rational q; non-integer exponents become root atoms."""
    q = Fraction(q)
    if q.denominator == 1:
        return e ** int(q)
    if f_is_zero(e.frac):
        if q > 0:
            return ZERO
        raise ZeroDenominatorError("zero denominator")
    k = q.denominator
    f = e.frac
    if f.den != ONE_P:
        # root of a quotient: root(n)/root(d)
        top = power(Expr(Frac(f.num, ONE_P)), q)
        bot = power(Expr(Frac(f.den, ONE_P)), q)
        return top / bot
    r = Expr(_atom_frac(root_atom(f, k)))
    return r ** q.numerator


# ---------------------------------------------------------------------------
# Spec operations: normalize / is_zero / substitute / atom_partial


def normalize(e: Expr) -> Frac:
    """Return the canonical fraction of e (expressions are kept normalized,
    so this is a projection, idempotent by construction)."""
    return e.frac


ZERO_VERDICT, NONZERO_VERDICT, INCONCLUSIVE_VERDICT = "zero", "nonzero", "inconclusive"


def is_zero(e: Expr, trials: int = 12, seed: int = 42, tol: float = 1e-6):
    """Three-valued zero test: exact canonical zero, numerically-witnessed
    nonzero, or inconclusive (symbolically nonzero but numerically zero,
    e.g. trigonometric relations outside the rewrite set)."""
    if f_is_zero(e.frac):
        return ZERO_VERDICT
    from . import numeval

    r = numeval.numeric_residual(e, trials=trials, seed=seed, include_ones=True)
    if r > tol:
        return NONZERO_VERDICT
    return INCONCLUSIVE_VERDICT


def atom_partial(e: Expr, a) -> Expr:
    """Partial derivative with respect to a single atom; all other simple
    atoms are independent, compound atoms differentiate through their
    argument slots (opaque atoms yield tagged derivative atoms)."""
    if isinstance(a, Expr):
        atoms = list(f_atoms(a.frac))
        if len(atoms) != 1 or a.frac.num != _atom_frac(atoms[0]).num or a.frac.den != ONE_P:
            raise JetlawError("atom_partial target must be a single atom")
        a = atoms[0]
    return Expr(f_diff_atom(e.frac, a))


class OpaqueRule:
    """Replacement for an opaque function: an expression in its declared
    argument slots (slot(i) placeholders), plus rational/symbolic constants."""

    def __init__(self, arity: int, body: Expr):
        self.arity = arity
        self.body = body
        for a in body.atoms(deep=True):
            if isinstance(a, ConstAtom) and a.name.startswith("@slot"):
                i = int(a.name[5:])
                if not (1 <= i <= arity):
                    raise IllegalSubstitutionError(
                        f"slot {i} out of range for arity {arity}"
                    )
            elif isinstance(a, ConstAtom):
                continue
            elif isinstance(a, (JetAtom, IndepAtom, OpaqueAtom)):
                raise IllegalSubstitutionError(
                    "opaque atoms replaceable only by expressions in their declared arguments"
                )

    def at(self, tags: tuple, args: tuple) -> Frac:
        body = self.body
        for s_idx in tags:
            body = atom_partial(body, const_atom(f"@slot{s_idx}"))
        bindings = {const_atom(f"@slot{i+1}"): Expr(args[i]) for i in range(self.arity)}
        return _subst_frac(body.frac, bindings, {})


def slot(i: int) -> Expr:
    """Placeholder for the i-th declared argument inside an OpaqueRule body."""
    return const(f"@slot{i}")


def substitute(e: Expr, bindings: Mapping) -> Expr:
    """Simultaneous substitution of whole atoms followed by normalization.

    Keys: JetAtom/ConstAtom/IndepAtom (or the Expr wrapping one), an opaque
    function name (str) mapping to an OpaqueRule, or an OpaqueAtom mapping to
    an expression in derivative atoms of the same function (constraint
    rewriting, applied to all prolongations, run to a fixpoint).
    """
    atom_b: dict = {}
    rule_b: dict = {}
    constraint_b: dict = {}
    for k, v in bindings.items():
        if isinstance(k, Expr):
            atoms = list(f_atoms(k.frac))
            if len(atoms) != 1:
                raise IllegalSubstitutionError("binding key must be a single atom")
            k = atoms[0]
        if isinstance(k, str):
            if not isinstance(v, OpaqueRule):
                raise IllegalSubstitutionError(
                    "opaque function bindings require an OpaqueRule"
                )
            rule_b[k] = v
        elif isinstance(k, OpaqueAtom):
            constraint_b[(k.fname, k.tags, tuple(a.skey() for a in k.args))] = (k, _coerce_expr(v))
        elif isinstance(k, (JetAtom, ConstAtom, IndepAtom)):
            atom_b[k] = _coerce_expr(v)
        else:
            raise IllegalSubstitutionError(f"cannot bind {k!r}")
    if any(isinstance(k, IndepAtom) for k in atom_b):
        for a in e.atoms(deep=True):
            if isinstance(a, JetAtom):
                for k in atom_b:
                    if isinstance(k, IndepAtom) and k.name in a.midx:
                        raise IllegalSubstitutionError(
                            f"independent variable {k.name} appears inside a jet index"
                        )
    out = _subst_frac(e.frac, atom_b, rule_b)
    if constraint_b:
        out = _apply_constraints(out, constraint_b)
    return Expr(out)


def _coerce_expr(v) -> Expr:
    return v if isinstance(v, Expr) else _coerce(v)


def _subst_atom(a: Atom, atom_b: dict, rule_b: dict) -> Frac:
    if a in atom_b:
        return atom_b[a].frac
    if isinstance(a, OpaqueAtom):
        new_args = tuple(_subst_frac(x, atom_b, rule_b) for x in a.args)
        if a.fname in rule_b:
            rule = rule_b[a.fname]
            if rule.arity != len(a.args):
                raise IllegalSubstitutionError("arity mismatch in opaque substitution")
            return rule.at(a.tags, new_args)
        if new_args != a.args:
            return _atom_frac(opaque_atom(a.fname, a.tags, new_args))
        return _atom_frac(a)
    if isinstance(a, ElemAtom):
        na = _subst_frac(a.arg, atom_b, rule_b)
        if na != a.arg:
            return _elem(a.fn, Expr(na)).frac
        return _atom_frac(a)
    if isinstance(a, RootAtom):
        nb = _subst_frac(a.base, atom_b, rule_b)
        if nb != a.base:
            return power(Expr(nb), Fraction(1, a.k)).frac
        return _atom_frac(a)
    return _atom_frac(a)


def _subst_frac(f: Frac, atom_b: dict, rule_b: dict) -> Frac:
    if not atom_b and not rule_b:
        return f

    def sub_poly(p: dict) -> Frac:
        total = F_ZERO
        for m, c in p.items():
            term = Frac(p_norm({(): c}), ONE_P)
            for a, e in m:
                fa = _subst_atom(a, atom_b, rule_b)
                term = f_mul(term, f_pow(fa, e))
            total = f_add(total, term)
        return total

    top = sub_poly(f.num)
    if f.den == ONE_P:
        return top
    return f_div(top, sub_poly(f.den))


def _apply_constraints(f: Frac, constraint_b: dict) -> Frac:
    """Rewrite opaque derivative atoms that prolong a constrained atom, to a
    fixpoint.  The replacement may use other derivative atoms of the same
    function; termination requires the rule to lower the constrained tag."""
    for _ in range(300):
        target = None
        for a in f_atoms(f, deep=True):
            if not isinstance(a, OpaqueAtom):
                continue
            for (fname, tags, argkey), (katom, repl) in constraint_b.items():
                if a.fname != fname:
                    continue
                if tuple(x.skey() for x in a.args) != argkey:
                    continue
                if _multiset_contains(a.tags, tags):
                    target = (a, tags, repl)
                    break
            if target:
                break
        if target is None:
            return f
        a, tags, repl = target
        rest = _multiset_sub(a.tags, tags)
        body = repl
        for s_idx in rest:
            body = _slot_partial(body, s_idx)
        f = _subst_frac_atom(f, a, body.frac)
    raise JetlawError("constraint rewriting did not terminate")


def _slot_partial(e: Expr, s_idx: int) -> Expr:
    """Differentiate an expression in opaque atoms of common args w.r.t. the
    s-th slot: appends the tag on each opaque atom (linear chain)."""
    total = F_ZERO
    f = e.frac
    for a in list(f_atoms(f)):
        if isinstance(a, OpaqueAtom):
            d = f_diff_atom(f, a)
            if f_is_zero(d):
                continue
            tagged = _atom_frac(opaque_atom(a.fname, a.tags + (s_idx,), a.args))
            total = f_add(total, f_mul(d, tagged))
    return Expr(total)


def _subst_frac_atom(f: Frac, a: Atom, repl: Frac) -> Frac:
    return _subst_frac(f, {a: Expr(repl)}, {})


def _multiset_contains(big: tuple, small: tuple) -> bool:
    b = list(big)
    for x in small:
        if x in b:
            b.remove(x)
        else:
            return False
    return True


def _multiset_sub(big: tuple, small: tuple) -> tuple:
    b = list(big)
    for x in small:
        b.remove(x)
    return tuple(b)
