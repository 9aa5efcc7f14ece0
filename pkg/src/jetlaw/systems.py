"""Differential systems in solved form, on-shell reduction, and the
verification predicates: symmetry, cosymmetry, characteristic, conservation
law, variational symmetry, sub-symmetry, quasi-Lagrangian structure, and
nontriviality certificates.

"Verified" means an exact symbolic zero by default; numeric-only
verification must be requested explicitly and is recorded in the report.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from fractions import Fraction

from . import expr as ex
from . import jets as jc
from . import variational as va
from .expr import DimensionError, Expr, JetlawError
from .jets import Characteristic, total_derivative, total_derivative_multi
from .variational import FluxVector, LinearDiffOperator

__all__ = [
    "DifferentialSystem",
    "NonSolvedFormError",
    "CheckReport",
    "ConservationLaw",
    "on_shell_reduce",
    "decompose_on_system",
    "check_symmetry",
    "check_cosymmetry",
    "check_characteristic",
    "check_conservation_law",
    "conservation_law_from_density",
    "noether_flux",
    "nontriviality_certificate",
    "verify_quasi_lagrangian",
    "check_variational_symmetry",
    "check_subsymmetry",
    "check_triviality",
    "is_quasi_noether",
]


class NonSolvedFormError(JetlawError):
    pass


VERIFIED, REFUTED, INCONCLUSIVE = "verified", "refuted", "inconclusive"


@dataclass
class CheckReport:
    """Outcome of one verification; 'verified' only from an exact symbolic
    zero unless the numeric mode was requested (then the tolerance is
    recorded via numeric_max/tol)."""

    check: str
    subject: str
    verdict: str
    residual_terms: int = 0
    numeric_max: float | None = None
    seed: int = 42
    time_ms: int = 0
    mode: str = "exact"
    tol: float | None = None
    extra: dict = field(default_factory=dict)

    def as_json_obj(self) -> dict:
        return {
            "check": self.check,
            "subject": self.subject,
            "verdict": self.verdict,
            "residual": {
                "symbolic_terms": self.residual_terms,
                "numeric_max": self.numeric_max,
            },
            "seed": self.seed,
            "time_ms": self.time_ms,
        }


@dataclass
class ConservationLaw:
    fluxes: FluxVector
    characteristic: tuple | None = None
    report: CheckReport | None = None

    @property
    def verified(self) -> bool:
        return self.report is not None and self.report.verdict == VERIFIED


class DifferentialSystem:
    """A system in solved (Cauchy-Kovalevskaya) form: each equation is a
    pair (leading jet, right-hand side); the residual is lead - rhs.

    Optional opaque constraints pin derivative atoms of declared opaque
    functions (e.g. a parameter function satisfying a linear PDE); they are
    rewritten together with the leading-derivative prolongations.
    """

    def __init__(self, indeps, deps, equations, name: str = "", opaque_constraints=()):
        self.indeps = tuple(indeps)
        self.deps = tuple(deps)
        self.name = name
        eqs = []
        for lead, rhs in equations:
            if isinstance(lead, Expr):
                atoms = [a for a in lead.atoms() if isinstance(a, ex.JetAtom)]
                if len(atoms) != 1 or lead != Expr(ex._atom_frac(atoms[0])):
                    raise NonSolvedFormError("leading term must be a single jet variable")
                lead = atoms[0]
            eqs.append((lead, rhs))
        self.equations = tuple(eqs)
        self.opaque_constraints = tuple(opaque_constraints)  # (OpaqueAtom, Expr)
        self._validate()
        self._reduce_cache: dict = {}

    # -- structure ----------------------------------------------------------
    def _validate(self):
        if not self.equations:
            raise NonSolvedFormError("empty system")
        leads = [lead for lead, _ in self.equations]
        for a in leads:
            if a.dep not in self.deps:
                raise NonSolvedFormError(f"undeclared dependent variable {a.dep}")
        for k, a in enumerate(leads):
            for j, b in enumerate(leads):
                if k != j and a.dep == b.dep and _multiset_contains(a.midx, b.midx):
                    raise NonSolvedFormError("overlapping leading derivatives")
        for lead, rhs in self.equations:
            for a in rhs.atoms(deep=True):
                if isinstance(a, ex.JetAtom) and self._match_lead(a) is not None:
                    raise NonSolvedFormError(
                        f"right-hand side contains leading-derivative prolongation {ex.atom_text(a)}"
                    )

    def _match_lead(self, a: ex.JetAtom):
        for k, (lead, rhs) in enumerate(self.equations):
            if a.dep == lead.dep and _multiset_contains(a.midx, lead.midx):
                return k
        return None

    @property
    def residuals(self) -> tuple:
        return tuple(Expr(ex._atom_frac(lead)) - rhs for lead, rhs in self.equations)

    def evolution_split(self):
        """(time, space) variable names for 1+1-dimensional evolution form."""
        if len(self.indeps) != 2:
            raise JetlawError("not a 1+1-dimensional system")
        lead = self.equations[0][0]
        if len(lead.midx) != 1:
            raise JetlawError("not first-order evolution form")
        tvar = lead.midx[0]
        svar = next(n for n in self.indeps if n != tvar)
        return tvar, svar

    def characteristic(self, *exprs) -> Characteristic:
        return Characteristic(self.deps, tuple(exprs))

    def __repr__(self):
        eqs = "; ".join(
            f"{ex.atom_text(l)} = {r.text()}" for l, r in self.equations
        )
        return f"DifferentialSystem({self.name or eqs})"


def _multiset_contains(big: tuple, small: tuple) -> bool:
    b = list(big)
    for s_ in small:
        if s_ in b:
            b.remove(s_)
        else:
            return False
    return True


def _multiset_sub(big: tuple, small: tuple) -> tuple:
    b = list(big)
    for s_ in small:
        b.remove(s_)
    return tuple(b)


# ---------------------------------------------------------------------------
# On-shell reduction and residual-coordinate decomposition

_REDUCE_LIMIT = 400


def on_shell_reduce(system: DifferentialSystem, e: Expr) -> Expr:
    """Replace every prolongation of a leading derivative by the derivative
    of the right-hand side, recursively to a fixpoint."""
    cache = system._reduce_cache
    for _ in range(_REDUCE_LIMIT):
        target = None
        for a in e.atoms(deep=True):
            if isinstance(a, ex.JetAtom):
                k = system._match_lead(a)
                if k is not None:
                    target = (a, k)
                    break
            elif isinstance(a, ex.OpaqueAtom) and system.opaque_constraints:
                if _match_constraint(system, a) is not None:
                    target = (a, None)
                    break
        if target is None:
            return e
        a, k = target
        if k is not None:
            repl = cache.get(a)
            if repl is None:
                lead, rhs = system.equations[k]
                extra = _multiset_sub(a.midx, lead.midx)
                repl = total_derivative_multi(rhs, extra)
                cache[a] = repl
            e = ex.substitute(e, {a: repl})
        else:
            catom, body = _match_constraint(system, a)
            e = ex.substitute(e, {catom: body})
    raise JetlawError("on-shell reduction did not reach a fixpoint")


def _match_constraint(system: DifferentialSystem, a: ex.OpaqueAtom):
    for catom, body in system.opaque_constraints:
        if (
            a.fname == catom.fname
            and tuple(x.skey() for x in a.args) == tuple(x.skey() for x in catom.args)
            and _multiset_contains(a.tags, catom.tags)
        ):
            return catom, body
    return None


def decompose_on_system(system: DifferentialSystem, e: Expr):
    """Write e = remainder + sum_{a,J} Gamma^{aJ} D_J Delta^a with the
    remainder free of leading-derivative prolongations.

    Returns (remainder, Gamma, exact) where Gamma is a 1 x n
    LinearDiffOperator and exact is False when a coefficient still contains
    residual jets (the decomposition then holds with operator coefficients
    depending on Delta, which is recorded but not expanded)."""
    phantom = {lead: f"~r{k}" for k, (lead, _) in enumerate(system.equations)}
    # rewrite leading prolongations u_{L+K} -> v_K + D_K(rhs), to a fixpoint
    work = e
    for _ in range(_REDUCE_LIMIT):
        target = None
        for a in work.atoms(deep=True):
            if isinstance(a, ex.JetAtom) and not a.dep.startswith("~"):
                k = system._match_lead(a)
                if k is not None:
                    target = (a, k)
                    break
        if target is None:
            break
        a, k = target
        lead, rhs = system.equations[k]
        extra = _multiset_sub(a.midx, lead.midx)
        repl = Expr(ex._atom_frac(ex.jet_atom(phantom[lead], extra))) + total_derivative_multi(
            rhs, extra
        )
        work = ex.substitute(work, {a: repl})
    else:
        raise JetlawError("decomposition did not reach a fixpoint")
    if system.opaque_constraints:
        work = _apply_opaque_constraints(system, work)
    # split off the residual-free part
    names = {name: k for k, name in enumerate(f"~r{j}" for j in range(len(system.equations)))}
    num = work.frac.num
    den = work.frac.den
    if any(
        isinstance(a, ex.JetAtom) and a.dep in names for a in ex.f_atoms(Expr(ex.Frac(den, ex.ONE_P)).frac, deep=True)
    ):
        raise JetlawError("residual jets in a denominator; cannot decompose")
    rem_p: dict = {}
    gamma_terms: dict = {}
    exact = True
    for m, c in num.items():
        vjets = [
            (a, p)
            for a, p in m
            if isinstance(a, ex.JetAtom) and a.dep in names
        ]
        if not vjets:
            rem_p[m] = c
            continue
        g, _p = min(vjets, key=lambda tpl: tpl[0].skey)
        rest = []
        took = False
        for a, p in m:
            if a is g and not took:
                took = True
                if p > 1:
                    rest.append((a, p - 1))
                    exact = False
            else:
                rest.append((a, p))
                if isinstance(a, ex.JetAtom) and a.dep in names:
                    exact = False
        key = (names[g.dep], g.midx)
        coeff = ex.Frac(ex.p_norm({tuple(rest): c}), ex.ONE_P)
        gamma_terms[key] = ex.f_add(gamma_terms.get(key, ex.F_ZERO), coeff)
    remainder = Expr(ex.f_make(rem_p, den))
    den_e = Expr(ex.Frac(den, ex.ONE_P))
    # map residual jets back to derivatives of the residuals for coefficients
    back = {}
    for k, (lead, rhs) in enumerate(system.equations):
        delta = Expr(ex._atom_frac(lead)) - rhs
        back[f"~r{k}"] = delta
    coeffs = {}
    for (eq_idx, J), frac in gamma_terms.items():
        val = Expr(frac) / den_e
        val = va._subst_phantoms(val, back)
        coeffs[(0, eq_idx, J)] = val
    gamma = LinearDiffOperator(system.indeps, 1, len(system.equations), coeffs)
    return remainder, gamma, exact


def _apply_opaque_constraints(system: DifferentialSystem, e: Expr) -> Expr:
    for _ in range(_REDUCE_LIMIT):
        hit = None
        for a in e.atoms(deep=True):
            if isinstance(a, ex.OpaqueAtom):
                m = _match_constraint(system, a)
                if m is not None:
                    hit = m
                    break
        if hit is None:
            return e
        catom, body = hit
        e = ex.substitute(e, {catom: body})
    raise JetlawError("opaque constraint rewriting did not settle")


# ---------------------------------------------------------------------------
# Report helper


def _finish(
    check: str,
    subject: str,
    residuals,
    t0: float,
    mode: str = "exact",
    seed: int = 42,
    tol: float = 1e-8,
    extra: dict | None = None,
) -> CheckReport:
    """Build a report from residual expressions: verified iff all are zero
    (exactly, or numerically below tol when mode='numeric')."""
    from . import numeval

    terms = sum(len(r.frac.num) for r in residuals)
    numeric_max = None
    if all(ex.f_is_zero(r.frac) for r in residuals):
        verdict = VERIFIED
        terms = 0
    elif mode == "numeric":
        numeric_max = 0.0
        for r in residuals:
            numeric_max = max(numeval.numeric_residual(r, trials=200, seed=seed), numeric_max)
        verdict = VERIFIED if numeric_max < tol else REFUTED
    else:
        worst = 0.0
        for r in residuals:
            if not ex.f_is_zero(r.frac):
                worst = max(worst, numeval.numeric_residual(r, trials=20, seed=seed, include_ones=True))
        numeric_max = worst
        verdict = REFUTED if worst > 1e-6 else INCONCLUSIVE
    return CheckReport(
        check=check,
        subject=subject,
        verdict=verdict,
        residual_terms=terms,
        numeric_max=numeric_max,
        seed=seed,
        time_ms=int((time.monotonic() - t0) * 1000),
        mode=mode,
        tol=tol if mode == "numeric" else None,
        extra=extra or {},
    )


# ---------------------------------------------------------------------------
# Verification predicates


def check_symmetry(system: DifferentialSystem, alpha: Characteristic, mode="exact", seed=42, tol=1e-8) -> CheckReport:
    """alpha is a symmetry iff X_alpha Delta^a vanishes on-shell for all a."""
    t0 = time.monotonic()
    res = [
        on_shell_reduce(system, jc.prolong_apply(alpha, d)) for d in system.residuals
    ]
    subject = ", ".join(a.text() for a in alpha.exprs)
    return _finish("symmetry", subject, res, t0, mode, seed, tol)


def _euler_of_combination(system: DifferentialSystem, beta) -> list:
    combo = ex.ZERO
    for b, d in zip(beta, system.residuals):
        combo = combo + b * d
    return [va.euler(combo, v) for v in system.deps]


def check_cosymmetry(system: DifferentialSystem, beta, mode="exact", seed=42, tol=1e-8) -> CheckReport:
    """beta is a cosymmetry iff E_v(beta^a Delta^a) vanishes on-shell for
    every dependent variable v; any verified cosymmetry makes the system
    quasi-Noether."""
    t0 = time.monotonic()
    beta = tuple(beta)
    if len(beta) != len(system.equations):
        raise DimensionError("cosymmetry length must match equation count")
    res = [on_shell_reduce(system, r) for r in _euler_of_combination(system, beta)]
    subject = ", ".join(b.text() for b in beta)
    return _finish("cosymmetry", subject, res, t0, mode, seed, tol)


def check_characteristic(system: DifferentialSystem, beta, mode="exact", seed=42, tol=1e-8) -> CheckReport:
    """beta is a conservation-law characteristic iff E_v(beta^a Delta^a) = 0
    identically (off-shell)."""
    t0 = time.monotonic()
    beta = tuple(beta)
    res = _euler_of_combination(system, beta)
    subject = ", ".join(b.text() for b in beta)
    return _finish("characteristic", subject, res, t0, mode, seed, tol)


def is_quasi_noether(system: DifferentialSystem, betas) -> bool:
    """A system with at least one verified cosymmetry is quasi-Noether."""
    return any(check_cosymmetry(system, b).verdict == VERIFIED for b in betas)


def check_conservation_law(
    system: DifferentialSystem, fluxes: FluxVector, mode="exact", seed=42, tol=1e-8
) -> ConservationLaw:
    """Verify D_i K^i vanishes on-shell; extract the characteristic when the
    decomposition of the divergence is zeroth order in the residual jets."""
    t0 = time.monotonic()
    div = va.divergence(fluxes)
    red = on_shell_reduce(system, div)
    gamma = None
    extra = {}
    if ex.f_is_zero(red.frac):
        remainder, gop, exact = decompose_on_system(system, div)
        if exact and gop.max_order() == 0 and not ex.f_is_zero(div.frac):
            gamma = tuple(gop.entry(0, k, ()) for k in range(len(system.equations)))
            extra["characteristic"] = ", ".join(g.text() for g in gamma)
    subject = "(" + ", ".join(f.text() for f in fluxes) + ")"
    report = _finish("conservation_law", subject, [red], t0, mode, seed, tol, extra)
    law = ConservationLaw(fluxes=fluxes, characteristic=gamma, report=report)
    if report.verdict == VERIFIED:
        report.extra["triviality"] = check_triviality(system, law)
    return law


def conservation_law_from_density(
    system: DifferentialSystem, density: Expr, mode="exact", seed=42, tol=1e-8
) -> ConservationLaw:
    """Reconstruct the spatial flux of a conserved density by integration by
    parts of on_shell_reduce(-D_t density), then verify the full law."""
    tvar, svar = system.evolution_split()
    w = on_shell_reduce(system, -total_derivative(density, tvar))
    flux, rem = va.invert_divergence(w, (svar,))
    if not ex.f_is_zero(rem.frac):
        t0 = time.monotonic()
        report = _finish("conservation_law", density.text(), [rem], t0, mode, seed, tol)
        comps = {tvar: density, svar: flux.component(svar)}
        return ConservationLaw(
            fluxes=FluxVector(system.indeps, tuple(comps[i] for i in system.indeps)),
            characteristic=None,
            report=report,
        )
    comps = {tvar: density, svar: flux.component(svar)}
    fv = FluxVector(system.indeps, tuple(comps[i] for i in system.indeps))
    return check_conservation_law(system, fv, mode, seed, tol)


def noether_flux(
    system: DifferentialSystem, beta, alpha: Characteristic, mode="exact", seed=42, tol=1e-8
) -> ConservationLaw:
    """Conservation law D_i R^i(beta^a Delta^a) from a cosymmetry and a
    symmetry; refuses to emit fluxes when either precondition fails."""
    co = check_cosymmetry(system, beta, mode=mode, seed=seed, tol=tol)
    sy = check_symmetry(system, alpha, mode=mode, seed=seed, tol=tol)
    if co.verdict != VERIFIED or sy.verdict != VERIFIED:
        bad = []
        if co.verdict != VERIFIED:
            bad.append(f"cosymmetry {co.verdict}")
        if sy.verdict != VERIFIED:
            bad.append(f"symmetry {sy.verdict}")
        report = CheckReport(
            check="noether_flux",
            subject=", ".join(b.text() for b in beta),
            verdict=REFUTED,
            extra={"precondition": "; ".join(bad)},
        )
        return ConservationLaw(FluxVector(system.indeps, tuple(ex.ZERO for _ in system.indeps)), None, report)
    combo = ex.ZERO
    for b, d in zip(beta, system.residuals):
        combo = combo + b * d
    fluxes = va.noether_remainder(alpha, combo, indeps=system.indeps)
    return check_conservation_law(system, fluxes, mode, seed, tol)


def nontriviality_certificate(system: DifferentialSystem, beta, alpha: Characteristic):
    """On-shell value of B* alpha - A*(1), where X_alpha(beta.Delta) = A.Delta
    and E(beta.Delta) = B.Delta exactly; nonzero output certifies that the
    Noether-identity law is nontrivial.  Returns (tuple | None, report)."""
    t0 = time.monotonic()
    combo = ex.ZERO
    for b, d in zip(beta, system.residuals):
        combo = combo + b * d
    xa = jc.prolong_apply(alpha, combo)
    rem_a, A, exact_a = decompose_on_system(system, xa)
    eb = [va.euler(combo, v) for v in system.deps]
    rows = []
    exact_b = True
    rem_b_zero = True
    for r in eb:
        rem, B_row, exact = decompose_on_system(system, r)
        rows.append(B_row)
        exact_b = exact_b and exact
        rem_b_zero = rem_b_zero and ex.f_is_zero(rem.frac)
    if not (ex.f_is_zero(rem_a.frac) and rem_b_zero and exact_a and exact_b):
        report = CheckReport(
            check="nontriviality",
            subject=", ".join(b.text() for b in beta),
            verdict=INCONCLUSIVE,
            time_ms=int((time.monotonic() - t0) * 1000),
            extra={"reason": "operator decomposition has a nonzero remainder"},
        )
        return None, report
    n = len(system.equations)
    cert = []
    for a_idx in range(n):
        total = ex.ZERO
        for v_idx, v in enumerate(system.deps):
            B_row = rows[v_idx]
            for (_, c, J), coeff in B_row.coeffs.items():
                if c != a_idx:
                    continue
                total = total + jc.signed_total_derivative_multi(coeff * alpha.component(v), J)
        for (_, c, J), coeff in A.coeffs.items():
            if c == a_idx:
                total = total - jc.signed_total_derivative_multi(coeff, J)
        cert.append(on_shell_reduce(system, total))
    nonzero = any(not ex.f_is_zero(c.frac) for c in cert)
    report = CheckReport(
        check="nontriviality",
        subject=", ".join(b.text() for b in beta),
        verdict=VERIFIED if nonzero else REFUTED,
        residual_terms=sum(len(c.frac.num) for c in cert),
        time_ms=int((time.monotonic() - t0) * 1000),
        extra={"certificate": ", ".join(c.text() for c in cert)},
    )
    return tuple(cert), report


def verify_quasi_lagrangian(
    system: DifferentialSystem, L: Expr, T: LinearDiffOperator, mode="exact", seed=42, tol=1e-8
) -> CheckReport:
    """E_v(L) = (T Delta)_v identically, with T nondegenerate (its on-shell
    restriction is not the zero operator, tested on the coefficients)."""
    t0 = time.monotonic()
    td = T.apply(system.residuals)
    res = [va.euler(L, v) - td[k] for k, v in enumerate(system.deps)]
    nondeg = any(
        not ex.f_is_zero(on_shell_reduce(system, c).frac) for c in T.coeffs.values()
    )
    rep = _finish("quasi_lagrangian", L.text(), res, t0, mode, seed, tol)
    if rep.verdict == VERIFIED and not nondeg:
        rep.verdict = REFUTED
        rep.extra["reason"] = "operator degenerates on the solution manifold"
    return rep


def check_variational_symmetry(
    L: Expr, alpha: Characteristic, indeps: tuple | None = None, mode="exact", seed=42, tol=1e-8
) -> CheckReport:
    """alpha is a variational symmetry of the density L iff E_v(X_alpha L)
    vanishes identically for all v; on success the divergence fluxes M^i are
    emitted by integration by parts (best effort)."""
    t0 = time.monotonic()
    if indeps is None:
        indeps = va.infer_indeps(L, *alpha.exprs)
    xl = jc.prolong_apply(alpha, L)
    res = [va.euler(xl, v) for v in alpha.deps]
    rep = _finish("variational_symmetry", ", ".join(a.text() for a in alpha.exprs), res, t0, mode, seed, tol)
    if rep.verdict == VERIFIED:
        M, rem = va.invert_divergence(xl, indeps)
        if ex.f_is_zero(rem.frac):
            rep.extra["fluxes"] = "(" + ", ".join(m.text() for m in M) + ")"
        else:
            rep.extra["flux_remainder"] = rem.text()
    return rep


def check_subsymmetry(
    system: DifferentialSystem,
    alpha: Characteristic,
    T: LinearDiffOperator,
    mode="exact",
    seed=42,
    tol=1e-8,
) -> CheckReport:
    """alpha is a sub-symmetry iff X_alpha((T Delta)_v) vanishes on-shell
    for all rows, with T nondegenerate."""
    t0 = time.monotonic()
    td = T.apply(system.residuals)
    res = [on_shell_reduce(system, jc.prolong_apply(alpha, c)) for c in td]
    nondeg = any(
        not ex.f_is_zero(on_shell_reduce(system, c).frac) for c in T.coeffs.values()
    )
    rep = _finish("subsymmetry", ", ".join(a.text() for a in alpha.exprs), res, t0, mode, seed, tol)
    if rep.verdict == VERIFIED and not nondeg:
        rep.verdict = REFUTED
        rep.extra["reason"] = "operator degenerates on the solution manifold"
    return rep


def check_triviality(system: DifferentialSystem, law: ConservationLaw) -> str:
    """trivial-1: fluxes vanish on-shell; trivial-2: identically
    divergence-free; nontrivial: attached characteristic survives on-shell;
    otherwise inconclusive."""
    if all(
        ex.f_is_zero(on_shell_reduce(system, f).frac) for f in law.fluxes
    ):
        return "trivial-1"
    if ex.f_is_zero(va.divergence(law.fluxes).frac):
        return "trivial-2"
    if law.characteristic is not None:
        if any(
            not ex.f_is_zero(on_shell_reduce(system, g).frac) for g in law.characteristic
        ):
            return "nontrivial"
    return "inconclusive"
