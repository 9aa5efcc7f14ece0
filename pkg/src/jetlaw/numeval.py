"""Numeric backends: seeded random-point residual checks, Lambert W, and a
small method-of-lines integrator for conserved-integral drift tests.

Random point assignments treat jet variables, independent variables,
symbolic constants and opaque atoms (including their derivative atoms) as
independent values: this is a polynomial-identity oracle, not a function
evaluation, which is exactly what identities in arbitrary functions need.
Elementary atoms and root atoms evaluate through their functions so that
relations outside the symbolic rewrite set (sin/cos, roots) are visible to
the oracle.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field

import numpy as np

from . import expr as ex
from .expr import Expr, Frac, JetlawError

__all__ = [
    "numeric_residual",
    "eval_expr",
    "PointAssignment",
    "lambert_w",
    "GridState",
    "integrate_mol",
    "functional_drift",
    "critical_point_check",
]

DEFAULT_RANGE = (0.5, 1.5)
DEFAULT_SEED = 42
POLE_EPS = 1e-12
MAX_REDRAWS = 10


class EvalPole(JetlawError):
    pass


# ---------------------------------------------------------------------------
# Point evaluation


@dataclass
class PointAssignment:
    """Values for the base atoms of an expression (jets, independents,
    constants, opaque atoms); compound elementary/root atoms derive their
    values from their arguments."""

    values: dict = field(default_factory=dict)

    @classmethod
    def random(cls, e: Expr, rng: random.Random, lo: float, hi: float) -> "PointAssignment":
        vals = {}
        for a in sorted(_base_atoms(e), key=lambda a: a.skey):
            vals[a] = rng.uniform(lo, hi)
        return cls(vals)

    @classmethod
    def ones(cls, e: Expr) -> "PointAssignment":
        return cls({a: 1.0 for a in _base_atoms(e)})


def _base_atoms(e: Expr) -> set:
    out = set()
    for a in e.atoms(deep=True):
        if isinstance(a, (ex.IndepAtom, ex.JetAtom, ex.ConstAtom, ex.OpaqueAtom)):
            out.add(a)
    return out


def _eval_atom(a, vals: dict, memo: dict) -> float:
    got = memo.get(a)
    if got is not None:
        return got
    if isinstance(a, (ex.IndepAtom, ex.JetAtom, ex.ConstAtom, ex.OpaqueAtom)):
        try:
            v = vals[a]
        except KeyError:
            raise JetlawError(f"no value assigned for atom {ex.atom_text(a)}")
    elif isinstance(a, ex.ElemAtom):
        z = _eval_frac(a.arg, vals, memo)
        if a.fn == "exp":
            v = math.exp(z)
        elif a.fn == "sin":
            v = math.sin(z)
        elif a.fn == "cos":
            v = math.cos(z)
        elif a.fn == "sinh":
            v = math.sinh(z)
        elif a.fn == "cosh":
            v = math.cosh(z)
        elif a.fn == "W":
            v = lambert_w(z)
        else:
            raise JetlawError(f"unknown elementary atom {a.fn}")
    elif isinstance(a, ex.RootAtom):
        b = _eval_frac(a.base, vals, memo)
        if b < 0 and a.k % 2 == 0:
            raise EvalPole("even root of negative base")
        v = math.copysign(abs(b) ** (1.0 / a.k), b)
    else:
        raise JetlawError("unknown atom kind")
    memo[a] = v
    return v


def _eval_poly(p: dict, vals: dict, memo: dict) -> float:
    total = 0.0
    for m, c in p.items():
        t = float(c)
        for a, e in m:
            t *= _eval_atom(a, vals, memo) ** e
        total += t
    return total


def _eval_frac(f: Frac, vals: dict, memo: dict) -> float:
    n = _eval_poly(f.num, vals, memo)
    if f.den == ex.ONE_P:
        return n
    d = _eval_poly(f.den, vals, memo)
    if abs(d) < POLE_EPS:
        raise EvalPole("denominator magnitude below 1e-12")
    return n / d


def eval_expr(e: Expr, assignment: PointAssignment) -> float:
    return _eval_frac(e.frac, assignment.values, {})


def numeric_residual(
    e: Expr,
    trials: int = 20,
    rng_range: tuple = DEFAULT_RANGE,
    seed: int = DEFAULT_SEED,
    include_ones: bool = False,
) -> float:
    """Maximum |value| of e over seeded random point assignments; poles are
    redrawn at most MAX_REDRAWS times each, then raised."""
    if trials < 1:
        raise JetlawError("trials must be >= 1")
    rng = random.Random(seed)
    lo, hi = rng_range
    worst = 0.0
    if include_ones:
        try:
            worst = abs(eval_expr(e, PointAssignment.ones(e)))
        except EvalPole:
            pass
    for _ in range(trials):
        for attempt in range(MAX_REDRAWS + 1):
            pt = PointAssignment.random(e, rng, lo, hi)
            try:
                v = eval_expr(e, pt)
                break
            except EvalPole:
                if attempt == MAX_REDRAWS:
                    raise
        if not math.isfinite(v):
            raise JetlawError("non-finite value in numeric residual")
        worst = max(worst, abs(v))
    return worst


# ---------------------------------------------------------------------------
# Lambert W (principal branch), Halley iteration


def lambert_w(z: float) -> float:
    """Principal branch W(z) with w*exp(w) = z, for z >= -1/e."""
    if z < -1.0 / math.e - 1e-300:
        raise JetlawError("lambert_w: argument below -1/e")
    if z == 0.0:
        return 0.0
    if z < -1.0 / math.e + 1e-16:
        return -1.0
    # initial guess: series near the branch point, log asymptote elsewhere
    if z < -0.25:
        p = math.sqrt(2.0 * (math.e * z + 1.0))
        w = -1.0 + p - p * p / 3.0
    elif z < 1.0:
        w = z * (1.0 - z + 1.5 * z * z) if abs(z) < 0.5 else 0.5
    else:
        lz = math.log(z)
        llz = math.log(lz) if lz > 0 else 0.0
        w = lz - llz
    for _ in range(100):
        ew = math.exp(w)
        f = w * ew - z
        w1 = w + 1.0
        dw = f / (ew * w1 - (w + 2.0) * f / (2.0 * w1))
        w -= dw
        if abs(dw) <= 1e-14 * (1.0 + abs(w)):
            return w
    raise JetlawError("lambert_w failed to converge")


# ---------------------------------------------------------------------------
# Method of lines on a uniform periodic grid


@dataclass
class GridState:
    """Uniform periodic grid with per-dependent-variable field values."""

    x0: float
    h: float
    n: int
    fields: dict  # dep name -> np.ndarray
    time: float = 0.0

    def __post_init__(self):
        if self.n < 16:
            raise JetlawError("grid too small (N >= 16)")
        if self.h <= 0:
            raise JetlawError("grid spacing must be positive")

    @property
    def x(self) -> np.ndarray:
        return self.x0 + self.h * np.arange(self.n)


# 4th-order central difference stencils on periodic data
def _d1(f, h):
    return (-np.roll(f, -2) + 8 * np.roll(f, -1) - 8 * np.roll(f, 1) + np.roll(f, 2)) / (12 * h)


def _d2(f, h):
    return (
        -np.roll(f, -2) + 16 * np.roll(f, -1) - 30 * f + 16 * np.roll(f, 1) - np.roll(f, 2)
    ) / (12 * h * h)


def _d3(f, h):
    return (
        -np.roll(f, 3) + 8 * np.roll(f, 2) - 13 * np.roll(f, 1)
        + 13 * np.roll(f, -1) - 8 * np.roll(f, -2) + np.roll(f, -3)
    ) / (8 * h ** 3)


def _d4(f, h):
    return (
        -np.roll(f, 3) + 12 * np.roll(f, 2) - 39 * np.roll(f, 1) + 56 * f
        - 39 * np.roll(f, -1) + 12 * np.roll(f, -2) - np.roll(f, -3)
    ) / (6 * h ** 4)


_STENCILS = {1: _d1, 2: _d2, 3: _d3, 4: _d4}

BLOWUP_LIMIT = 1e12


class BlowupError(JetlawError):
    pass


def _compile_grid_expr(e: Expr, space_var: str, time_var: str, const_values: dict):
    """Compile an expression to a function of (t, x-array, jet arrays).

    Jet arrays are keyed by (dep, x-order); only x-derivatives may appear.
    """
    frac = e.frac

    def ev_atom(a, env, memo):
        got = memo.get(a)
        if got is not None:
            return got
        if isinstance(a, ex.IndepAtom):
            v = env["t"] if a.name == time_var else env["x"]
        elif isinstance(a, ex.JetAtom):
            if any(i != space_var for i in a.midx):
                raise JetlawError("grid expressions may use x-derivatives only")
            v = env["jets"][(a.dep, len(a.midx))]
        elif isinstance(a, ex.ConstAtom):
            try:
                v = const_values[a.name]
            except KeyError:
                raise JetlawError(f"no numeric value for constant {a.name}")
        elif isinstance(a, ex.ElemAtom):
            z = ev_frac(a.arg, env, memo)
            fn = {"exp": np.exp, "sin": np.sin, "cos": np.cos, "sinh": np.sinh, "cosh": np.cosh}.get(a.fn)
            if fn is None:
                if a.fn == "W":
                    v = np.vectorize(lambert_w)(z)
                else:
                    raise JetlawError(f"unsupported elementary atom {a.fn} on grids")
            else:
                v = fn(z)
        elif isinstance(a, ex.RootAtom):
            b = ev_frac(a.base, env, memo)
            v = np.sign(b) * np.abs(b) ** (1.0 / a.k)
        else:
            raise JetlawError("unsupported atom on grids")
        memo[a] = v
        return v

    def ev_poly(p, env, memo):
        total = 0.0
        for m, c in p.items():
            t = float(c)
            for a, epow in m:
                t = t * ev_atom(a, env, memo) ** epow
            total = total + t
        return total

    def ev_frac(f, env, memo):
        n = ev_poly(f.num, env, memo)
        if f.den == ex.ONE_P:
            return n
        return n / ev_poly(f.den, env, memo)

    def run(t, x, jets):
        return ev_frac(frac, {"t": t, "x": x, "jets": jets}, {})

    return run


def _max_x_order(e: Expr, dep: str) -> int:
    orders = [len(a.midx) for a in e.jets(dep)]
    return max(orders, default=0)


def integrate_mol(
    system,
    u0: GridState,
    t_end: float,
    dt: float,
    const_values: dict | None = None,
    n_save: int = 100,
):
    """Classical RK4 in time, 4th-order central differences in space, on the
    periodic grid; returns the list of sampled GridStates (trajectory)."""
    const_values = const_values or {}
    if len(system.indeps) != 2:
        raise JetlawError("integrate_mol expects one time and one space variable")
    time_var, space_var = system.evolution_split()
    rhss = {}
    orders = {}
    for lead, rhs in system.equations:
        if lead.midx != (time_var,):
            raise JetlawError("integrate_mol expects first-order evolution form")
        order = max(_max_x_order(rhs, d) for d in system.deps)
        if order > 4:
            raise JetlawError("rhs spatial order above 4 not supported")
        orders[lead.dep] = order
        rhss[lead.dep] = _compile_grid_expr(rhs, space_var, time_var, const_values)
    h = u0.h
    max_order = 4

    def deriv_env(fields):
        jets = {}
        for dep, f in fields.items():
            jets[(dep, 0)] = f
            for k in range(1, max_order + 1):
                jets[(dep, k)] = _STENCILS[k](f, h)
        return jets

    def rhs_all(t, fields):
        jets = deriv_env(fields)
        x = u0.x
        out = {}
        for dep in fields:
            out[dep] = rhss[dep](t, x, jets)
        return out

    steps = int(round((t_end - u0.time) / dt))
    save_every = max(1, steps // max(1, n_save))
    fields = {d: np.array(f, dtype=float) for d, f in u0.fields.items()}
    t = u0.time
    traj = [GridState(u0.x0, h, u0.n, {d: f.copy() for d, f in fields.items()}, t)]
    for i in range(steps):
        k1 = rhs_all(t, fields)
        f2 = {d: fields[d] + 0.5 * dt * k1[d] for d in fields}
        k2 = rhs_all(t + 0.5 * dt, f2)
        f3 = {d: fields[d] + 0.5 * dt * k2[d] for d in fields}
        k3 = rhs_all(t + 0.5 * dt, f3)
        f4 = {d: fields[d] + dt * k3[d] for d in fields}
        k4 = rhs_all(t + dt, f4)
        for d in fields:
            fields[d] = fields[d] + (dt / 6.0) * (k1[d] + 2 * k2[d] + 2 * k3[d] + k4[d])
        t += dt
        for d in fields:
            mx = np.max(np.abs(fields[d]))
            if not np.isfinite(mx) or mx > BLOWUP_LIMIT:
                raise BlowupError(f"field {d} exceeded {BLOWUP_LIMIT:g} at t={t:g}")
        if (i + 1) % save_every == 0 or i + 1 == steps:
            traj.append(GridState(u0.x0, h, u0.n, {d: f.copy() for d, f in fields.items()}, t))
    return traj


def functional_drift(
    trajectory,
    density: Expr,
    space_var: str = "x",
    time_var: str = "t",
    const_values: dict | None = None,
) -> float:
    """Max relative drift of the spatial integral of a density (trapezoid on
    the periodic grid) along a trajectory."""
    const_values = const_values or {}
    fn = _compile_grid_expr(density, space_var, time_var, const_values)
    vals = []
    for st in trajectory:
        jets = {}
        for dep, f in st.fields.items():
            jets[(dep, 0)] = f
            for k in range(1, 5):
                jets[(dep, k)] = _STENCILS[k](f, st.h)
        rho = fn(st.time, st.x, jets)
        rho = np.broadcast_to(rho, (st.n,))
        vals.append(st.h * float(np.sum(rho)))
    base = vals[0]
    return max(abs(v - base) for v in vals) / max(1.0, abs(base))


# ---------------------------------------------------------------------------
# Closed-form solution checks (critical points of conserved integrals)


def _jet_substitution(solution: dict, e: Expr, indeps: tuple) -> Expr:
    """Replace every jet atom u^a_J in e by the corresponding derivative of
    the closed-form solution expressions (which contain no jets)."""
    from . import jets as jc

    bindings = {}
    for a in e.atoms(deep=True):
        if isinstance(a, ex.JetAtom) and a.dep in solution:
            val = solution[a.dep]
            for i in a.midx:
                val = jc.total_derivative(val, i)
            bindings[a] = val
    return ex.substitute(e, bindings)


def critical_point_check(example_id: str, trials: int = 100, seed: int = DEFAULT_SEED, tol: float = 1e-8):
    """Verify that a closed-form solution satisfies both the evolution
    equation and the critical-point equation of its conserved integral.

    Returns (CheckReport-like dict); the kdv-xt case is additionally exact.
    """
    from . import systems as sy
    from .corpus import builtin_example

    spec = builtin_example(example_id)
    system = spec["system"]
    solution = spec["solution"]
    critical = spec["critical"]
    residuals = []
    for lead, rhs in system.equations:
        delta = Expr(ex._atom_frac(lead)) - rhs
        residuals.append(_jet_substitution(solution, delta, system.indeps))
    for c in critical:
        residuals.append(_jet_substitution(solution, c, system.indeps))
    worst = 0.0
    exact = True
    for r in residuals:
        if not ex.f_is_zero(r.frac):
            exact = False
        worst = max(worst, numeric_residual(r, trials=trials, seed=seed))
    verdict = "verified" if worst < tol else "refuted"
    return {
        "check": "critical_point",
        "subject": example_id,
        "verdict": verdict,
        "numeric_max": worst,
        "exact": exact,
        "seed": seed,
    }
