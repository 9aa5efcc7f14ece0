"""Recursive-descent parser for the system-description DSL.

Grammar (semicolon-terminated declarations):

    file  := decl*
    decl  := "indep" ids ";" | "dep" ids ";" | "const" ids ";"
           | "func" ID "(" ids ")" ";"
           | "eq" ID ":" lead "=" expr ";"
           | "let" ID "=" expr ";"
           | "claim" ... ";"                (corpus files only)
    lead  := jet | pdcall                   (pd-head equations constrain
                                             opaque functions)
    jet   := ID "[" ids "]" | ID            (index lists order-insensitive)
    expr  := sum of products over ^ (right-assoc), unary -, calls
             exp|sin|cos|sinh|cosh|W, D(e,x[,n]), pd(F,k,...)(args),
             declared opaque calls f(args), parentheses.

Integer literals only; rationals are written with '/'.  Exponents may be
parenthesized rationals (e.g. t^(2/3)).  Every identifier must be declared
before use.  Equations must be in solved form: the leading jet may not
appear (nor any prolongation of it) on the right-hand side; that invariant
is enforced by DifferentialSystem at build time.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

from . import expr as ex
from .expr import Expr, JetlawError
from .jets import total_derivative
from .systems import DifferentialSystem, NonSolvedFormError
from .variational import LinearDiffOperator

__all__ = ["ParseError", "SystemFile", "parse_system", "parse_expression", "parse_operator"]


class ParseError(JetlawError):
    def __init__(self, msg, line=None, col=None):
        where = f" at {line}:{col}" if line is not None else ""
        super().__init__(f"{msg}{where}")
        self.line = line
        self.col = col


# ---------------------------------------------------------------------------
# Lexer

_PUNCT = ("+", "-", "*", "/", "^", "(", ")", "[", "]", ",", ";", ":", "=")


@dataclass
class Tok:
    kind: str  # id | int | punct | str | eof
    val: str
    line: int
    col: int


def _lex(text: str):
    toks = []
    line, col = 1, 1
    i = 0
    n = len(text)
    while i < n:
        c = text[i]
        if c == "\n":
            line += 1
            col = 1
            i += 1
            continue
        if c in " \t\r":
            i += 1
            col += 1
            continue
        if c == "#":
            while i < n and text[i] != "\n":
                i += 1
            continue
        if c == '"':
            j = i + 1
            while j < n and text[j] != '"':
                j += 1
            if j >= n:
                raise ParseError("unterminated string", line, col)
            toks.append(Tok("str", text[i + 1 : j], line, col))
            col += j - i + 1
            i = j + 1
            continue
        if c.isdigit():
            j = i
            while j < n and text[j].isdigit():
                j += 1
            toks.append(Tok("int", text[i:j], line, col))
            col += j - i
            i = j
            continue
        if c.isalpha() or c == "_":
            j = i
            while j < n and (text[j].isalnum() or text[j] == "_"):
                j += 1
            toks.append(Tok("id", text[i:j], line, col))
            col += j - i
            i = j
            continue
        if c in _PUNCT:
            toks.append(Tok("punct", c, line, col))
            i += 1
            col += 1
            continue
        raise ParseError(f"unexpected character {c!r}", line, col)
    toks.append(Tok("eof", "", line, col))
    return toks


# ---------------------------------------------------------------------------
# Declaration environment


@dataclass
class SystemFile:
    """Parsed declarations of a system file."""

    indeps: list = field(default_factory=list)
    deps: list = field(default_factory=list)
    consts: list = field(default_factory=list)
    funcs: dict = field(default_factory=dict)  # name -> arity
    lets: dict = field(default_factory=dict)  # name -> Expr
    equations: list = field(default_factory=list)  # (lead JetAtom, rhs Expr, eqname)
    opaque_constraints: list = field(default_factory=list)  # (OpaqueAtom, Expr)
    claims: list = field(default_factory=list)  # raw claim dicts (corpus layer)
    name: str = ""

    def system(self) -> DifferentialSystem:
        return DifferentialSystem(
            tuple(self.indeps),
            tuple(self.deps),
            [(lead, rhs) for lead, rhs, _ in self.equations],
            name=self.name,
            opaque_constraints=tuple(self.opaque_constraints),
        )


_ELEM_CALLS = ("exp", "sin", "cos", "sinh", "cosh", "W")
_RESERVED = set(_ELEM_CALLS) | {"D", "pd", "indep", "dep", "const", "func", "eq", "let", "claim"}


class _Parser:
    def __init__(self, toks, env: SystemFile):
        self.toks = toks
        self.k = 0
        self.env = env

    # token helpers
    def peek(self) -> Tok:
        return self.toks[self.k]

    def next(self) -> Tok:
        t = self.toks[self.k]
        self.k += 1
        return t

    def expect(self, kind, val=None) -> Tok:
        t = self.next()
        if t.kind != kind or (val is not None and t.val != val):
            want = val or kind
            raise ParseError(f"expected {want!r}, found {t.val!r}", t.line, t.col)
        return t

    def at_punct(self, v) -> bool:
        t = self.peek()
        return t.kind == "punct" and t.val == v

    def eat_punct(self, v) -> bool:
        if self.at_punct(v):
            self.k += 1
            return True
        return False

    # declarations
    def idlist(self):
        out = [self.expect("id").val]
        while self.eat_punct(","):
            out.append(self.expect("id").val)
        return out

    def file(self):
        while self.peek().kind != "eof":
            self.decl()
        return self.env

    def _declare(self, names, bucket, label):
        for nm in names:
            if nm in _RESERVED:
                raise ParseError(f"{nm!r} is reserved")
            if self._known(nm):
                raise ParseError(f"identifier {nm!r} already declared")
            bucket.append(nm)
        del label

    def _known(self, nm):
        e = self.env
        return nm in e.indeps or nm in e.deps or nm in e.consts or nm in e.funcs or nm in e.lets

    def decl(self):
        t = self.expect("id")
        kw = t.val
        e = self.env
        if kw == "indep":
            self._declare(self.idlist(), e.indeps, "indep")
        elif kw == "dep":
            self._declare(self.idlist(), e.deps, "dep")
        elif kw == "const":
            self._declare(self.idlist(), e.consts, "const")
        elif kw == "func":
            nm = self.expect("id").val
            if self._known(nm) or nm in _RESERVED:
                raise ParseError(f"identifier {nm!r} already declared", t.line, t.col)
            self.expect("punct", "(")
            args = self.idlist()
            self.expect("punct", ")")
            e.funcs[nm] = len(args)
        elif kw == "eq":
            nm = self.expect("id").val
            self.expect("punct", ":")
            lead = self.lead()
            self.expect("punct", "=")
            rhs = self.expr()
            if isinstance(lead, ex.JetAtom):
                e.equations.append((lead, rhs, nm))
            else:
                e.opaque_constraints.append((lead, rhs))
        elif kw == "let":
            nm = self.expect("id").val
            if self._known(nm) or nm in _RESERVED:
                raise ParseError(f"identifier {nm!r} already declared", t.line, t.col)
            self.expect("punct", "=")
            e.lets[nm] = self.expr()
        elif kw == "claim":
            self.claim()
        else:
            raise ParseError(f"unknown declaration {kw!r}", t.line, t.col)
        self.expect("punct", ";")

    def lead(self):
        t = self.peek()
        if t.kind == "id" and t.val == "pd":
            node = self.atom()
            atoms = [a for a in node.atoms() if isinstance(a, ex.OpaqueAtom)]
            if len(atoms) != 1 or node != Expr(ex._atom_frac(atoms[0])):
                raise ParseError("constraint head must be a single pd(...) atom", t.line, t.col)
            return atoms[0]
        nm = self.expect("id")
        if nm.val not in self.env.deps:
            raise ParseError(
                f"leading term must be a declared dependent variable, got {nm.val!r} "
                "(implicit equations are not accepted)",
                nm.line,
                nm.col,
            )
        idxs = []
        if self.eat_punct("["):
            idxs = self.idlist()
            self.expect("punct", "]")
        for i in idxs:
            if i not in self.env.indeps:
                raise ParseError(f"undeclared independent variable {i!r}", nm.line, nm.col)
        if not self.at_punct("="):
            t = self.peek()
            raise ParseError(
                f"implicit equation: leading derivative {nm.val}"
                f"{'[' + ','.join(idxs) + ']' if idxs else ''} must stand alone on the left",
                t.line,
                t.col,
            )
        return ex.jet_atom(nm.val, idxs)

    def claim(self):
        kind = self.expect("id").val
        subjects = [self.expr_or_opexpr()]
        while self.eat_punct(","):
            subjects.append(self.expr_or_opexpr())
        tok = self.expect("id")
        if tok.val != "expect":
            raise ParseError("claim needs an 'expect' clause", tok.line, tok.col)
        verdict = self.expect("id").val
        mode = "exact"
        anchor = ""
        while self.peek().kind == "id" and self.peek().val in ("mode", "anchor"):
            w = self.next().val
            if w == "mode":
                mode = self.expect("id").val
            else:
                anchor = self.expect("str").val
        self.env.claims.append(
            {"check": kind, "subjects": subjects, "expect": verdict, "mode": mode, "anchor": anchor}
        )

    def expr_or_opexpr(self):
        # operator subjects appear in quasilagrangian/subsym claims as D[...] sums
        save = self.k
        try:
            return self.opexpr_if_present()
        except _NotOperator:
            self.k = save
            return self.expr()

    def opexpr_if_present(self):
        if not self._looks_like_operator():
            raise _NotOperator
        return self.opexpr()

    def _looks_like_operator(self):
        # scan ahead for a top-level D[ token before the claim tail
        depth = 0
        j = self.k
        while j < len(self.toks):
            t = self.toks[j]
            if t.kind == "punct" and t.val in "([":
                depth += 1
            elif t.kind == "punct" and t.val in ")]":
                depth -= 1
            elif t.kind == "punct" and t.val in (",", ";") and depth <= 0:
                break
            elif t.kind == "id" and t.val == "expect" and depth == 0:
                break
            if (
                t.kind == "id"
                and t.val == "D"
                and j + 1 < len(self.toks)
                and self.toks[j + 1].kind == "punct"
                and self.toks[j + 1].val == "["
            ):
                return True
            j += 1
        return False

    # operator expressions: sums of [coeff *] D[ids] terms (D[] = identity)
    def opexpr(self) -> LinearDiffOperator:
        entries: dict = {}
        sign = 1
        while True:
            if self.eat_punct("-"):
                sign = -sign
            elif self.eat_punct("+"):
                pass
            coeff, J = self.opterm()
            key = tuple(sorted(J))
            cur = entries.get(key, ex.ZERO)
            entries[key] = cur + coeff * sign
            sign = 1
            if self.at_punct("+") or self.at_punct("-"):
                continue
            break
        return LinearDiffOperator.scalar(tuple(self.env.indeps), entries)

    def opterm(self):
        coeff = ex.ONE
        J: list = []
        saw_d = False
        while True:
            t = self.peek()
            if t.kind == "id" and t.val == "D" and self.toks[self.k + 1].val == "[":
                self.next()
                self.expect("punct", "[")
                if not self.at_punct("]"):
                    J.extend(self.idlist())
                self.expect("punct", "]")
                saw_d = True
            else:
                coeff = coeff * self.factor()
            if not self.eat_punct("*"):
                break
        if not saw_d and not J:
            # plain coefficient term means order zero
            pass
        return coeff, J

    # expressions
    def expr(self) -> Expr:
        node = self.term()
        while True:
            if self.eat_punct("+"):
                node = node + self.term()
            elif self.eat_punct("-"):
                node = node - self.term()
            else:
                return node

    def term(self) -> Expr:
        node = self.unary()
        while True:
            if self.eat_punct("*"):
                node = node * self.unary()
            elif self.eat_punct("/"):
                node = node / self.unary()
            else:
                return node

    def unary(self) -> Expr:
        if self.eat_punct("-"):
            return -self.unary()
        return self.power()

    def power(self) -> Expr:
        base = self.atom()
        if self.eat_punct("^"):
            expo = self.exponent()
            return ex.power(base, expo)
        return base

    def exponent(self, in_parens: bool = False) -> Fraction:
        neg = False
        if self.eat_punct("-"):
            neg = True
        if self.eat_punct("("):
            q = self.exponent(in_parens=True)
            self.expect("punct", ")")
        else:
            t = self.expect("int")
            q = Fraction(int(t.val))
            # a/b exponents only inside parentheses: u^3/v is (u^3)/v
            if in_parens and self.eat_punct("/"):
                d = self.expect("int")
                q = q / int(d.val)
        return -q if neg else q

    def atom(self) -> Expr:
        t = self.next()
        if t.kind == "int":
            return ex.rational(int(t.val))
        if t.kind == "punct" and t.val == "(":
            node = self.expr()
            self.expect("punct", ")")
            return node
        if t.kind != "id":
            raise ParseError(f"unexpected token {t.val!r}", t.line, t.col)
        name = t.val
        if name in _ELEM_CALLS:
            self.expect("punct", "(")
            arg = self.expr()
            self.expect("punct", ")")
            return {
                "exp": ex.exp_,
                "sin": ex.sin_,
                "cos": ex.cos_,
                "sinh": ex.sinh_,
                "cosh": ex.cosh_,
                "W": ex.lambertw_,
            }[name](arg)
        if name == "D":
            self.expect("punct", "(")
            e = self.expr()
            self.expect("punct", ",")
            v = self.expect("id").val
            if v not in self.env.indeps:
                raise ParseError(f"undeclared independent variable {v!r}", t.line, t.col)
            n = 1
            if self.eat_punct(","):
                n = int(self.expect("int").val)
            self.expect("punct", ")")
            for _ in range(n):
                e = total_derivative(e, v)
            return e
        if name == "pd":
            self.expect("punct", "(")
            fname = self.expect("id").val
            if fname not in self.env.funcs:
                raise ParseError(f"undeclared function {fname!r}", t.line, t.col)
            tags = []
            while self.eat_punct(","):
                tags.append(int(self.expect("int").val))
            self.expect("punct", ")")
            arity = self.env.funcs[fname]
            if any(not (1 <= s <= arity) for s in tags):
                raise ParseError(f"slot out of range for {fname!r}", t.line, t.col)
            self.expect("punct", "(")
            args = [self.expr()]
            while self.eat_punct(","):
                args.append(self.expr())
            self.expect("punct", ")")
            if len(args) != arity:
                raise ParseError(f"{fname!r} expects {arity} arguments", t.line, t.col)
            return Expr(ex._atom_frac(ex.opaque_atom(fname, tags, tuple(a.frac for a in args))))
        if name in self.env.funcs:
            self.expect("punct", "(")
            args = [self.expr()]
            while self.eat_punct(","):
                args.append(self.expr())
            self.expect("punct", ")")
            if len(args) != self.env.funcs[name]:
                raise ParseError(f"{name!r} expects {self.env.funcs[name]} arguments", t.line, t.col)
            return ex.opaque(name, *args)
        if name in self.env.deps:
            idxs = []
            if self.eat_punct("["):
                idxs = self.idlist()
                self.expect("punct", "]")
                for i in idxs:
                    if i not in self.env.indeps:
                        raise ParseError(f"undeclared independent variable {i!r}", t.line, t.col)
            return ex.jet(name, *idxs)
        if name in self.env.indeps:
            return ex.indep(name)
        if name in self.env.consts:
            return ex.const(name)
        if name in self.env.lets:
            return self.env.lets[name]
        raise ParseError(f"undeclared identifier {name!r}", t.line, t.col)


class _NotOperator(Exception):
    pass


def parse_system(text: str, name: str = "") -> SystemFile:
    env = SystemFile(name=name)
    p = _Parser(_lex(text), env)
    p.file()
    if env.equations:
        env.system()  # solved-form validation
    return env


def parse_expression(text: str, env: SystemFile) -> Expr:
    p = _Parser(_lex(text), env)
    node = p.expr()
    if p.peek().kind != "eof":
        t = p.peek()
        raise ParseError(f"trailing input {t.val!r}", t.line, t.col)
    return node


def parse_expression_list(text: str, env: SystemFile) -> list:
    p = _Parser(_lex(text), env)
    out = [p.expr()]
    while p.eat_punct(","):
        out.append(p.expr())
    if p.peek().kind != "eof":
        t = p.peek()
        raise ParseError(f"trailing input {t.val!r}", t.line, t.col)
    return out


def parse_operator(text: str, env: SystemFile) -> LinearDiffOperator:
    p = _Parser(_lex(text), env)
    op = p.opexpr()
    if p.peek().kind != "eof":
        t = p.peek()
        raise ParseError(f"trailing input {t.val!r}", t.line, t.col)
    return op
