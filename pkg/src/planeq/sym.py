"""Hash-consed symbolic expressions in ring normal form.

Every expression is kept as  const + sum(coeff * monomial)  with rational
coefficients. Monomials are sorted power products over atoms:

  Var   -- a named scalar unknown (one per tensor element)
  App   -- uninterpreted unary function application (EXP, RSQRT, SIGMOID)
  Quot  -- an unevaluated division num/den (no fraction combining here)
  Box   -- a general sum used as a factor (no sum*sum distribution)

Normalization is deliberately linear: constants fold, scalars and single
monomials distribute over sums, like terms collect, but sums are never
multiplied out and fractions are never combined. Two expressions that
normalize to the same form are interned to the same object, so the verifier's
fast path is a pointer comparison. Everything the fast path cannot see goes to
the solver.

Interning is per-Algebra; each worker process owns one.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Any, Callable

ZERO = Fraction(0)
ONE = Fraction(1)

EXP = "EXP"
RSQRT = "RSQRT"
SIGMOID = "SIGMOID"


class Atom:
    __slots__ = ("uid", "tag", "a", "b", "has_uf")

    def __init__(self, uid: int, tag: str, a, b=None, has_uf: bool = False):
        self.uid = uid
        self.tag = tag  # var | app | quot | box
        self.a = a
        self.b = b
        self.has_uf = has_uf

    def __repr__(self):
        if self.tag == "var":
            return self.a
        if self.tag == "app":
            return f"{self.a}({self.b!r})"
        if self.tag == "quot":
            return f"({self.a!r})/({self.b!r})"
        return f"[{self.a!r}]"


Mono = tuple  # tuple[(Atom, int exponent), ...] sorted by atom uid
Terms = tuple  # tuple[(Fraction, Mono), ...] sorted by mono key


class Expr:
    __slots__ = ("uid", "const", "terms", "has_uf")

    def __init__(self, uid: int, const: Fraction, terms: Terms, has_uf: bool):
        self.uid = uid
        self.const = const
        self.terms = terms
        self.has_uf = has_uf

    @property
    def is_const(self) -> bool:
        return not self.terms

    @property
    def is_zero(self) -> bool:
        return not self.terms and self.const == 0

    @property
    def is_mono(self) -> bool:
        return self.const == 0 and len(self.terms) == 1

    def __repr__(self):
        parts = [str(self.const)] if (self.const or not self.terms) else []
        for c, m in self.terms:
            ms = "*".join(f"{a!r}^{p}" if p > 1 else repr(a) for a, p in m)
            parts.append(f"{c}*{ms}" if c != 1 else ms)
        return " + ".join(parts)


def _mono_key(mono: Mono) -> tuple:
    return tuple((a.uid, p) for a, p in mono)


class Algebra:
    """Expression factory with hash-consing."""

    def __init__(self):
        self._atoms: dict[tuple, Atom] = {}
        self._exprs: dict[tuple, Expr] = {}
        self._next = 0
        self.zero = self.const(ZERO)
        self.one = self.const(ONE)

    # -- interning ---------------------------------------------------------

    def _atom(self, tag: str, a, b=None, has_uf: bool = False) -> Atom:
        if tag == "var":
            key = (tag, a)
        elif tag == "app":
            key = (tag, a, b.uid)
        elif tag == "quot":
            key = (tag, a.uid, b.uid)
        else:
            key = (tag, a.uid)
        got = self._atoms.get(key)
        if got is None:
            got = Atom(self._next, tag, a, b, has_uf)
            self._next += 1
            self._atoms[key] = got
        return got

    def _expr(self, const: Fraction, terms: Terms) -> Expr:
        key = (const, tuple((c, _mono_key(m)) for c, m in terms))
        got = self._exprs.get(key)
        if got is None:
            has_uf = any(a.has_uf for _, m in terms for a, _ in m)
            got = Expr(self._next, const, terms, has_uf)
            self._next += 1
            self._exprs[key] = got
        return got

    # -- constructors ------------------------------------------------------

    def const(self, q) -> Expr:
        return self._expr(Fraction(q), ())

    def var(self, name: str) -> Expr:
        a = self._atom("var", name)
        return self._expr(ZERO, ((ONE, ((a, 1),)),))

    def app(self, fn: str, arg: Expr) -> Expr:
        a = self._atom("app", fn, arg, has_uf=True)
        return self._expr(ZERO, ((ONE, ((a, 1),)),))

    def add(self, x: Expr, y: Expr) -> Expr:
        if x.is_zero:
            return y
        if y.is_zero:
            return x
        const = x.const + y.const
        acc: dict[tuple, list] = {}
        order: list[tuple] = []
        for src in (x.terms, y.terms):
            for c, m in src:
                k = _mono_key(m)
                if k in acc:
                    acc[k][0] += c
                else:
                    acc[k] = [c, m]
                    order.append(k)
        terms = tuple((acc[k][0], acc[k][1]) for k in sorted(order) if acc[k][0] != 0)
        return self._expr(const, terms)

    def addn(self, xs: list[Expr]) -> Expr:
        out = self.zero
        for x in xs:
            out = self.add(out, x)
        return out

    def neg(self, x: Expr) -> Expr:
        return self.scale(x, -ONE)

    def sub(self, x: Expr, y: Expr) -> Expr:
        return self.add(x, self.neg(y))

    def scale(self, x: Expr, c: Fraction) -> Expr:
        c = Fraction(c)
        if c == 0:
            return self.zero
        if c == 1:
            return x
        return self._expr(x.const * c, tuple((tc * c, m) for tc, m in x.terms))

    def _mul_monos(self, m1: Mono, m2: Mono) -> Mono:
        pw: dict[int, list] = {}
        for a, p in m1 + m2:
            if a.uid in pw:
                pw[a.uid][1] += p
            else:
                pw[a.uid] = [a, p]
        return tuple((a, p) for _, (a, p) in sorted(pw.items()))

    def _box(self, x: Expr) -> Mono:
        a = self._atom("box", x, has_uf=x.has_uf)
        return ((a, 1),)

    def mul(self, x: Expr, y: Expr) -> Expr:
        if x.is_zero or y.is_zero:
            return self.zero
        if x.is_const:
            return self.scale(y, x.const)
        if y.is_const:
            return self.scale(x, y.const)
        if not x.is_mono and y.is_mono:
            x, y = y, x
        if x.is_mono:
            (xc, xm), = x.terms
            # distribute the monomial across y's terms (still linear)
            acc: dict[tuple, list] = {}
            if y.const != 0:
                acc[_mono_key(xm)] = [xc * y.const, xm]
            for yc, ym in y.terms:
                m = self._mul_monos(xm, ym)
                k = _mono_key(m)
                if k in acc:
                    acc[k][0] += xc * yc
                else:
                    acc[k] = [xc * yc, m]
            terms = tuple((v[0], v[1]) for k, v in sorted(acc.items()) if v[0] != 0)
            return self._expr(ZERO, terms)
        # sum * sum: box both factors, no distribution
        m = self._mul_monos(self._box(x), self._box(y))
        return self._expr(ZERO, ((ONE, m),))

    def muln(self, xs: list[Expr]) -> Expr:
        out = self.one
        for x in xs:
            out = self.mul(out, x)
        return out

    def powi(self, x: Expr, n: int) -> Expr:
        if n == 0:
            return self.one
        out = x
        for _ in range(n - 1):
            out = self.mul(out, x)
        return out

    @staticmethod
    def _lead(x: Expr) -> Fraction:
        if x.const != 0:
            return x.const
        return x.terms[0][0]

    def div(self, num: Expr, den: Expr) -> Expr:
        if den.is_const:
            if den.const == 0:
                raise ZeroDivisionError("division by constant zero in symbolic execution")
            return self.scale(num, ONE / den.const)
        if num.is_zero:
            return self.zero
        cn, cd = self._lead(num), self._lead(den)
        num_n = self.scale(num, ONE / cn)
        den_n = self.scale(den, ONE / cd)
        a = self._atom("quot", num_n, den_n, has_uf=num_n.has_uf or den_n.has_uf)
        return self._expr(ZERO, ((cn / cd, ((a, 1),)),))


def collect_vars(exprs: list[Expr]) -> list[str]:
    """All Var names reachable from the given expressions, sorted."""
    seen_e: set[int] = set()
    seen_a: set[int] = set()
    names: set[str] = set()

    def walk_e(e: Expr):
        if e.uid in seen_e:
            return
        seen_e.add(e.uid)
        for _, m in e.terms:
            for a, _ in m:
                walk_a(a)

    def walk_a(a: Atom):
        if a.uid in seen_a:
            return
        seen_a.add(a.uid)
        if a.tag == "var":
            names.add(a.a)
        elif a.tag == "app":
            walk_e(a.b)
        elif a.tag == "quot":
            walk_e(a.a)
            walk_e(a.b)
        else:
            walk_e(a.a)

    for e in exprs:
        walk_e(e)
    return sorted(names)


def collect_uf_fns(exprs: list[Expr]) -> list[str]:
    """Names of uninterpreted functions appearing in the expressions."""
    seen_e: set[int] = set()
    seen_a: set[int] = set()
    fns: set[str] = set()

    def walk_e(e: Expr):
        if e.uid in seen_e or not e.has_uf:
            return
        seen_e.add(e.uid)
        for _, m in e.terms:
            for a, _ in m:
                walk_a(a)

    def walk_a(a: Atom):
        if a.uid in seen_a or not a.has_uf:
            return
        seen_a.add(a.uid)
        if a.tag == "app":
            fns.add(a.a)
            walk_e(a.b)
        elif a.tag == "quot":
            walk_e(a.a)
            walk_e(a.b)
        elif a.tag == "box":
            walk_e(a.a)

    for e in exprs:
        walk_e(e)
    return sorted(fns)


def eval_expr(e: Expr, env: dict[str, Fraction], uf: Callable[[str, Fraction], Fraction],
              _memo: dict[int, Fraction] | None = None) -> Fraction:
    """Exact evaluation under a variable assignment.

    `uf` supplies values for uninterpreted applications; division by zero
    raises ZeroDivisionError (callers treat that as a rejected sample).
    """
    memo = _memo if _memo is not None else {}

    def ev_e(x: Expr) -> Fraction:
        got = memo.get(x.uid)
        if got is not None:
            return got
        acc = x.const
        for c, m in x.terms:
            v = c
            for a, p in m:
                v *= ev_a(a) ** p
            acc += v
        memo[x.uid] = acc
        return acc

    def ev_a(a: Atom) -> Fraction:
        got = memo.get(-a.uid - 1)
        if got is not None:
            return got
        if a.tag == "var":
            v = env[a.a]
        elif a.tag == "app":
            v = uf(a.a, ev_e(a.b))
        elif a.tag == "quot":
            den = ev_e(a.b)
            if den == 0:
                raise ZeroDivisionError(f"quot denominator zero: {a.b!r}")
            v = ev_e(a.a) / den
        else:
            v = ev_e(a.a)
        memo[-a.uid - 1] = v
        return v

    return ev_e(e)


@dataclass
class SideCondition:
    expr: Expr
    positive: bool  # True: expr > 0, False: expr != 0


class ExecContext:
    """Carries side conditions and microstate during symbolic execution."""

    def __init__(self, alg: Algebra):
        self.alg = alg
        self.conds: list[SideCondition] = []
        self._seen: set[tuple[int, bool]] = set()

    def require_nonzero(self, e: Expr, positive: bool = False):
        if e.is_const:
            if e.const == 0 or (positive and e.const <= 0):
                raise ZeroDivisionError("constant denominator violates side condition")
            return
        key = (e.uid, positive)
        if key not in self._seen:
            self._seen.add(key)
            self.conds.append(SideCondition(e, positive))
