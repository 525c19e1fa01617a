"""Tiny integer term language for shape-reduction constraints.

Terms are nested tuples:  ("c", n) | ("v", name) | ("+", (t, ...)) | ("*", (t, ...))
Constraints are ("eq"|"le"|"ge", lhs, rhs). Both are hashable and JSON-free;
rendering to SMT-LIB and concrete evaluation live here so the emitter and the
post-solve re-checker cannot drift apart.
"""

from __future__ import annotations

Term = tuple
Constraint = tuple


def cint(n: int) -> Term:
    return ("c", int(n))


def var(name: str) -> Term:
    return ("v", name)


def tsum(parts: list[Term]) -> Term:
    flat: list[Term] = []
    c = 0
    for p in parts:
        if p[0] == "c":
            c += p[1]
        elif p[0] == "+":
            flat.extend(p[1])
        else:
            flat.append(p)
    if c:
        flat.append(cint(c))
    if not flat:
        return cint(0)
    if len(flat) == 1:
        return flat[0]
    return ("+", tuple(flat))


def tprod(parts: list[Term]) -> Term:
    flat: list[Term] = []
    c = 1
    for p in parts:
        if p[0] == "c":
            c *= p[1]
        elif p[0] == "*":
            flat.extend(p[1])
        else:
            flat.append(p)
    if c == 0:
        return cint(0)
    if c != 1:
        flat.insert(0, cint(c))
    if not flat:
        return cint(1)
    if len(flat) == 1:
        return flat[0]
    return ("*", tuple(flat))


def term_vars(t: Term, out: set[str]):
    if t[0] == "v":
        out.add(t[1])
    elif t[0] in ("+", "*"):
        for p in t[1]:
            term_vars(p, out)


def eval_term(t: Term, env: dict[str, int]) -> int:
    if t[0] == "c":
        return t[1]
    if t[0] == "v":
        return env[t[1]]
    if t[0] == "+":
        return sum(eval_term(p, env) for p in t[1])
    acc = 1
    for p in t[1]:
        acc *= eval_term(p, env)
    return acc


def check_constraint(c: Constraint, env: dict[str, int]) -> bool:
    op, a, b = c
    va, vb = eval_term(a, env), eval_term(b, env)
    if op == "eq":
        return va == vb
    if op == "le":
        return va <= vb
    if op == "ge":
        return va >= vb
    raise ValueError(f"bad constraint op {op!r}")


def term_to_smt(t: Term) -> str:
    if t[0] == "c":
        n = t[1]
        return str(n) if n >= 0 else f"(- {-n})"
    if t[0] == "v":
        return f"|{t[1]}|"  # names carry dots and brackets, so always quote
    op = "+" if t[0] == "+" else "*"
    return "(" + op + " " + " ".join(term_to_smt(p) for p in t[1]) + ")"


def constraint_to_smt(c: Constraint) -> str:
    op, a, b = c
    sym = {"eq": "=", "le": "<=", "ge": ">="}[op]
    return f"({sym} {term_to_smt(a)} {term_to_smt(b)})"


def render_constraint(c: Constraint) -> str:
    op, a, b = c
    sym = {"eq": "==", "le": "<=", "ge": ">="}[op]

    def r(t: Term) -> str:
        if t[0] == "c":
            return str(t[1])
        if t[0] == "v":
            return t[1]
        j = " + " if t[0] == "+" else "*"
        return "(" + j.join(r(p) for p in t[1]) + ")"

    return f"{r(a)} {sym} {r(b)}"


class DimContext:
    """Collects variables and constraints during the reduction walk."""

    def __init__(self):
        self.vars: dict[str, int] = {}  # name -> upper bound (full-scale value)
        self.order: list[str] = []
        self.constraints: list[Constraint] = []
        self.origin: list[str] = []  # parallel to constraints, for witnesses
        self._fresh = 0

    def declare(self, name: str, orig: int) -> Term:
        if orig == 1:
            return cint(1)
        if name not in self.vars:
            self.vars[name] = orig
            self.order.append(name)
        else:
            self.vars[name] = max(self.vars[name], orig)
        return var(name)

    def fresh(self, base: str, orig: int) -> Term:
        if orig == 1:
            return cint(1)
        self._fresh += 1
        return self.declare(f"f{self._fresh}.{base}", orig)

    def emit(self, c: Constraint, origin: str):
        # drop tautologies on constants to keep the system small
        op, a, b = c
        if a[0] == "c" and b[0] == "c":
            if not check_constraint(c, {}):
                # keep impossible constant constraints: they are the witness
                self.constraints.append(c)
                self.origin.append(origin)
            return
        if op == "eq" and a == b:
            return
        if op == "ge" and b == ("c", 1):
            return  # all dims are >= 1 by declaration
        self.constraints.append(c)
        self.origin.append(origin)

    def eq(self, a: Term, b: Term, origin: str):
        self.emit(("eq", a, b), origin)

    def ge(self, a: Term, b: Term, origin: str):
        self.emit(("ge", a, b), origin)

    def le(self, a: Term, b: Term, origin: str):
        self.emit(("le", a, b), origin)
