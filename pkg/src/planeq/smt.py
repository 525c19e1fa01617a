"""SMT-LIB 2 client: one solver child process per session.

The session speaks a small command subset (declare/define/assert/push/pop/
check-sat/get-value) over pipes, so any conforming binary works. Discovery
order: explicit argv, the PLANEQ_SOLVER environment variable, z3 or cvc5 on
PATH, then the bundled fallback engine run as a module of this package.

Symbolic expressions from the element algebra are emitted as a DAG: every
composite atom (uninterpreted application, quotient, boxed sum) becomes a
define-fun alias the first time it is seen, so shared subterms stay shared
in the solver input. Aliases and declarations are tracked per push level and
forgotten on pop, mirroring the solver's own scoping.
"""

from __future__ import annotations

import os
import queue
import shlex
import shutil
import subprocess
import sys
import threading
from fractions import Fraction

from .dims import Constraint, constraint_to_smt
from .errors import SolverProtocolError, SolverUnavailable
from .sym import Expr

_BAD_SYM = ("|", "\\")


def smt_sym(name: str) -> str:
    for ch in _BAD_SYM:
        if ch in name:
            raise SolverProtocolError(f"name {name!r} cannot be an SMT symbol")
    return f"|{name}|"


def rat_smt(q: Fraction, real: bool = True) -> str:
    """Render a rational as a nonnegative-literal SMT term."""
    neg = q < 0
    q = -q if neg else q
    if q.denominator == 1:
        body = f"{q.numerator}.0" if real else str(q.numerator)
    else:
        body = f"(/ {q.numerator}.0 {q.denominator}.0)" if real \
            else f"(/ {q.numerator} {q.denominator})"
    return f"(- {body})" if neg else body


def find_solver(argv: list[str] | None = None) -> list[str]:
    if argv:
        return list(argv)
    env = os.environ.get("PLANEQ_SOLVER")
    if env:
        return shlex.split(env)
    for binary, extra in (("z3", ["-in"]), ("cvc5", ["--incremental", "--produce-models"])):
        path = shutil.which(binary)
        if path:
            return [path] + extra
    return [sys.executable, "-m", "planeq.smtsolver"]


# -- s-expression reading for get-value responses -------------------------------


def _tokens(text: str):
    i, n = 0, len(text)
    while i < n:
        ch = text[i]
        if ch.isspace():
            i += 1
        elif ch in "()":
            yield ch
            i += 1
        elif ch == "|":
            j = text.index("|", i + 1)
            yield text[i:j + 1]
            i = j + 1
        else:
            j = i
            while j < n and not text[j].isspace() and text[j] not in "()":
                j += 1
            yield text[i:j]
            i = j


def parse_sexpr(text: str):
    stack: list[list] = [[]]
    for tok in _tokens(text):
        if tok == "(":
            stack.append([])
        elif tok == ")":
            done = stack.pop()
            if not stack:
                raise SolverProtocolError(f"unbalanced s-expr: {text!r}")
            stack[-1].append(done)
        else:
            stack[-1].append(tok)
    if len(stack) != 1 or len(stack[0]) != 1:
        raise SolverProtocolError(f"expected one s-expr, got {text!r}")
    return stack[0][0]


def sexpr_fraction(v) -> Fraction:
    """Numeric model value to an exact rational."""
    if isinstance(v, str):
        if "." in v:
            whole, _, frac = v.partition(".")
            sign = -1 if whole.startswith("-") else 1
            whole = whole.lstrip("-")
            base = Fraction(int(whole or 0)) + Fraction(int(frac or 0), 10 ** len(frac))
            return sign * base
        return Fraction(int(v))
    if isinstance(v, list) and v:
        if v[0] == "-" and len(v) == 2:
            return -sexpr_fraction(v[1])
        if v[0] == "/" and len(v) == 3:
            return sexpr_fraction(v[1]) / sexpr_fraction(v[2])
    raise SolverProtocolError(f"cannot read model value {v!r}")


def _render_sexpr(v) -> str:
    if isinstance(v, str):
        return v
    return "(" + " ".join(_render_sexpr(x) for x in v) + ")"


# -- session --------------------------------------------------------------------


class SolverSession:
    """Incremental session against one solver child process."""

    def __init__(self, argv: list[str] | None = None, log=None):
        self.argv = find_solver(argv)
        self.log = log
        self.dead = False
        env = None
        if "planeq.smtsolver" in self.argv:
            # bundled engine: make this package importable in the child even
            # when running from an uninstalled source tree
            pkg_parent = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
            env = dict(os.environ)
            env["PYTHONPATH"] = pkg_parent + os.pathsep + env.get("PYTHONPATH", "")
        try:
            self.proc = subprocess.Popen(
                self.argv, stdin=subprocess.PIPE, stdout=subprocess.PIPE,
                stderr=subprocess.DEVNULL, text=True, bufsize=1, env=env)
        except OSError as e:
            raise SolverUnavailable(f"cannot start solver {self.argv}: {e}")
        self._q: queue.Queue = queue.Queue()
        self._reader = threading.Thread(target=self._pump, daemon=True)
        self._reader.start()
        # scope bookkeeping: what was declared or defined at each level
        self._live: dict = {}          # key -> emitted symbol or True
        self._level_keys: list[list] = [[]]
        self._aux = 0
        self.send("(set-option :produce-models true)")

    # -- plumbing ---------------------------------------------------------

    def _pump(self):
        assert self.proc.stdout is not None
        for line in self.proc.stdout:
            self._q.put(line.rstrip("\n"))
        self._q.put(None)

    def send(self, line: str):
        if self.dead:
            raise SolverProtocolError("solver session is dead")
        if self.log is not None:
            self.log.write(line + "\n")
        try:
            assert self.proc.stdin is not None
            self.proc.stdin.write(line + "\n")
            self.proc.stdin.flush()
        except (BrokenPipeError, OSError) as e:
            self.dead = True
            raise SolverProtocolError(f"solver pipe closed: {e}")

    def _read_line(self, timeout_s: float | None) -> str | None:
        try:
            return self._q.get(timeout=timeout_s)
        except queue.Empty:
            return "__timeout__"

    def close(self):
        if self.proc.poll() is None:
            try:
                self.send("(exit)")
            except SolverProtocolError:
                pass
            try:
                self.proc.wait(timeout=2)
            except subprocess.TimeoutExpired:
                self.proc.kill()
        self.dead = True

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    # -- scoping ----------------------------------------------------------

    def push(self):
        self.send("(push 1)")
        self._level_keys.append([])

    def pop(self):
        if len(self._level_keys) <= 1:
            raise SolverProtocolError("pop below level 0")
        self.send("(pop 1)")
        for key in self._level_keys.pop():
            self._live.pop(key, None)

    def _remember(self, key, value=True):
        self._live[key] = value
        self._level_keys[-1].append(key)

    # -- declarations -----------------------------------------------------

    def declare_int(self, name: str, lo: int, hi: int):
        key = ("v", name)
        if key in self._live:
            return
        s = smt_sym(name)
        self.send(f"(declare-const {s} Int)")
        self.send(f"(assert (<= {lo} {s}))")
        self.send(f"(assert (<= {s} {hi}))")
        self._remember(key, s)

    def declare_real(self, name: str):
        key = ("v", name)
        if key in self._live:
            return
        s = smt_sym(name)
        self.send(f"(declare-const {s} Real)")
        self._remember(key, s)

    def declare_uf(self, fn: str):
        key = ("uf", fn)
        if key in self._live:
            return
        self.send(f"(declare-fun {fn} (Real) Real)")
        self._remember(key, fn)

    # -- raw asserts ------------------------------------------------------

    def assert_smt(self, formula: str):
        self.send(f"(assert {formula})")

    def assert_constraint(self, c: Constraint):
        self.assert_smt(constraint_to_smt(c))

    # -- element algebra emission ------------------------------------------

    def _atom_sym(self, atom) -> str:
        key = ("a", atom.uid)
        got = self._live.get(key)
        if got is not None:
            return got
        if atom.tag == "var":
            self.declare_real(atom.a)
            sym = smt_sym(atom.a)
            self._remember(key, sym)
            return sym
        if atom.tag == "app":
            self.declare_uf(atom.a)
            body = f"({atom.a} {self.emit_expr(atom.b)})"
        elif atom.tag == "quot":
            num = self.emit_expr(atom.a)
            den = self.emit_expr(atom.b)
            body = f"(/ {num} {den})"
        else:  # box
            body = self.emit_expr(atom.a)
        self._aux += 1
        sym = smt_sym(f".t{self._aux}")
        self.send(f"(define-fun {sym} () Real {body})")
        if atom.tag == "quot":
            # equivalence is claimed only where the plan's divisions are defined
            self.assert_smt(f"(not (= {self.emit_expr(atom.b)} 0.0))")
        self._remember(key, sym)
        return sym

    def emit_expr(self, e: Expr) -> str:
        key = ("e", e.uid)
        got = self._live.get(key)
        if got is not None:
            return got
        parts = []
        if e.const != 0 or not e.terms:
            parts.append(rat_smt(e.const))
        for coeff, mono in e.terms:
            factors = []
            if coeff != 1 or not mono:
                factors.append(rat_smt(coeff))
            for atom, k in mono:
                factors.extend([self._atom_sym(atom)] * k)
            parts.append(factors[0] if len(factors) == 1 else
                         "(* " + " ".join(factors) + ")")
        out = parts[0] if len(parts) == 1 else "(+ " + " ".join(parts) + ")"
        self._remember(key, out)
        return out

    def assert_any_diff(self, pairs: list[tuple[Expr, Expr]]):
        """Assert that at least one lhs/rhs pair differs."""
        lits = [f"(not (= {self.emit_expr(a)} {self.emit_expr(b)}))"
                for a, b in pairs]
        self.assert_smt(lits[0] if len(lits) == 1 else
                        "(or " + " ".join(lits) + ")")

    # -- solving ----------------------------------------------------------

    def check(self, timeout_s: float | None = None) -> str:
        self.send("(check-sat)")
        while True:
            line = self._read_line(timeout_s)
            if line == "__timeout__":
                self.dead = True
                self.proc.kill()
                return "unknown"
            if line is None:
                self.dead = True
                raise SolverProtocolError("solver exited during check-sat")
            line = line.strip()
            if line in ("sat", "unsat", "unknown"):
                return line
            if line.startswith("(error"):
                self.dead = True
                raise SolverProtocolError(f"solver error: {line}")
            # ignore any other chatter

    def values(self, terms: list[str], timeout_s: float | None = 30.0) -> dict[str, Fraction]:
        """Model values for already-emitted terms, keyed by the given strings."""
        if not terms:
            return {}
        self.send("(get-value (" + " ".join(terms) + "))")
        buf, depth, started = [], 0, False
        while True:
            line = self._read_line(timeout_s)
            if line == "__timeout__" or line is None:
                self.dead = True
                raise SolverProtocolError("solver did not answer get-value")
            if line.strip().startswith("(error"):
                self.dead = True
                raise SolverProtocolError(f"solver error: {line.strip()}")
            buf.append(line)
            depth += line.count("(") - line.count(")")
            started = started or "(" in line
            if started and depth == 0:
                break
        parsed = parse_sexpr("\n".join(buf))
        if not isinstance(parsed, list) or len(parsed) != len(terms):
            raise SolverProtocolError(f"malformed get-value answer: {buf!r}")
        out: dict[str, Fraction] = {}
        for term, pair in zip(terms, parsed):
            if not isinstance(pair, list) or len(pair) != 2:
                raise SolverProtocolError(f"malformed value pair {pair!r}")
            out[term] = sexpr_fraction(pair[1])
        return out

    def int_values(self, names: list[str]) -> dict[str, int]:
        vals = self.values([smt_sym(n) for n in names])
        out = {}
        for n in names:
            q = vals[smt_sym(n)]
            if q.denominator != 1:
                raise SolverProtocolError(f"non-integer model for {n}: {q}")
            out[n] = q.numerator
        return out
