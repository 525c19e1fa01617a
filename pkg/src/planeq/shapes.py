"""Plan shrinking: find the smallest plan with the same verification verdict.

Every tensor dimension becomes an integer unknown. Walking both graphs emits
the structural constraints each operator needs (contraction agreement, view
volume factorization, fold nondegeneracy, mask size, vocab capacity), and the
lineage ties the two graphs together: for each checkpointed tensor, the
distinct shard range endpoints along an axis cut it into pieces, each piece a
shared variable, so a logical dimension is the sum of its pieces and every
shard keeps the sub-sum it spans. Overlaps and gaps between shard ranges
survive the mapping, which lets a later stage refute a bad slicing on the
small plan instead of erroring out here.

The solver then minimizes the assignment (L1 by default, a balanced variant
behind --objective volume) and the result is lexicographically pinned so a
given plan always reduces to the same small plan. The full-scale sizes are a
known-feasible fallback: if the solver stalls, reduction degrades gracefully
instead of failing. Every model is re-checked against the emitted system by
direct evaluation, and the rebuilt small plan is revalidated concretely, so a
wrong solver answer cannot corrupt a verdict.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

from .dims import DimContext, Term, check_constraint, cint, eval_term, render_constraint, tsum
from .errors import InfeasibleShapes, PlanEqError, ShapeError, SolverProtocolError
from .graph import Graph, LineageEntry, entry_tiles_exactly, topo_sort
from .ops import get_op, infer_node_shapes
from .plan import Plan, plan_from_dict, plan_to_dict
from .smt import SolverSession, smt_sym


def validate_concrete(graph: Graph) -> None:
    """Re-derive every node's output shapes and compare with declarations."""
    for node in topo_sort(graph):
        ins = [graph.shape(t) for t in node.inputs]
        outs = infer_node_shapes(node, ins)
        for tid, got in zip(node.outputs, outs):
            want = graph.shape(tid)
            if tuple(got) != tuple(want):
                raise ShapeError(
                    f"{node.kind} {node.id}: declares {list(want)} for {tid} "
                    f"but computes {list(got)}")


@dataclass
class Reduction:
    env: dict[str, int]
    plan: Plan
    report: dict = field(default_factory=dict)


class _EntryGrid:
    """Per-axis endpoint grid of one lineage entry, with piece variables."""

    def __init__(self, tid: str, entry: LineageEntry, shape: tuple, C: DimContext):
        self.tid = tid
        self.points: list[list[int]] = []
        self.pieces: list[list[Term]] = []
        for a, d in enumerate(shape):
            pts = {0, d}
            for rs in entry.groups():
                if len(rs) != len(shape):
                    raise ShapeError(f"lineage {tid}: shard rank != tensor rank")
                lo, hi = rs[a]
                pts.add(max(0, min(lo, d)))
                pts.add(max(0, min(hi, d)))
            srt = sorted(pts)
            self.points.append(srt)
            self.pieces.append([
                C.declare(f"p.{tid}.{a}.{i}", srt[i + 1] - srt[i])
                for i in range(len(srt) - 1)])

    def dim(self, a: int) -> Term:
        return tsum(list(self.pieces[a]))

    def dims(self) -> list[Term]:
        return [self.dim(a) for a in range(len(self.pieces))]

    def span(self, a: int, lo: int, hi: int) -> Term:
        il = self.points[a].index(lo)
        ih = self.points[a].index(hi)
        return tsum(self.pieces[a][il:ih])

    def reduced_range(self, a: int, lo: int, hi: int, env: dict[str, int]) -> tuple[int, int]:
        il = self.points[a].index(lo)
        ih = self.points[a].index(hi)
        cum = [0]
        for p in self.pieces[a]:
            cum.append(cum[-1] + eval_term(p, env))
        return (cum[il], cum[ih])


class _Reducer:
    def __init__(self, plan: Plan):
        if plan.parallel is None or plan.lineage is None:
            raise PlanEqError("reduction needs a parallel graph and lineage")
        self.plan = plan
        self.C = DimContext()
        self.grids: dict[str, _EntryGrid] = {}
        self.dims: dict[tuple[str, str], list[Term]] = {}  # (graph tag, tid) -> terms
        self.misaligned: list[str] = []
        self.vocab_of_ids: dict[str, Term] = {}  # int ids tensor -> table rows term

    # -- constraint system ---------------------------------------------------

    def build(self):
        plan, C = self.plan, self.C
        for tid, entry in plan.lineage.items():
            shape = plan.logical.shape(tid)
            self.grids[tid] = _EntryGrid(tid, entry, shape, C)
            if not entry_tiles_exactly(entry, shape):
                self.misaligned.append(tid)
        self._walk("L", plan.logical)
        self._walk("P", plan.parallel)
        # tie every shard copy's dims to the piece sums its ranges span
        for tid, entry in plan.lineage.items():
            grid = self.grids[tid]
            for s in entry.shards:
                terms = self.dims.get(("P", s.tensor))
                if terms is None:
                    continue  # validate_lineage reports unknown shard tensors
                if len(s.ranges) != len(terms):
                    raise ShapeError(f"lineage {tid}: shard {s.tensor} rank mismatch")
                for a, (lo, hi) in enumerate(s.ranges):
                    C.eq(terms[a], grid.span(a, lo, hi), f"{tid}:shard-span:{s.tensor}")

    def _walk(self, tag: str, graph: Graph):
        C = self.C
        for tid in graph.inputs:
            t = graph.tensors[tid]
            src = t.meta.get("from", tid) if tag == "P" else tid
            terms = self._input_terms(tag, tid, src, t.shape)
            self.dims[(tag, tid)] = terms
        for node in topo_sort(graph):
            ins = [self.dims[(tag, t)] for t in node.inputs]
            fins = [graph.shape(t) for t in node.inputs]
            fouts = [graph.shape(t) for t in node.outputs]
            outs = get_op(node.kind).reduce_dims(node, ins, C, fins, fouts)
            if node.kind in ("embedding", "embedding_grad"):
                ids_tid = node.inputs[1]
                vterm = ins[0][0] if node.kind == "embedding" else outs[0][0]
                self.vocab_of_ids.setdefault(ids_tid, vterm)
            for tid, terms in zip(node.outputs, outs):
                self.dims[(tag, tid)] = terms
                if tag == "L" and tid in self.grids and tid not in graph.inputs:
                    # interior checkpoint: propagated dims must match the grid
                    for a, term in enumerate(terms):
                        C.eq(term, self.grids[tid].dim(a), f"{tid}:lineage-dim")

    def _input_terms(self, tag: str, tid: str, src: str, shape: tuple) -> list[Term]:
        grid = self.grids.get(src)
        if grid is not None and tag == "L":
            return grid.dims()
        if grid is not None and tag == "P":
            entry = self.plan.lineage[src]
            for s in entry.shards:
                if s.tensor == tid:
                    return [grid.span(a, lo, hi) for a, (lo, hi) in enumerate(s.ranges)]
        return [self.C.declare(f"d.{tag}.{tid}.{a}", d) for a, d in enumerate(shape)]

    # -- solving ---------------------------------------------------------------

    def full_env(self) -> dict[str, int]:
        return dict(self.C.vars)

    def solve(self, objective: str, argv: list[str] | None,
              timeout_s: float) -> tuple[dict[str, int], dict]:
        C = self.C
        full = self.full_env()
        bad = [f"{render_constraint(c)}   [{o}]"
               for c, o in zip(C.constraints, C.origin)
               if not check_constraint(c, full)]
        if bad:
            raise InfeasibleShapes(
                "shape constraints are unsatisfiable at full scale", witness=bad)
        names = list(C.order)
        if not names:
            return full, {"checks": 0, "solver_status": "trivial"}
        stats = {"checks": 0, "solver_status": "ok"}
        best = dict(full)
        deadline = time.monotonic() + timeout_s

        def remaining() -> float:
            return max(0.5, deadline - time.monotonic())

        class _Stop(Exception):
            pass

        with SolverSession(argv) as s:

            def probe_grab(formula: str) -> str:
                """Check under formula, keeping the model on sat.

                Unknown or a dead session aborts minimization; the best model
                so far (full scale at worst) stays valid.
                """
                nonlocal best
                stats["checks"] += 1
                try:
                    s.push()
                    s.assert_smt(formula)
                    r = s.check(remaining())
                    if r == "sat":
                        best = s.int_values(names)
                except SolverProtocolError:
                    stats["solver_status"] = "partial"
                    raise _Stop()
                if r == "unknown":
                    stats["solver_status"] = "partial"
                    if s.dead:
                        raise _Stop()
                s.pop()
                return r

            try:
                for n in names:
                    s.declare_int(n, 1, C.vars[n])
                for c in C.constraints:
                    s.assert_constraint(c)

                syms = " ".join(smt_sym(n) for n in names)
                if objective == "volume":
                    # squeeze the largest dimension first, then total under it
                    lo, hi = 1, max(best.values())
                    while lo < hi and time.monotonic() < deadline:
                        mid = (lo + hi) // 2
                        cap = " ".join(f"(<= {smt_sym(n)} {mid})" for n in names)
                        r = probe_grab(f"(and {cap})")
                        if r == "sat":
                            hi = max(best.values())
                        elif r == "unsat":
                            lo = mid + 1
                        else:
                            break
                    cap = " ".join(f"(<= {smt_sym(n)} {max(best.values())})"
                                   for n in names)
                    s.assert_smt(f"(and {cap})")

                lo, hi = len(names), sum(best.values())
                while lo < hi and time.monotonic() < deadline:
                    mid = (lo + hi) // 2
                    r = probe_grab(f"(<= (+ {syms}) {mid})")
                    if r == "sat":
                        hi = sum(best.values())
                    elif r == "unsat":
                        lo = mid + 1
                    else:
                        break
                s.assert_smt(f"(<= (+ {syms}) {sum(best.values())})")

                # lexicographic pinning: minimize each var still above 1 and fix
                # it; the total cap then forces every remaining var to 1, so the
                # model is unique and the reduced plan deterministic
                for n in names:
                    if time.monotonic() > deadline:
                        stats["solver_status"] = "partial"
                        break
                    if best[n] <= 1:
                        continue
                    lo, hi = 1, best[n]
                    while lo < hi:
                        mid = (lo + hi) // 2
                        r = probe_grab(f"(<= {smt_sym(n)} {mid})")
                        if r == "sat":
                            hi = best[n]
                        elif r == "unsat":
                            lo = mid + 1
                        else:
                            break
                    s.assert_smt(f"(= {smt_sym(n)} {best[n]})")
            except _Stop:
                pass

        for c, o in zip(C.constraints, C.origin):
            if not check_constraint(c, best):
                raise SolverProtocolError(
                    f"solver model violates {render_constraint(c)} [{o}]")
        return best, stats

    # -- plan rebuild ------------------------------------------------------------

    def rebuild(self, env: dict[str, int]) -> Plan:
        d = plan_to_dict(self.plan)
        for tag, gd in (("L", d["logical"]), ("P", d["parallel"])):
            shapes = {}
            for td in gd["tensors"]:
                terms = self.dims[(tag, td["id"])]
                shape = [eval_term(t, env) for t in terms]
                shapes[td["id"]] = shape
                td["shape"] = shape
                if td["meta"].get("vocab") is not None:
                    vt = self.vocab_of_ids.get(td["id"])
                    if vt is not None:
                        td["meta"] = dict(td["meta"], vocab=eval_term(vt, env))
            for nd in gd["nodes"]:
                kind, attrs = nd["kind"], nd["attrs"]
                if kind in ("view", "expand", "full"):
                    attrs["shape"] = list(shapes[nd["outputs"][0]])
                elif kind == "create_mask":
                    attrs["size"] = shapes[nd["outputs"][0]][0]
                elif kind == "embedding_grad":
                    attrs["vocab"] = shapes[nd["outputs"][0]][0]
        for ed in d["lineage"]:
            grid = self.grids[ed["logical"]]
            for sd in ed["shards"]:
                sd["ranges"] = [
                    list(grid.reduced_range(a, lo, hi, env))
                    for a, (lo, hi) in enumerate(sd["ranges"])]
        d["provenance"] = dict(d.get("provenance") or {})
        d["provenance"]["reduced_from"] = {
            tid: list(self.plan.logical.shape(tid)) for tid in self.plan.lineage}
        return plan_from_dict(d)


def reduce_plan(plan: Plan, objective: str = "l1",
                solver_argv: list[str] | None = None,
                timeout_s: float = 120.0) -> Reduction:
    """Shrink a plan to its minimal shape assignment; verdict-preserving."""
    t0 = time.monotonic()
    validate_concrete(plan.logical)
    validate_concrete(plan.parallel)
    red = _Reducer(plan)
    red.build()
    env, stats = red.solve(objective, solver_argv, timeout_s)
    small = red.rebuild(env)
    validate_concrete(small.logical)
    validate_concrete(small.parallel)
    report = {
        "objective": objective,
        "vars": len(red.C.order),
        "constraints": len(red.C.constraints),
        "misaligned": sorted(red.misaligned),
        "orig_total": sum(red.full_env().values()),
        "reduced_total": sum(env.get(n, 1) for n in red.C.order),
        "wall_s": round(time.monotonic() - t0, 3),
        **stats,
    }
    return Reduction(env=env, plan=small, report=report)
