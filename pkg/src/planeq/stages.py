"""Stage construction and discharge for the equivalence proof.

The lineage cuts both graphs at checkpointed tensors. Every checkpointed
tensor with a producer becomes one stage, processed in logical topological
order. A stage assumes the claimed logical/shard relation for every earlier
checkpoint and proves the relation claimed for its own target: both graphs
are re-executed symbolically from the interface values, and the target's
claim turns into per-element equalities.

Assumptions are baked into how stage inputs are built, never asserted:

* full entries: every shard aliases the logical element expressions it
  claims to equal, so agreement upstream is structural;
* partial entries: all members of a replica group but one get fresh
  unknowns and the last is defined as the logical element minus the others,
  which makes the group sum collapse to the logical value by construction;
* integer tensors (token ids) are pinned to a canonical enumeration where
  every position holds a distinct value, so a wrong slice or gather shows
  up as a concrete index mismatch.

Real-valued interface elements are free variables, so a stage proves
functional equality over the whole interface domain (restricted by the
definedness side conditions recorded during execution), independent of what
upstream stages actually compute.

Most obligations close by hash-consing: both sides intern to the same
expression object. Survivors go to the solver as one batched disjunction of
disequalities; unsat proves the stage. A sat answer is only a candidate:
the model is replayed through both element expressions (exact rationals
when no transcendentals are involved, floating point otherwise) and the
stage is reported refuted only when the replay confirms a difference.
"""

from __future__ import annotations

import hashlib
import math
import time
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any

from .errors import GraphError, SolverProtocolError, SolverUnavailable, UnsupportedOperator
from .graph import (Graph, LineageEntry, Node, backward_slice, iter_box,
                    range_extents, ranges_volume, topo_sort)
from .ops import VTensor, sym_execute
from .plan import Plan
from .smt import SolverSession, smt_sym
from .sym import (EXP, RSQRT, SIGMOID, Algebra, ExecContext, Expr,
                  collect_vars, eval_expr)

REPLAY_TOL = 1e-6


@dataclass
class Stage:
    target: str
    logical_nodes: list[Node]
    parallel_nodes: list[Node]
    l_inputs: list[str]  # checkpoint tensors the logical slice starts from
    p_inputs: list[str]  # shard tensors the parallel slice starts from
    assumed: list[str]   # checkpoint entries whose relation this stage assumes
    owned_logical: list[str] = field(default_factory=list)
    owned_parallel: list[str] = field(default_factory=list)


@dataclass
class StageResult:
    target: str
    status: str  # proven | refuted | unknown
    obligations: int
    fastpath: int
    residual: int
    wall_s: float
    detail: dict[str, Any] | None = None
    note: str | None = None


def entry_order(plan: Plan) -> list[str]:
    """Checkpoint tensors ordered by producing-node position, inputs first."""
    pos = {n.id: i for i, n in enumerate(topo_sort(plan.logical))}
    prod = plan.logical.producer_map()

    def key(tid: str) -> tuple[int, str]:
        n = prod.get(tid)
        return (pos[n.id] if n is not None else -1, tid)

    return sorted(plan.lineage, key=key)


def build_stages(plan: Plan) -> tuple[list[Stage], dict[str, list[str]]]:
    """One stage per produced checkpoint, plus node-coverage bookkeeping.

    Each parallel (and logical) node is owned by the first stage whose slice
    contains it; nodes owned by no stage are returned for the caller to warn
    about or reject, since nothing constrains what they compute.
    """
    logical, parallel, lineage = plan.logical, plan.parallel, plan.lineage
    prod = logical.producer_map()
    order = entry_order(plan)
    rank = {tid: i for i, tid in enumerate(order)}
    shards_of = {tid: {s.tensor for s in e.shards} for tid, e in lineage.items()}

    stages: list[Stage] = []
    claimed_l: set[str] = set()
    claimed_p: set[str] = set()
    for tid in order:
        if tid not in prod:
            continue  # graph input: its relation is assumed, not claimed
        stop_l = {t for t in lineage if t != tid}
        lnodes, lbound = backward_slice(logical, [tid], stop_l)
        lnodes = topo_sort(logical, lnodes)
        for b in sorted(lbound):
            if b not in lineage:
                raise GraphError(
                    f"stage {tid}: logical input {b!r} has no checkpoint entry")
        # sound assumption scope: strictly earlier checkpoints only
        stop_p = {st for t in order if rank[t] < rank[tid] for st in shards_of[t]}
        roots_p = [s.tensor for s in lineage[tid].shards]
        pnodes, pbound = backward_slice(parallel, roots_p, stop_p)
        pnodes = topo_sort(parallel, pnodes)
        for b in sorted(pbound):
            if b not in stop_p:
                raise GraphError(
                    f"stage {tid}: parallel input {b!r} is not a checkpoint shard")
        owner = {st: t for t in reversed(order) for st in shards_of[t]}
        assumed = sorted(set(lbound) | {owner[b] for b in pbound}, key=rank.get)
        owned_l = sorted(n.id for n in lnodes if n.id not in claimed_l)
        claimed_l.update(owned_l)
        owned_p = sorted(n.id for n in pnodes if n.id not in claimed_p)
        claimed_p.update(owned_p)
        stages.append(Stage(tid, lnodes, pnodes, sorted(lbound), sorted(pbound),
                            assumed, owned_l, owned_p))
    uncovered = {
        "logical": sorted(n.id for n in logical.nodes if n.id not in claimed_l),
        "parallel": sorted(n.id for n in parallel.nodes if n.id not in claimed_p),
    }
    return stages, uncovered


# -- interface construction -------------------------------------------------


def _logical_box(tensor, alg: Algebra) -> VTensor:
    if tensor.dtype == "int":
        if tensor.meta.get("enum") != "position":
            raise UnsupportedOperator(
                f"integer checkpoint {tensor.id!r} has no enumerated values")
        return VTensor(tensor.shape, list(range(tensor.nelems())))
    data = [alg.var(f"v.{tensor.id}.{i}") for i in range(tensor.nelems())]
    return VTensor(tensor.shape, data)


def _materialize_entry(entry: LineageEntry, tensor, box: VTensor, alg: Algebra,
                       env: dict[str, VTensor]) -> None:
    """Bind every shard of an assumed checkpoint into the parallel env."""
    if entry.mode == "full":
        for s in entry.shards:
            env[s.tensor] = VTensor(range_extents(s.ranges),
                                    [box.at(g) for g in iter_box(s.ranges)])
        return
    if tensor.dtype == "int":
        raise UnsupportedOperator(
            f"partial checkpoint over integer tensor {tensor.id!r}")
    for ranges, members in sorted(entry.groups().items()):
        members = sorted(members, key=lambda s: s.tensor)
        ext = range_extents(ranges)
        frees = [[alg.var(f"ps.{s.tensor}.{i}") for i in range(ranges_volume(ranges))]
                 for s in members[:-1]]
        for s, data in zip(members, frees):
            env[s.tensor] = VTensor(ext, data)
        last = []
        for li, g in enumerate(iter_box(ranges)):
            rest = [d[li] for d in frees]
            last.append(alg.sub(box.at(g), alg.addn(rest)) if rest else box.at(g))
        env[members[-1].tensor] = VTensor(ext, last)


# -- discharge ---------------------------------------------------------------


def _real_uf(name: str, x):
    x = float(x)
    if name == EXP:
        return math.exp(x)
    if name == RSQRT:
        if x <= 0:
            raise ValueError("rsqrt of non-positive replay value")
        return 1.0 / math.sqrt(x)
    if name == SIGMOID:
        return 1.0 / (1.0 + math.exp(-x))
    raise ValueError(f"no concrete form for function {name!r}")


def _no_uf(name: str, x):
    raise ValueError(f"unexpected function {name!r} in rational replay")


def _witness(label: str, idx, lhs: Expr, rhs: Expr, lv, rv, env) -> dict[str, Any]:
    names = collect_vars([lhs, rhs])
    return {
        "shard": label,
        "index": list(idx),
        "lhs_value": str(lv),
        "rhs_value": str(rv),
        "assignment": {n: str(env.get(n, Fraction(0))) for n in names[:16]},
    }


def _conds_hold(conds, fenv) -> bool:
    for c in conds:
        try:
            v = eval_expr(c.expr, fenv, _real_uf)
        except (ZeroDivisionError, OverflowError, ValueError):
            return False
        if (v <= 1e-12) if c.positive else (abs(v) <= 1e-12):
            return False
    return True


def _confirm(pairs, env, conds, tag: str) -> tuple[str, dict[str, Any]]:
    """Replay a candidate model; refute only on a confirmed difference.

    Rational pairs are decided exactly at the model. Pairs involving
    transcendentals are replayed in floating point with the genuine
    functions; if the model overflows there, small seeded environments
    that satisfy the side conditions are tried instead.
    """
    uf_pairs = []
    for label, idx, lhs, rhs in pairs:
        if lhs.has_uf or rhs.has_uf:
            uf_pairs.append((label, idx, lhs, rhs))
            continue
        try:
            lv = eval_expr(lhs, env, _no_uf)
            rv = eval_expr(rhs, env, _no_uf)
        except ZeroDivisionError:
            continue
        if lv != rv:
            return "refuted", _witness(label, idx, lhs, rhs, lv, rv, env)
    if not uf_pairs:
        return "unknown", {"reason": "countermodel failed replay confirmation"}

    names = collect_vars([e for _, _, l, r in uf_pairs for e in (l, r)]
                         + [c.expr for c in conds])
    cands = [{k: float(v) for k, v in env.items()}]
    for k in range(8):
        cand = {}
        for n in names:
            h = hashlib.sha256(f"{tag}:{k}:{n}".encode()).digest()
            cand[n] = (int.from_bytes(h[:4], "big") % 1600 - 800) / 256.0
        cands.append(cand)
    for fenv in cands:
        if not _conds_hold(conds, fenv):
            continue
        for label, idx, lhs, rhs in uf_pairs:
            try:
                lv = eval_expr(lhs, fenv, _real_uf)
                rv = eval_expr(rhs, fenv, _real_uf)
            except (ZeroDivisionError, OverflowError, ValueError):
                continue
            if abs(lv - rv) > REPLAY_TOL:
                return "refuted", _witness(label, idx, lhs, rhs, lv, rv, fenv)
    return "unknown", {"reason": "countermodel failed replay confirmation"}


def run_stage(plan: Plan, stage: Stage, solver_argv: list[str] | None = None,
              timeout_s: float = 60.0) -> StageResult:
    t0 = time.perf_counter()
    logical, parallel, lineage = plan.logical, plan.parallel, plan.lineage
    alg = Algebra()
    ctx = ExecContext(alg)
    lshapes = {t.id: t.shape for t in logical.tensors.values()}
    pshapes = {t.id: t.shape for t in parallel.tensors.values()}

    boxes: dict[str, VTensor] = {}

    def box_of(tid: str) -> VTensor:
        vt = boxes.get(tid)
        if vt is None:
            vt = boxes[tid] = _logical_box(logical.tensors[tid], alg)
        return vt

    env_l: dict[str, VTensor] = {}
    produced_l = {o for n in stage.logical_nodes for o in n.outputs}
    for tid in stage.l_inputs:
        if tid not in produced_l:
            env_l[tid] = box_of(tid)
    try:
        sym_execute(logical, stage.logical_nodes, env_l, lshapes, ctx)
    except ZeroDivisionError as e:
        raise GraphError(f"stage {stage.target}: logical side divides by zero: {e}")

    owner: dict[str, str] = {}
    for etid in reversed(entry_order(plan)):
        for s in lineage[etid].shards:
            owner[s.tensor] = etid  # earliest claim wins
    env_p: dict[str, VTensor] = {}
    produced_p = {o for n in stage.parallel_nodes for o in n.outputs}
    done_entries: set[str] = set()
    for st in stage.p_inputs:
        if st in produced_p:
            continue
        etid = owner[st]
        if etid not in done_entries:
            done_entries.add(etid)
            _materialize_entry(lineage[etid], logical.tensors[etid],
                               box_of(etid), alg, env_p)
    try:
        sym_execute(parallel, stage.parallel_nodes, env_p, pshapes, ctx)
    except ZeroDivisionError as e:
        return StageResult(stage.target, "refuted", 0, 0, 0,
                           time.perf_counter() - t0,
                           {"reason": f"parallel side divides by zero: {e}"})

    entry = lineage[stage.target]
    box = env_l[stage.target]
    obligations: list[tuple[str, tuple, Any, Any]] = []
    if entry.mode == "full":
        for s in entry.shards:
            vt = env_p.get(s.tensor)
            if vt is None:
                raise GraphError(
                    f"stage {stage.target}: shard {s.tensor!r} was never computed")
            for li, g in enumerate(iter_box(s.ranges)):
                obligations.append((s.tensor, g, box.at(g), vt.data[li]))
    else:
        for ranges, members in sorted(entry.groups().items()):
            members = sorted(members, key=lambda s: s.tensor)
            label = "+".join(s.tensor for s in members)
            vts = []
            for s in members:
                vt = env_p.get(s.tensor)
                if vt is None:
                    raise GraphError(
                        f"stage {stage.target}: shard {s.tensor!r} was never computed")
                vts.append(vt)
            for li, g in enumerate(iter_box(ranges)):
                rhs = alg.addn([vt.data[li] for vt in vts])
                obligations.append((label, g, box.at(g), rhs))

    fast = 0
    residual: dict[tuple[int, int], tuple[str, tuple, Expr, Expr]] = {}
    for label, g, lhs, rhs in obligations:
        if isinstance(lhs, int) or isinstance(rhs, int):
            if isinstance(lhs, int) and isinstance(rhs, int):
                if lhs == rhs:
                    fast += 1
                    continue
                detail = {"shard": label, "index": list(g),
                          "lhs_value": str(lhs), "rhs_value": str(rhs),
                          "reason": "token index mismatch"}
                return StageResult(stage.target, "refuted", len(obligations),
                                   fast, 0, time.perf_counter() - t0, detail)
            lhs = alg.const(lhs) if isinstance(lhs, int) else lhs
            rhs = alg.const(rhs) if isinstance(rhs, int) else rhs
        if lhs is rhs:
            fast += 1
            continue
        residual.setdefault((lhs.uid, rhs.uid), (label, g, lhs, rhs))

    status, detail, note = "proven", None, None
    if residual:
        pairs = list(residual.values())
        sess = None
        try:
            sess = SolverSession(solver_argv)
            for c in ctx.conds:
                t = sess.emit_expr(c.expr)
                sess.assert_smt(f"(> {t} 0.0)" if c.positive else f"(not (= {t} 0.0))")
            sess.assert_any_diff([(l, r) for _, _, l, r in pairs])
            res = sess.check(timeout_s)
            if res == "sat":
                exprs = [e for _, _, l, r in pairs for e in (l, r)]
                exprs += [c.expr for c in ctx.conds]
                names = collect_vars(exprs)
                vals = sess.values([smt_sym(n) for n in names]) if names else {}
                env = {n: vals.get(smt_sym(n), Fraction(0)) for n in names}
                status, detail = _confirm(pairs, env, ctx.conds, stage.target)
            elif res != "unsat":
                status, note = "unknown", "solver returned unknown"
        except (SolverProtocolError, SolverUnavailable) as e:
            status, note = "unknown", f"solver failure: {e}"
        finally:
            if sess is not None:
                sess.close()

    return StageResult(stage.target, status, len(obligations), fast,
                       len(residual), time.perf_counter() - t0, detail, note)
