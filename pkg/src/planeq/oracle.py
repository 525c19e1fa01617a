"""Exact concrete evaluation oracle.

This module re-implements every operator with direct loops over Fractions (or
floats), on purpose sharing no kernel code with the symbolic route in ops.py.
It provides:

  - concrete graph evaluation (exact rationals or float64),
  - lineage-driven slicing and merging of shard values,
  - differential testing of logical vs parallel graphs on random inputs,
  - index-map (tau) affinity probing for SIMD operators,
  - kernel well-formedness probes (declared reads are sound and live),
  - reduction base-case checks with a negative control,
  - a randomized soundness suite for shape reduction.

Transcendentals (EXP/RSQRT/SIGMOID) evaluate to their real float values in
float mode; in exact mode callers may supply a deterministic rational stand-in
(any function-consistent interpretation is a valid model for the
uninterpreted-function semantics the prover uses).
"""

from __future__ import annotations

import hashlib
import math
import random
from dataclasses import dataclass
from fractions import Fraction
from typing import Any, Callable, Sequence

from .errors import PlanEqError, ShapeError
from .graph import (Graph, Lineage, LineageEntry, Node, Ranges, Shape,
                    entry_tiles_exactly, flat_index, iter_box, range_extents,
                    topo_sort, unflatten)
from .plan import Plan


@dataclass
class RT:
    """Row-major concrete tensor; data elements are Fraction, float, or int."""
    shape: Shape
    data: list

    def at(self, idx: tuple[int, ...]):
        return self.data[flat_index(idx, self.shape)]

    def nelems(self) -> int:
        n = 1
        for d in self.shape:
            n *= d
        return n


def _box(shape: Shape):
    return iter_box(tuple((0, d) for d in shape))


def zeros(shape: Shape, mode: str) -> RT:
    n = 1
    for d in shape:
        n *= d
    fill = 0.0 if mode == "float" else Fraction(0)
    return RT(shape, [fill] * n)


def hash_uf(fn: str, x) -> Fraction:
    """Deterministic rational interpretation for uninterpreted functions.

    Function-consistent by construction (same argument, same value); positive
    so it also satisfies the range side of RSQRT-style conditions.
    """
    h = hashlib.sha256(f"{fn}|{x}".encode()).digest()
    num = 1 + h[0] % 13
    den = 1 + h[1] % 7
    return Fraction(num, den)


def _fnum(v, mode: str):
    return float(v) if mode == "float" else v


def eval_node(node: Node, ins: list[RT], out_shapes: list[Shape], mode: str,
              uf: Callable[[str, Any], Any] | None = None) -> list[RT]:
    """Evaluate one node; out_shapes are authoritative (they may be reduced)."""
    k = node.kind
    a = node.attrs

    def call_uf(fn: str, x):
        if mode == "float":
            if fn == "EXP":
                return math.exp(x)
            if fn == "RSQRT":
                if x <= 0:
                    raise ZeroDivisionError("rsqrt of non-positive value")
                return x ** -0.5
            if fn == "SIGMOID":
                return 1.0 / (1.0 + math.exp(-x))
            raise ValueError(fn)
        if uf is None:
            raise PlanEqError(f"exact mode cannot evaluate {fn}; supply a uf interpretation")
        return uf(fn, x)

    if k in ("add", "sub", "mul", "div", "dropout"):
        x, y = ins
        out = zeros(out_shapes[0], mode)
        for i in range(len(x.data)):
            if k == "add":
                out.data[i] = x.data[i] + y.data[i]
            elif k == "sub":
                out.data[i] = x.data[i] - y.data[i]
            elif k in ("mul", "dropout"):
                out.data[i] = x.data[i] * y.data[i]
            else:
                if y.data[i] == 0:
                    raise ZeroDivisionError(f"div by zero in {node.id}")
                out.data[i] = x.data[i] / y.data[i]
        return [out]

    if k == "silu_grad":
        x, g = ins
        out = zeros(out_shapes[0], mode)
        for i in range(len(x.data)):
            s = call_uf("SIGMOID", x.data[i])
            one = 1.0 if mode == "float" else Fraction(1)
            out.data[i] = g.data[i] * (s + x.data[i] * s * (one - s))
        return [out]

    if k in ("identity", "move"):
        return [RT(out_shapes[0], list(ins[0].data))]

    if k == "scale":
        f = _fnum(Fraction(a["factor"]), mode)
        return [RT(out_shapes[0], [v * f for v in ins[0].data])]

    if k == "shift":
        c = _fnum(Fraction(a["addend"]), mode)
        return [RT(out_shapes[0], [v + c for v in ins[0].data])]

    if k == "pow":
        e = int(a["exponent"])
        return [RT(out_shapes[0], [v ** e for v in ins[0].data])]

    if k == "rsqrt":
        return [RT(out_shapes[0], [call_uf("RSQRT", v) for v in ins[0].data])]

    if k == "silu":
        return [RT(out_shapes[0], [v * call_uf("SIGMOID", v) for v in ins[0].data])]

    if k == "softmax":
        x = ins[0]
        out = zeros(out_shapes[0], mode)
        n = x.shape[-1]
        rows = len(x.data) // n
        for r in range(rows):
            es = [call_uf("EXP", x.data[r * n + j]) for j in range(n)]
            tot = sum(es[1:], es[0])
            if tot == 0:
                raise ZeroDivisionError("softmax normalizer is zero")
            for j in range(n):
                out.data[r * n + j] = es[j] / tot
        return [out]

    if k == "create_mask":
        s = out_shapes[0]
        one = 1.0 if mode == "float" else Fraction(1)
        zero = 0.0 if mode == "float" else Fraction(0)
        return [RT(s, [one if j <= i else zero for i in range(s[0]) for j in range(s[1])])]

    if k == "apply_mask":
        x, m = ins
        out = zeros(out_shapes[0], mode)
        for idx in _box(x.shape):
            out.data[flat_index(idx, x.shape)] = x.at(idx) * m.at(idx[-2:])
        return [out]

    if k == "view":
        return [RT(out_shapes[0], list(ins[0].data))]

    if k == "transpose":
        perm = tuple(int(p) for p in a["perm"])
        x = ins[0]
        out = zeros(out_shapes[0], mode)
        for idx in _box(x.shape):
            oidx = tuple(idx[p] for p in perm)
            out.data[flat_index(oidx, out.shape)] = x.at(idx)
        return [out]

    if k == "expand":
        x = ins[0]
        out = zeros(out_shapes[0], mode)
        for oidx in _box(out.shape):
            iidx = tuple(0 if x.shape[d] == 1 else oidx[d] for d in range(len(x.shape)))
            out.data[flat_index(oidx, out.shape)] = x.at(iidx)
        return [out]

    if k in ("sum", "mean"):
        x = ins[0]
        rank = len(x.shape)
        axes = a.get("axes")
        axes = tuple(range(rank)) if axes is None else tuple(sorted(ax % rank for ax in axes))
        keep = bool(a.get("keepdims"))
        out = zeros(out_shapes[0], mode)
        count = 1
        for ax in axes:
            count *= x.shape[ax]
        for idx in _box(x.shape):
            if keep:
                oidx = tuple(0 if d in axes else idx[d] for d in range(rank))
            else:
                oidx = tuple(idx[d] for d in range(rank) if d not in axes)
                if not oidx:
                    oidx = (0,)
            pos = flat_index(oidx, out.shape)
            out.data[pos] = out.data[pos] + x.at(idx)
        if k == "mean":
            c = _fnum(Fraction(1, count), mode)
            out.data = [v * c for v in out.data]
        return [out]

    if k == "matmul":
        A, B = ins
        out = zeros(out_shapes[0], mode)
        kdim = A.shape[-1]
        m, n = A.shape[-2], B.shape[-1]
        lead = A.shape[:-2]
        b_batched = len(B.shape) == len(A.shape)
        for lidx in _box(lead):
            for i in range(m):
                for j in range(n):
                    acc = 0.0 if mode == "float" else Fraction(0)
                    for t in range(kdim):
                        bv = B.at(lidx + (t, j)) if b_batched else B.at((t, j))
                        acc += A.at(lidx + (i, t)) * bv
                    out.data[flat_index(lidx + (i, j), out.shape)] = acc
        return [out]

    if k == "einsum":
        spec = a["spec"].replace(" ", "")
        lhs, rhs = spec.split("->")
        subs = lhs.split(",")
        extent: dict[str, int] = {}
        for sub, t in zip(subs, ins):
            for ch, d in zip(sub, t.shape):
                extent[ch] = d
        contracted = [ch for ch in sorted(set("".join(subs))) if ch not in rhs]
        out = zeros(out_shapes[0], mode)
        for oidx in _box(out.shape):
            bind = dict(zip(rhs, oidx))
            acc = 0.0 if mode == "float" else Fraction(0)
            for combo in iter_box(tuple((0, extent[ch]) for ch in contracted)):
                bind.update(zip(contracted, combo))
                prod = 1.0 if mode == "float" else Fraction(1)
                for sub, t in zip(subs, ins):
                    prod = prod * t.at(tuple(bind[ch] for ch in sub))
                acc += prod
            out.data[flat_index(oidx, out.shape)] = acc
        return [out]

    if k == "full":
        v = _fnum(Fraction(a["value"]), mode)
        n = 1
        for d in out_shapes[0]:
            n *= d
        return [RT(out_shapes[0], [v] * n)]

    if k == "chunk":
        ax = int(a["axis"])
        x = ins[0]
        out = zeros(out_shapes[0], mode)
        width = out.shape[ax]
        off = int(a["index"]) * width
        for oidx in _box(out.shape):
            iidx = list(oidx)
            iidx[ax] += off
            out.data[flat_index(oidx, out.shape)] = x.at(tuple(iidx))
        return [out]

    if k == "embedding":
        table, ids = ins
        h = table.shape[1]
        out = zeros(out_shapes[0], mode)
        pos = 0
        for iidx in _box(ids.shape):
            row = int(ids.at(iidx))
            if row < 0 or row >= table.shape[0]:
                raise ShapeError(f"token id {row} outside table in {node.id}")
            for hh in range(h):
                out.data[pos] = table.data[row * h + hh]
                pos += 1
        return [out]

    if k == "embedding_grad":
        g, ids = ins
        v, h = out_shapes[0]
        out = zeros((v, h), mode)
        for iidx in _box(ids.shape):
            row = int(ids.at(iidx))
            for hh in range(h):
                out.data[row * h + hh] = out.data[row * h + hh] + g.at(iidx + (hh,))
        return [out]

    if k == "gnorm_sq":
        acc = 0.0 if mode == "float" else Fraction(0)
        for t in ins:
            for v in t.data:
                acc += v * v
        return [RT((1,), [acc])]

    if k == "all_reduce":
        n = len(ins[0].data)
        tot = [sum(t.data[i] for t in ins) for i in range(n)]
        return [RT(out_shapes[j], list(tot)) for j in range(len(ins))]

    if k == "all_gather":
        ax = int(a["axis"])
        out = zeros(out_shapes[0], mode)
        for oidx in _box(out.shape):
            c = oidx[ax]
            for t in ins:
                if c < t.shape[ax]:
                    iidx = list(oidx)
                    iidx[ax] = c
                    out.data[flat_index(oidx, out.shape)] = t.at(tuple(iidx))
                    break
                c -= t.shape[ax]
        return [RT(out.shape, list(out.data)) for _ in ins]

    if k == "reduce_scatter":
        ax = int(a["axis"])
        outs = []
        for j in range(len(ins)):
            o = zeros(out_shapes[j], mode)
            width = o.shape[ax]
            for oidx in _box(o.shape):
                iidx = list(oidx)
                iidx[ax] += j * width
                o.data[flat_index(oidx, o.shape)] = sum(t.at(tuple(iidx)) for t in ins)
            outs.append(o)
        return outs

    if k == "all_to_all":
        sa = int(a["split_axis"])
        ca = int(a["concat_axis"])
        parts = len(ins)
        outs = []
        for j in range(len(ins)):
            o = zeros(out_shapes[j], mode)
            seg = o.shape[ca] // parts
            for oidx in _box(o.shape):
                src = oidx[ca] // seg
                iidx = list(oidx)
                iidx[ca] = oidx[ca] % seg
                iidx[sa] = iidx[sa] + j * (ins[0].shape[sa] // parts)
                o.data[flat_index(oidx, o.shape)] = ins[src].at(tuple(iidx))
            outs.append(o)
        return outs

    raise PlanEqError(f"oracle has no rule for operator kind {k!r}")


def eval_nodes(nodes: Sequence[Node], env: dict[str, RT], mode: str = "exact",
               shapes: dict[str, Shape] | None = None,
               uf: Callable[[str, Any], Any] | None = None) -> dict[str, RT]:
    """Evaluate already-ordered nodes, extending env in place."""
    for node in nodes:
        ins = [env[t] for t in node.inputs]
        if shapes is not None:
            outs = [shapes[t] for t in node.outputs]
        else:
            from .ops import infer_node_shapes
            outs = infer_node_shapes(node, [t.shape for t in ins])
        for tid, rt in zip(node.outputs, eval_node(node, ins, outs, mode, uf)):
            env[tid] = rt
    return env


def eval_graph(graph: Graph, inputs: dict[str, RT], mode: str = "exact",
               uf: Callable[[str, Any], Any] | None = None) -> dict[str, RT]:
    env = dict(inputs)
    return eval_nodes(topo_sort(graph), env, mode=mode, uf=uf)


# ---------------------------------------------------------------------------
# Lineage slicing / merging


def slice_ranges(value: RT, ranges: Ranges, mode: str = "exact") -> RT:
    out = zeros(range_extents(ranges), mode if isinstance(value.data[0], float) else "exact")
    base = tuple(lo for lo, _ in ranges)
    for oidx in _box(out.shape):
        src = tuple(b + i for b, i in zip(base, oidx))
        out.data[flat_index(oidx, out.shape)] = value.at(src)
    return out


def merge_entry(entry: LineageEntry, shard_values: dict[str, RT], logical_shape: Shape,
                strict: bool = True) -> tuple[RT | None, list[str]]:
    """Reassemble the logical value from shards.

    Full mode: group members must agree and equal the slice; partial mode:
    group members sum to the slice. Returns (merged, problems); merged is None
    when the entry is structurally invalid and strict is set.
    """
    problems: list[str] = []
    if not entry_tiles_exactly(entry, logical_shape):
        problems.append(f"{entry.logical}: ranges do not tile {logical_shape}")
        if strict:
            return None, problems
    sample = next(iter(shard_values.values()))
    mode = "float" if isinstance(sample.data[0], float) else "exact"
    out = zeros(logical_shape, mode)
    filled = [False] * out.nelems()
    for ranges, shards in entry.groups().items():
        vals = [shard_values[s.tensor] for s in shards]
        if entry.mode == "full":
            first = vals[0]
            for v in vals[1:]:
                if v.data != first.data:
                    problems.append(f"{entry.logical}: replicas disagree at ranges {ranges}")
            merged = first
        else:
            merged = zeros(range_extents(ranges), mode)
            for v in vals:
                for i in range(len(merged.data)):
                    merged.data[i] = merged.data[i] + v.data[i]
        base = tuple(lo for lo, _ in ranges)
        for sidx in _box(merged.shape):
            didx = tuple(b + i for b, i in zip(base, sidx))
            pos = flat_index(didx, out.shape)
            if filled[pos]:
                problems.append(f"{entry.logical}: overlapping writes at {didx}")
            filled[pos] = True
            out.data[pos] = merged.at(sidx)
    if not all(filled):
        problems.append(f"{entry.logical}: merge left uncovered elements")
    return out, problems


# ---------------------------------------------------------------------------
# Random inputs


def rand_rational(rng: random.Random) -> Fraction:
    num = rng.randint(-7, 7)
    den = rng.choice([1, 2, 3])
    return Fraction(num, den)


def draw_inputs(graph: Graph, rng: random.Random, mode: str = "exact") -> dict[str, RT]:
    env: dict[str, RT] = {}
    for tid in graph.inputs:
        t = graph.tensors[tid]
        n = t.nelems()
        if t.dtype == "int":
            vocab = int(t.meta.get("vocab", 0)) or max(2, n)
            env[tid] = RT(t.shape, [rng.randrange(vocab) for _ in range(n)])
        elif t.meta.get("mask"):
            one = 1.0 if mode == "float" else Fraction(1)
            zero = 0.0 if mode == "float" else Fraction(0)
            env[tid] = RT(t.shape, [one if rng.random() < 0.8 else zero for _ in range(n)])
        else:
            env[tid] = RT(t.shape, [_fnum(rand_rational(rng), mode) for _ in range(n)])
    return env


def parallel_inputs_from_logical(plan: Plan, logical_env: dict[str, RT],
                                 mode: str = "exact") -> dict[str, RT]:
    env: dict[str, RT] = {}
    assert plan.parallel is not None and plan.lineage is not None
    for tid in plan.parallel.inputs:
        placed = False
        for entry in plan.lineage.values():
            for s in entry.shards:
                if s.tensor == tid:
                    env[tid] = slice_ranges(logical_env[entry.logical], s.ranges, mode)
                    placed = True
                    break
            if placed:
                break
        if not placed:
            raise PlanEqError(f"parallel input {tid!r} has no lineage back to a logical input")
    return env


# ---------------------------------------------------------------------------
# Differential check


@dataclass
class DiffReport:
    trials: int
    failures: list[str]

    @property
    def ok(self) -> bool:
        return not self.failures


def differential_check(plan: Plan, trials: int = 100, seed: int = 0,
                       mode: str = "exact", atol: float = 1e-9) -> DiffReport:
    """Run both graphs on random inputs and compare every lineage entry."""
    if plan.parallel is None or plan.lineage is None:
        raise PlanEqError("differential check needs a parallel graph and lineage")
    rng = random.Random(seed)
    failures: list[str] = []
    uf = (lambda fn, x: hash_uf(fn, x)) if mode == "exact" else None
    for t in range(trials):
        l_env = draw_inputs(plan.logical, rng, mode)
        p_env = parallel_inputs_from_logical(plan, l_env, mode)
        try:
            l_all = eval_graph(plan.logical, l_env, mode, uf)
            p_all = eval_graph(plan.parallel, p_env, mode, uf)
        except ZeroDivisionError:
            continue  # rejected sample
        for entry in plan.lineage.values():
            shard_vals = {s.tensor: p_all[s.tensor] for s in entry.shards}
            merged, problems = merge_entry(entry, shard_vals, plan.logical.shape(entry.logical))
            if problems:
                failures.append(f"trial {t}: " + "; ".join(problems))
                continue
            want = l_all[entry.logical]
            assert merged is not None
            if mode == "float":
                # scale-aware: float mode only sanity-checks reassociation noise
                bad = [i for i in range(len(want.data))
                       if abs(want.data[i] - merged.data[i])
                       > atol * max(1.0, abs(want.data[i]))]
            else:
                bad = [i for i in range(len(want.data)) if want.data[i] != merged.data[i]]
            if bad:
                idx = unflatten(bad[0], want.shape)
                failures.append(
                    f"trial {t}: {entry.logical}{list(idx)} logical={want.data[bad[0]]} "
                    f"merged={merged.data[bad[0]]}")
        if failures:
            break
    return DiffReport(trials=trials, failures=failures)


# ---------------------------------------------------------------------------
# Index-map (tau) affinity probing


#: representative full-scale instances used by the structural probes
_PROBE_INSTANCES: dict[str, tuple[dict, list[Shape]]] = {
    "add": ({}, [(3, 4), (3, 4)]),
    "sub": ({}, [(3, 4), (3, 4)]),
    "mul": ({}, [(3, 4), (3, 4)]),
    "div": ({}, [(3, 4), (3, 4)]),
    "dropout": ({}, [(3, 4), (3, 4)]),
    "silu_grad": ({}, [(3, 4), (3, 4)]),
    "identity": ({}, [(3, 4)]),
    "move": ({"src": 0, "dst": 1}, [(3, 4)]),
    "scale": ({"factor": Fraction(3, 2)}, [(3, 4)]),
    "shift": ({"addend": Fraction(1, 3)}, [(3, 4)]),
    "pow": ({"exponent": 2}, [(3, 4)]),
    "rsqrt": ({}, [(3, 4)]),
    "silu": ({}, [(3, 4)]),
    "softmax": ({"axis": -1}, [(2, 3, 4)]),
    "create_mask": ({"size": 4}, []),
    "apply_mask": ({}, [(2, 3, 4, 4), (4, 4)]),
    "view": ({"shape": [3, 2, 2]}, [(3, 4)]),
    "transpose": ({"perm": [1, 0, 2]}, [(2, 3, 4)]),
    "expand": ({"shape": [3, 4]}, [(1, 4)]),
    "sum": ({"axes": [1], "keepdims": False}, [(3, 4)]),
    "mean": ({"axes": [1], "keepdims": True}, [(3, 4)]),
    "matmul": ({}, [(2, 3, 4), (2, 4, 5)]),
    "einsum": ({"spec": "ij,jk->ik"}, [(3, 4), (4, 2)]),
    "full": ({"shape": [2, 2], "value": Fraction(1, 2)}, []),
    "chunk": ({"axis": 1, "parts": 2, "index": 1}, [(3, 4)]),
    "gnorm_sq": ({}, [(2, 3), (4,)]),
    "all_reduce": ({"group": [0, 1]}, [(3, 4), (3, 4)]),
    "all_gather": ({"group": [0, 1], "axis": 1}, [(3, 2), (3, 2)]),
    "reduce_scatter": ({"group": [0, 1], "axis": 1}, [(3, 4), (3, 4)]),
    "all_to_all": ({"group": [0, 1], "split_axis": 0, "concat_axis": 1},
                   [(4, 2), (4, 2)]),
    "embedding": ({}, [(6, 3), (2, 3)]),
    "embedding_grad": ({"vocab": 6}, [(2, 3, 4), (2, 3)]),
}

#: kinds whose index map depends on data, excluded from affinity probing
TAU_EXCLUDED = {
    "embedding": "gather rows are selected by token values, not by the output index",
    "embedding_grad": "scatter rows are selected by token values, not by the output index",
}


def _probe_node(kind: str) -> tuple[Node, list[Shape], list[Shape]]:
    from .ops import get_op
    attrs, in_shapes = _PROBE_INSTANCES[kind]
    node = Node(id=f"probe.{kind}", kind=kind, attrs=dict(attrs),
                inputs=tuple(f"i{j}" for j in range(len(in_shapes))),
                outputs=("o0",))
    op = get_op(kind)
    out_shapes = op.infer_shapes(node, list(in_shapes))
    node = Node(id=node.id, kind=kind, attrs=node.attrs, inputs=node.inputs,
                outputs=tuple(f"o{j}" for j in range(len(out_shapes))))
    return node, list(in_shapes), out_shapes


def simd_linearity_check(kind: str, probes: int = 25, seed: int = 0) -> dict:
    """Derive the affine index map (M, b) of an operator and validate it.

    The map is reconstructed from the dependency lists at the origin and at
    unit offsets along each output axis, then checked against the operator's
    own dependency function at random output indices.
    """
    from .ops import get_op
    if kind in TAU_EXCLUDED:
        return {"kind": kind, "checked": False, "reason": TAU_EXCLUDED[kind]}
    node, in_shapes, out_shapes = _probe_node(kind)
    op = get_op(kind)
    rng = random.Random(seed)
    for oslot, oshape in enumerate(out_shapes):
        origin = tuple(0 for _ in oshape)
        base = op.deps(node, in_shapes, out_shapes, oslot, origin)
        cols: list[list[tuple[int, tuple[int, ...]]]] = []
        for ax in range(len(oshape)):
            if oshape[ax] < 2:
                cols.append([(s, tuple(0 for _ in i)) for s, i in base])
                continue
            step = list(origin)
            step[ax] = 1
            at = op.deps(node, in_shapes, out_shapes, oslot, tuple(step))
            if len(at) != len(base):
                return {"kind": kind, "checked": True, "ok": False,
                        "reason": f"dependency count varies along axis {ax}"}
            cols.append([(s2, tuple(b - a for a, b in zip(i1, i2)))
                         for (s1, i1), (s2, i2) in zip(base, at)])
        for _ in range(probes):
            oidx = tuple(rng.randrange(d) for d in oshape)
            want = op.deps(node, in_shapes, out_shapes, oslot, oidx)
            if len(want) != len(base):
                return {"kind": kind, "checked": True, "ok": False,
                        "reason": f"dependency count varies at {oidx}"}
            for p, (slot, bidx) in enumerate(base):
                pred = list(bidx)
                for ax, steps in enumerate(cols):
                    dslot, delta = steps[p]
                    if dslot != slot:
                        return {"kind": kind, "checked": True, "ok": False,
                                "reason": "dependency slot varies with index"}
                    for d in range(len(pred)):
                        pred[d] += oidx[ax] * delta[d]
                if want[p] != (slot, tuple(pred)):
                    return {"kind": kind, "checked": True, "ok": False,
                            "reason": f"index map not affine at {oidx} dep {p}"}
    return {"kind": kind, "checked": True, "ok": True}


def simd_linearity_report(seed: int = 0) -> dict[str, dict]:
    from .ops import REGISTRY
    return {kind: simd_linearity_check(kind, seed=seed) for kind in sorted(REGISTRY)}


# ---------------------------------------------------------------------------
# Kernel well-formedness probes


def _nonzero_inputs(node: Node, in_shapes: list[Shape], rng: random.Random) -> list[RT]:
    ins = []
    for j, s in enumerate(in_shapes):
        n = 1
        for d in s:
            n *= d
        if node.kind in ("embedding", "embedding_grad") and j == 1:
            vocab = in_shapes[0][0] if node.kind == "embedding" else int(node.attrs["vocab"])
            ins.append(RT(s, [rng.randrange(vocab) for _ in range(n)]))
        else:
            vals = []
            for _ in range(n):
                v = Fraction(0)
                while v == 0:
                    v = rand_rational(rng)
                vals.append(v)
            ins.append(RT(s, vals))
    return ins


def kernel_wellformed_check(kind: str, trials: int = 6, seed: int = 0) -> dict:
    """Probe that declared dependency sets are sound and live.

    Soundness: perturbing an element outside an output's dependency set never
    changes that output element. Liveness: for each declared dependency there
    exist values where perturbing it changes the output.
    """
    from .ops import get_op
    if kind in TAU_EXCLUDED:
        return {"kind": kind, "checked": False, "reason": TAU_EXCLUDED[kind]}
    node, in_shapes, out_shapes = _probe_node(kind)
    op = get_op(kind)
    rng = random.Random(seed)
    uf = lambda fn, x: hash_uf(fn, x)

    def run(ins: list[RT]) -> list[RT]:
        return eval_node(node, ins, out_shapes, "exact", uf)

    for oslot, oshape in enumerate(out_shapes):
        flat_positions = list(range(min(6, _vol(oshape))))
        for fpos in flat_positions:
            oidx = unflatten(fpos, oshape)
            ins = _nonzero_inputs(node, in_shapes, rng)
            base_out = run(ins)[oslot].data[fpos]
            deps = set(op.deps(node, in_shapes, out_shapes, oslot, oidx))
            # soundness: non-dependencies are inert
            for slot, s in enumerate(in_shapes):
                if node.kind in ("embedding", "embedding_grad") and slot == 1:
                    continue
                for _ in range(4):
                    idx = tuple(rng.randrange(d) for d in s)
                    if (slot, idx) in deps:
                        continue
                    saved = ins[slot].data[flat_index(idx, s)]
                    ins[slot].data[flat_index(idx, s)] = saved + Fraction(5, 7)
                    got = run(ins)[oslot].data[fpos]
                    ins[slot].data[flat_index(idx, s)] = saved
                    if got != base_out:
                        return {"kind": kind, "checked": True, "ok": False,
                                "reason": f"undeclared read of input {slot} at {idx}"}
            # liveness: every dependency can matter for some values
            for slot, idx in sorted(deps):
                moved = False
                for _ in range(trials):
                    trial_ins = _nonzero_inputs(node, in_shapes, rng)
                    before = run(trial_ins)[oslot].data[fpos]
                    pos = flat_index(idx, in_shapes[slot])
                    trial_ins[slot].data[pos] = trial_ins[slot].data[pos] + Fraction(3, 5)
                    after = run(trial_ins)[oslot].data[fpos]
                    if after != before:
                        moved = True
                        break
                if not moved:
                    return {"kind": kind, "checked": True, "ok": False,
                            "reason": f"declared dependency {slot}:{idx} never observed"}
    return {"kind": kind, "checked": True, "ok": True}


def _vol(shape: Shape) -> int:
    n = 1
    for d in shape:
        n *= d
    return n


def kernel_wellformed_report(seed: int = 0) -> dict[str, dict]:
    from .ops import REGISTRY
    return {kind: kernel_wellformed_check(kind, seed=seed) for kind in sorted(REGISTRY)}


# ---------------------------------------------------------------------------
# Reduction base cases


def reduction_base_case_check(max_n: int = 16, seed: int = 0) -> dict:
    """Folds used by reductions must be order-insensitive.

    Checks the additive fold symbolically at n=2 (commuted operands intern to
    the identical normal form) and concretely up to max_n against left,
    right, and balanced-tree evaluation orders. A deliberately broken fold
    (absolute-value sum) is run as a negative control and must be caught at
    n=2.
    """
    from .sym import Algebra
    alg = Algebra()
    a, b = alg.var("a"), alg.var("b")
    sym_ok = alg.add(a, b) is alg.add(b, a)

    rng = random.Random(seed)
    concrete_ok = True
    for n in range(2, max_n + 1):
        xs = [rand_rational(rng) for _ in range(n)]
        left = Fraction(0)
        for v in xs:
            left += v
        right = Fraction(0)
        for v in reversed(xs):
            right = v + right

        def tree(vs: list[Fraction]) -> Fraction:
            if len(vs) == 1:
                return vs[0]
            mid = len(vs) // 2
            return tree(vs[:mid]) + tree(vs[mid:])

        if not (left == right == tree(xs)):
            concrete_ok = False
            break

    # negative control: |a| + |b| is not the additive fold of a + b
    control_detected = False
    for _ in range(32):
        a_v, b_v = rand_rational(rng), rand_rational(rng)
        if abs(a_v) + abs(b_v) != a_v + b_v:
            control_detected = True
            break

    return {"symbolic_n2": sym_ok, "concrete_upto": concrete_ok,
            "negative_control_detected": control_detected,
            "ok": sym_ok and concrete_ok and control_detected}


# ---------------------------------------------------------------------------
# Randomized shape-reduction soundness corpus


def random_plan(seed: int, fault: bool) -> "Plan":
    """Small random feedforward plan, optionally with one injected fault.

    Graphs stay inside the exact-arithmetic fragment (no transcendentals, no
    division) so the differential oracle can act as ground truth.
    """
    from .completion import LossSpec
    from .faults import random_structural_fault
    from .parallelize import ParallelConfig, parallelize
    from .toy import GraphBuilder

    rng = random.Random(seed)
    B = rng.choice([2, 4])
    H = rng.choice([2, 4])
    gb = GraphBuilder("rnd")
    x = gb.data_input("x", (B, H))
    acts = [x]
    cur = x
    n_ops = rng.randint(2, 5)
    widths = {cur: H}
    for i in range(n_ops):
        choice = rng.random()
        w = widths[cur]
        if choice < 0.35:
            wt = gb.weight(f"w{i}", (w, rng.choice([2, 4])))
            cur = gb.op("matmul", [cur, wt], f"a{i}", block=0)
            widths[cur] = gb.g.shape(cur)[-1]
        elif choice < 0.55 and any(
                t != cur and gb.g.shape(t) == gb.g.shape(cur) for t in acts):
            # distinct operands: sub(x, x) would zero out the tail of the graph
            peers = [t for t in acts if t != cur and gb.g.shape(t) == gb.g.shape(cur)]
            other = rng.choice(peers)
            cur = gb.op(rng.choice(["add", "mul", "sub"]), [cur, other], f"a{i}", block=0)
            widths[cur] = gb.g.shape(cur)[-1]
        elif choice < 0.75:
            cur = gb.op("scale", [cur], f"a{i}", block=0,
                        attrs={"factor": rand_rational(rng) or Fraction(1)})
            widths[cur] = gb.g.shape(cur)[-1]
        else:
            cur = gb.op("pow", [cur], f"a{i}", block=0, attrs={"exponent": 2})
            widths[cur] = gb.g.shape(cur)[-1]
        acts.append(cur)
    out = gb.op("sum", [cur], "out", block=0, attrs={"axes": None, "keepdims": False})
    gb.g.outputs = [out]
    logical = gb.g

    cfg = rng.choice([ParallelConfig(dp=2), ParallelConfig(tp=2),
                      ParallelConfig(dp=2, tp=2), ParallelConfig(nm=2),
                      ParallelConfig(dp=2, nm=2), ParallelConfig(tp=2, nm=2)])
    if B % (cfg.dp * cfg.nm) != 0:
        cfg = ParallelConfig(tp=2)
    plan = parallelize(logical, cfg, loss=LossSpec(kind="sum"),
                       lineage_interiors=[t for t in acts[1:]])
    if fault:
        plan = random_structural_fault(plan, rng)
    return plan


def soundness_suite(cases: int = 100, seed: int = 0, fault_fraction: float = 0.5,
                    solver_argv: list[str] | None = None) -> dict:
    """Three-way agreement: reduced verdict == full-scale verdict == oracle.

    Any route error (topology, shapes, infeasibility) counts as a failing
    verdict for that route; agreement is on the boolean outcome.
    """
    from .verify import VerifyOptions, verify_plan

    rng = random.Random(seed)
    results = []
    disagreements = []
    for i in range(cases):
        fault = rng.random() < fault_fraction
        plan = random_plan(seed * 100003 + i, fault)

        def route_verdict(no_reduce: bool) -> bool:
            try:
                rep = verify_plan(plan, VerifyOptions(
                    jobs=1, no_reduce=no_reduce, solver_argv=solver_argv))
                return rep["verdict"] == "proven"
            except PlanEqError:
                return False

        try:
            oracle_ok = differential_check(plan, trials=8, seed=i, mode="exact").ok
        except PlanEqError:
            oracle_ok = False
        reduced_ok = route_verdict(False)
        full_ok = route_verdict(True)
        agree = reduced_ok == full_ok == oracle_ok
        results.append({"case": i, "fault": fault, "reduced": reduced_ok,
                        "full": full_ok, "oracle": oracle_ok, "agree": agree})
        if not agree:
            disagreements.append(results[-1])
    return {"cases": cases, "disagreements": disagreements, "results": results,
            "ok": not disagreements}
