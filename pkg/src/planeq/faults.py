"""Fault injector: seeded, reproducible plan corruptions.

Each category models one way a real lowering pipeline goes wrong. Injection
never edits a plan in place; it round-trips through the serializer so the
mutant is independent, and it records what was done under
plan.provenance["fault"].

Categories and how the verifier is expected to catch them:
  missing_comm        delete an all_reduce; "rewire" keeps the plan loadable
                      (stage refutation), "dangle" leaves consumers of the
                      removed outputs behind (topology error).
  wrong_primitive     swap an all_reduce for an all_gather; declared shapes
                      stop matching the operator's shape rule.
  wrong_group         merge two sibling tensor-group all_reduces into one
                      group spanning both replicas.
  bad_partition       rotate the index of an alignment chunk so a device
                      consumes its neighbor's slice.
  wrong_scaling       "seed": multiply one copy of a batch-normalizing scale
                      constant by dp, as if the loss were locally normalized;
                      "avg": insert gradient averaging (a 1/dp rescale) after
                      a replica all_reduce that is already a plain sum.
  shuffled_microbatch "cross": swap one operand of a binary op between two
                      microbatch lanes; "cycle": wire a node's input to a
                      downstream tensor of the same lane.
  dropped_microbatch  make a microbatch accumulator consume one lane twice.
  bad_slice           shift a lineage shard's range so the tiling overlaps
                      and leaves elements uncovered.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from fractions import Fraction

from .errors import PlanEqError
from .graph import Graph, Node
from .plan import Plan, plan_from_dict, plan_to_dict

CATEGORIES = ("missing_comm", "wrong_primitive", "wrong_group", "bad_partition",
              "wrong_scaling", "shuffled_microbatch", "dropped_microbatch",
              "bad_slice")


@dataclass(frozen=True)
class FaultSpec:
    category: str
    site: str
    detail: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"category": self.category, "site": self.site, "detail": self.detail}


def _clone(plan: Plan) -> Plan:
    return plan_from_dict(plan_to_dict(plan))


def _rewire(g: Graph, old: str, new: str):
    for i, n in enumerate(g.nodes):
        if old in n.inputs:
            g.nodes[i] = Node(n.id, n.kind,
                              tuple(new if t == old else t for t in n.inputs),
                              n.outputs, n.attrs, n.device, n.seq)
    g.outputs = [new if t == old else t for t in g.outputs]


def _rewire_lineage(plan: Plan, old: str, new: str):
    for entry in plan.lineage.values():
        for i, s in enumerate(entry.shards):
            if s.tensor == old:
                entry.shards = entry.shards[:i] + \
                    (type(s)(tensor=new, ranges=s.ranges),) + entry.shards[i + 1:]


def _drop_node(g: Graph, nid: str):
    g.nodes = [n for n in g.nodes if n.id != nid]


def _origin(g: Graph, tid: str) -> str | None:
    return g.tensors[tid].meta.get("from")


# -- site enumeration ---------------------------------------------------------


def list_sites(plan: Plan, category: str) -> list[FaultSpec]:
    g = plan.parallel
    if g is None:
        raise PlanEqError("plan has no parallel graph to corrupt")
    sites: list[FaultSpec] = []
    if category == "missing_comm":
        for n in g.nodes:
            if n.kind == "all_reduce":
                for variant in ("rewire", "dangle"):
                    sites.append(FaultSpec(category, n.id, {"variant": variant}))
    elif category == "wrong_primitive":
        for n in g.nodes:
            if n.kind == "all_reduce":
                sites.append(FaultSpec(category, n.id, {"to": "all_gather"}))
    elif category == "wrong_group":
        pairs: dict[tuple, list[Node]] = {}
        for n in g.nodes:
            if n.kind != "all_reduce":
                continue
            key = (_origin(g, n.outputs[0]), g.tensors[n.outputs[0]].microbatch,
                   len(n.inputs))
            pairs.setdefault(key, []).append(n)
        for key, nodes in sorted(pairs.items(), key=lambda kv: kv[1][0].id):
            done = False
            for i in range(len(nodes)):
                for j in range(i + 1, len(nodes)):
                    if set(nodes[i].attrs["group"]).isdisjoint(nodes[j].attrs["group"]):
                        sites.append(FaultSpec(category, nodes[i].id,
                                               {"merge_with": nodes[j].id}))
                        done = True
                        break
                if done:
                    break
    elif category == "bad_partition":
        for n in g.nodes:
            if n.kind == "chunk" and int(n.attrs.get("parts", 1)) > 1:
                sites.append(FaultSpec(category, n.id, {}))
    elif category == "wrong_scaling":
        for n in g.nodes:
            if n.kind == "scale" and n.attrs.get("norm") == "global_batch":
                sites.append(FaultSpec(category, n.id, {"variant": "seed"}))
            elif n.kind == "all_reduce" and n.id.startswith("dpar."):
                sites.append(FaultSpec(category, n.id, {"variant": "avg"}))
    elif category == "shuffled_microbatch":
        lanes: dict[tuple, list[Node]] = {}
        for n in g.nodes:
            if n.kind not in ("mul", "div", "matmul", "dropout", "silu_grad"):
                continue
            if len(n.inputs) < 2:
                continue
            m = g.tensors[n.outputs[0]].microbatch
            if m is None or g.tensors[n.inputs[1]].microbatch is None:
                continue
            key = (n.kind, n.device, _origin(g, n.outputs[0]))
            lanes.setdefault(key, []).append(n)
        for key, nodes in sorted(lanes.items(), key=lambda kv: kv[1][0].id):
            if len(nodes) >= 2:
                sites.append(FaultSpec(category, nodes[0].id,
                                       {"variant": "cross", "peer": nodes[1].id}))
        for n in g.nodes:
            m = g.tensors[n.outputs[0]].microbatch if n.outputs else None
            if m is None or not n.inputs:
                continue
            desc = _same_lane_descendant(g, n)
            if desc is not None:
                sites.append(FaultSpec(category, n.id,
                                       {"variant": "cycle", "tensor": desc}))
                break  # one representative cycle site is plenty
    elif category == "dropped_microbatch":
        for n in g.nodes:
            if n.kind == "add" and n.id.startswith("mb.") and \
                    n.inputs[0] != n.inputs[1]:
                sites.append(FaultSpec(category, n.id, {}))
    elif category == "bad_slice":
        for tid, entry in plan.lineage.items():
            for i, s in enumerate(entry.shards):
                for a, (lo, hi) in enumerate(s.ranges):
                    if lo > 0:
                        sites.append(FaultSpec(category, tid,
                                               {"shard": i, "axis": a}))
                        break
                else:
                    continue
                break
    elif category == "extra_op":
        cons = g.consumers_map()
        for tid, t in g.tensors.items():
            if cons.get(tid) and t.dtype == "real" and not t.meta.get("mask"):
                sites.append(FaultSpec(category, tid, {}))
    else:
        raise PlanEqError(f"unknown fault category {category!r}")
    return sites


def _same_lane_descendant(g: Graph, n: Node) -> str | None:
    """A tensor downstream of n produced on the same device and microbatch."""
    m = g.tensors[n.outputs[0]].microbatch
    cons = g.consumers_map()
    frontier = list(n.outputs)
    seen = set(frontier)
    hops = 0
    while frontier and hops < 6:
        hops += 1
        nxt = []
        for tid in frontier:
            for cn in cons.get(tid, []):
                for out in cn.outputs:
                    if out in seen:
                        continue
                    seen.add(out)
                    t = g.tensors[out]
                    if t.device == n.device and t.microbatch == m and \
                            t.shape == g.tensors[n.inputs[0]].shape:
                        return out
                    nxt.append(out)
        frontier = nxt
    return None


# -- injection ----------------------------------------------------------------


def inject(plan: Plan, spec: FaultSpec) -> Plan:
    mutant = _clone(plan)
    g = mutant.parallel
    handler = {
        "missing_comm": _inj_missing_comm,
        "wrong_primitive": _inj_wrong_primitive,
        "wrong_group": _inj_wrong_group,
        "bad_partition": _inj_bad_partition,
        "wrong_scaling": _inj_wrong_scaling,
        "shuffled_microbatch": _inj_shuffled,
        "dropped_microbatch": _inj_dropped,
        "bad_slice": _inj_bad_slice,
        "extra_op": _inj_extra_op,
    }.get(spec.category)
    if handler is None:
        raise PlanEqError(f"unknown fault category {spec.category!r}")
    handler(mutant, g, spec)
    mutant.provenance = dict(mutant.provenance)
    mutant.provenance["fault"] = spec.to_dict()
    return mutant


def _node(g: Graph, nid: str) -> Node:
    for n in g.nodes:
        if n.id == nid:
            return n
    raise PlanEqError(f"fault site {nid!r} not found")


def _replace(g: Graph, nid: str, **kw):
    for i, n in enumerate(g.nodes):
        if n.id == nid:
            g.nodes[i] = Node(kw.get("id", n.id), kw.get("kind", n.kind),
                              tuple(kw.get("inputs", n.inputs)),
                              tuple(kw.get("outputs", n.outputs)),
                              kw.get("attrs", n.attrs), n.device, n.seq)
            return
    raise PlanEqError(f"fault site {nid!r} not found")


def _inj_missing_comm(plan: Plan, g: Graph, spec: FaultSpec):
    n = _node(g, spec.site)
    _drop_node(g, n.id)
    if spec.detail.get("variant") == "rewire":
        for src, dst in zip(n.inputs, n.outputs):
            _rewire(g, dst, src)
            _rewire_lineage(plan, dst, src)
            del g.tensors[dst]
    # "dangle" leaves the outputs producerless on purpose


def _inj_wrong_primitive(plan: Plan, g: Graph, spec: FaultSpec):
    n = _node(g, spec.site)
    attrs = dict(n.attrs)
    attrs.pop("op", None)
    attrs["axis"] = 0
    _replace(g, n.id, kind="all_gather", attrs=attrs)


def _inj_wrong_group(plan: Plan, g: Graph, spec: FaultSpec):
    a = _node(g, spec.site)
    b = _node(g, spec.detail["merge_with"])
    attrs = dict(a.attrs)
    attrs["group"] = list(a.attrs["group"]) + list(b.attrs["group"])
    _replace(g, a.id, inputs=list(a.inputs) + list(b.inputs),
             outputs=list(a.outputs) + list(b.outputs), attrs=attrs)
    _drop_node(g, b.id)


def _inj_bad_partition(plan: Plan, g: Graph, spec: FaultSpec):
    n = _node(g, spec.site)
    attrs = dict(n.attrs)
    attrs["index"] = (int(attrs["index"]) + 1) % int(attrs["parts"])
    _replace(g, n.id, attrs=attrs)


def _inj_wrong_scaling(plan: Plan, g: Graph, spec: FaultSpec):
    n = _node(g, spec.site)
    dp = max(int(plan.config.get("cfg", {}).get("dp", 1)), 2)
    if spec.detail.get("variant") == "seed":
        attrs = dict(n.attrs)
        attrs["factor"] = Fraction(attrs["factor"]) * dp
        _replace(g, n.id, attrs=attrs)
    else:  # insert gradient averaging after a replica all_reduce
        tid = n.outputs[0]
        _insert_scale(g, tid, Fraction(1, dp), "avg")


def _inj_shuffled(plan: Plan, g: Graph, spec: FaultSpec):
    n = _node(g, spec.site)
    if spec.detail.get("variant") == "cross":
        p = _node(g, spec.detail["peer"])
        ni, pi = list(n.inputs), list(p.inputs)
        ni[1], pi[1] = pi[1], ni[1]
        _replace(g, n.id, inputs=ni)
        _replace(g, p.id, inputs=pi)
    else:
        ni = list(n.inputs)
        ni[0] = spec.detail["tensor"]
        _replace(g, n.id, inputs=ni)


def _inj_dropped(plan: Plan, g: Graph, spec: FaultSpec):
    n = _node(g, spec.site)
    _replace(g, n.id, inputs=(n.inputs[0], n.inputs[0]))


def _inj_bad_slice(plan: Plan, g: Graph, spec: FaultSpec):
    entry = plan.lineage[spec.site]
    i = int(spec.detail["shard"])
    a = int(spec.detail["axis"])
    s = entry.shards[i]
    lo, hi = s.ranges[a]
    ranges = s.ranges[:a] + ((lo - 1, hi - 1),) + s.ranges[a + 1:]
    entry.shards = entry.shards[:i] + \
        (type(s)(tensor=s.tensor, ranges=ranges),) + entry.shards[i + 1:]


def _insert_scale(g: Graph, tid: str, factor: Fraction, tag: str):
    """Rescale the value of tid in place.

    The producer is rerouted to a fresh pre-image tensor and a scale node
    writes tid, so consumers, graph outputs, and lineage shards all observe
    the corrupted value. Graph inputs have no producer; there the consumers
    are rewired to a scaled copy instead.
    """
    t = g.tensors[tid]
    new = f"{tid}.{tag}"
    g.add_tensor(type(t)(id=new, shape=t.shape, role="intermediate", dtype=t.dtype,
                         device=t.device, microbatch=t.microbatch,
                         meta=dict(t.meta)))
    seq = max((n.seq for n in g.nodes if n.device == t.device), default=0) + 1
    prod = next((n for n in g.nodes if tid in n.outputs), None)
    if prod is not None:
        _replace(g, prod.id,
                 outputs=[new if x == tid else x for x in prod.outputs])
        src, dst = new, tid
    else:
        _rewire(g, tid, new)
        src, dst = tid, new
    g.add_node(Node(id=f"{tag}.{tid}", kind="scale", inputs=(src,), outputs=(dst,),
                    attrs={"factor": factor}, device=t.device, seq=seq))


def _inj_extra_op(plan: Plan, g: Graph, spec: FaultSpec):
    _insert_scale(g, spec.site, Fraction(2), "xop")


def random_structural_fault(plan: Plan, rng: random.Random) -> Plan:
    """One seeded, loadable, value-level corruption for the soundness corpus."""
    order = ["missing_comm", "wrong_group", "bad_partition", "wrong_scaling",
             "dropped_microbatch", "shuffled_microbatch", "bad_slice", "extra_op"]
    rng.shuffle(order)
    for category in order:
        sites = list_sites(plan, category)
        if category == "missing_comm":
            sites = [s for s in sites if s.detail.get("variant") == "rewire"]
        if category == "shuffled_microbatch":
            sites = [s for s in sites if s.detail.get("variant") == "cross"]
        if sites:
            return inject(plan, rng.choice(sites))
    raise PlanEqError("no fault site available in this plan")
