"""Plan file format: JSON round-trip for (logical graph, parallel graph, lineage).

Format version 1. Rational attributes are serialized as "p/q" strings so the
files stay exact. Writers emit sorted keys and a trailing newline so identical
pipelines produce byte-identical files.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any

from .errors import PlanFormatError, SchemaVersionError
from .graph import Graph, Lineage, LineageEntry, Node, Shard, Tensor

FORMAT_VERSION = 1

_RATIONAL_ATTRS = ("factor", "value", "addend")


@dataclass
class Plan:
    logical: Graph
    parallel: Graph | None = None
    lineage: Lineage | None = None
    config: dict[str, Any] = field(default_factory=dict)
    provenance: dict[str, Any] = field(default_factory=dict)


def _attrs_out(attrs: dict[str, Any]) -> dict[str, Any]:
    out = {}
    for k, v in attrs.items():
        if k in _RATIONAL_ATTRS and isinstance(v, Fraction):
            out[k] = str(v)
        elif isinstance(v, tuple):
            out[k] = list(v)
        else:
            out[k] = v
    return out


def _attrs_in(attrs: dict[str, Any]) -> dict[str, Any]:
    out = {}
    for k, v in attrs.items():
        if k in _RATIONAL_ATTRS and isinstance(v, str):
            out[k] = Fraction(v)
        else:
            out[k] = v
    return out


def graph_to_dict(g: Graph) -> dict[str, Any]:
    return {
        "name": g.name,
        "inputs": list(g.inputs),
        "outputs": list(g.outputs),
        "config": g.config,
        "tensors": [
            {
                "id": t.id,
                "shape": list(t.shape),
                "role": t.role,
                "dtype": t.dtype,
                "device": t.device,
                "microbatch": t.microbatch,
                "meta": t.meta,
            }
            for t in g.tensors.values()
        ],
        "nodes": [
            {
                "id": n.id,
                "kind": n.kind,
                "inputs": list(n.inputs),
                "outputs": list(n.outputs),
                "attrs": _attrs_out(n.attrs),
                "device": n.device,
                "seq": n.seq,
            }
            for n in g.nodes
        ],
    }


def graph_from_dict(d: dict[str, Any]) -> Graph:
    try:
        g = Graph(name=d.get("name", "g"), inputs=list(d["inputs"]),
                  outputs=list(d["outputs"]), config=d.get("config", {}))
        for td in d["tensors"]:
            g.add_tensor(Tensor(
                id=td["id"], shape=tuple(int(x) for x in td["shape"]),
                role=td.get("role", "intermediate"), dtype=td.get("dtype", "real"),
                device=td.get("device"), microbatch=td.get("microbatch"),
                meta=td.get("meta", {})))
        for nd in d["nodes"]:
            g.add_node(Node(
                id=nd["id"], kind=nd["kind"], inputs=tuple(nd["inputs"]),
                outputs=tuple(nd["outputs"]), attrs=_attrs_in(nd.get("attrs", {})),
                device=nd.get("device"), seq=nd.get("seq", 0)))
    except (KeyError, TypeError, ValueError) as e:
        raise PlanFormatError(f"malformed graph object: {e}") from e
    missing = [t for t in g.inputs + g.outputs if t not in g.tensors]
    if missing:
        raise PlanFormatError(f"graph interface names unknown tensors: {missing}")
    return g


def lineage_to_list(lineage: Lineage) -> list[dict[str, Any]]:
    return [
        {
            "logical": e.logical,
            "mode": e.mode,
            "shards": [{"tensor": s.tensor, "ranges": [list(r) for r in s.ranges]}
                       for s in e.shards],
        }
        for e in lineage.values()
    ]


def lineage_from_list(items: list[dict[str, Any]]) -> Lineage:
    out: Lineage = {}
    try:
        for d in items:
            shards = tuple(
                Shard(tensor=s["tensor"],
                      ranges=tuple((int(lo), int(hi)) for lo, hi in s["ranges"]))
                for s in d["shards"])
            if d["logical"] in out:
                raise PlanFormatError(f"duplicate lineage entry for {d['logical']!r}")
            out[d["logical"]] = LineageEntry(logical=d["logical"], mode=d["mode"], shards=shards)
    except (KeyError, TypeError, ValueError) as e:
        raise PlanFormatError(f"malformed lineage: {e}") from e
    return out


def plan_to_dict(plan: Plan) -> dict[str, Any]:
    return {
        "version": FORMAT_VERSION,
        "config": plan.config,
        "logical": graph_to_dict(plan.logical),
        "parallel": graph_to_dict(plan.parallel) if plan.parallel else None,
        "lineage": lineage_to_list(plan.lineage) if plan.lineage is not None else None,
        "provenance": plan.provenance,
    }


def plan_from_dict(d: dict[str, Any]) -> Plan:
    if not isinstance(d, dict) or "version" not in d:
        raise PlanFormatError("not a plan object (missing version)")
    if d["version"] != FORMAT_VERSION:
        raise SchemaVersionError(f"unsupported plan version {d['version']!r}")
    if "logical" not in d or d["logical"] is None:
        raise PlanFormatError("plan has no logical graph")
    return Plan(
        logical=graph_from_dict(d["logical"]),
        parallel=graph_from_dict(d["parallel"]) if d.get("parallel") else None,
        lineage=lineage_from_list(d["lineage"]) if d.get("lineage") is not None else None,
        config=d.get("config", {}),
        provenance=d.get("provenance", {}),
    )


def dumps(plan: Plan) -> str:
    return json.dumps(plan_to_dict(plan), sort_keys=True, indent=1) + "\n"


def loads(text: str) -> Plan:
    try:
        d = json.loads(text)
    except json.JSONDecodeError as e:
        raise PlanFormatError(f"invalid JSON: {e}") from e
    return plan_from_dict(d)


def save(plan: Plan, path) -> None:
    with open(path, "w") as f:
        f.write(dumps(plan))


def load(path) -> Plan:
    with open(path) as f:
        return loads(f.read())
