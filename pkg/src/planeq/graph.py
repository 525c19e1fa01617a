"""Dataflow graph IR shared by the logical and parallel sides.

A graph is a flat SSA structure: tensors are named values with a static shape,
nodes consume and produce tensor names. Parallel graphs additionally pin every
node and tensor to a device and (optionally) a microbatch index.

Lineage maps each logical tensor worth checking to the parallel shards that
reconstruct it. Shards carry half-open index ranges per dimension. Shards with
identical ranges form a replica/partial group: in "full" mode every group
member must equal the logical slice, in "partial" mode the group members must
sum to it. Distinct range tuples must tile the logical index box exactly.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from typing import Any, Iterable

from .errors import CycleError, DanglingTensorError, PlanFormatError

Shape = tuple[int, ...]
Ranges = tuple[tuple[int, int], ...]


@dataclass
class Tensor:
    id: str
    shape: Shape
    role: str = "intermediate"  # data_input | weight | intermediate
    dtype: str = "real"  # real | int
    device: int | None = None
    microbatch: int | None = None
    meta: dict[str, Any] = field(default_factory=dict)

    def nelems(self) -> int:
        n = 1
        for d in self.shape:
            n *= d
        return n


@dataclass
class Node:
    id: str
    kind: str
    inputs: tuple[str, ...]
    outputs: tuple[str, ...]
    attrs: dict[str, Any] = field(default_factory=dict)
    device: int | None = None
    seq: int = 0


@dataclass
class Graph:
    name: str = "g"
    tensors: dict[str, Tensor] = field(default_factory=dict)
    nodes: list[Node] = field(default_factory=list)
    inputs: list[str] = field(default_factory=list)
    outputs: list[str] = field(default_factory=list)
    config: dict[str, Any] = field(default_factory=dict)

    def add_tensor(self, t: Tensor) -> Tensor:
        if t.id in self.tensors:
            raise PlanFormatError(f"duplicate tensor id {t.id!r}")
        self.tensors[t.id] = t
        return t

    def add_node(self, n: Node) -> Node:
        for out in n.outputs:
            if out not in self.tensors:
                raise PlanFormatError(f"node {n.id!r} produces undeclared tensor {out!r}")
        self.nodes.append(n)
        return n

    def producer_map(self) -> dict[str, Node]:
        prod: dict[str, Node] = {}
        for n in self.nodes:
            for out in n.outputs:
                if out in prod:
                    raise PlanFormatError(f"tensor {out!r} produced twice ({prod[out].id}, {n.id})")
                prod[out] = n
        return prod

    def consumers_map(self) -> dict[str, list[Node]]:
        cons: dict[str, list[Node]] = {t: [] for t in self.tensors}
        for n in self.nodes:
            for i in n.inputs:
                cons.setdefault(i, []).append(n)
        return cons

    def shape(self, tid: str) -> Shape:
        return self.tensors[tid].shape


def topo_sort(graph: Graph, nodes: Iterable[Node] | None = None) -> list[Node]:
    """Kahn topological sort, deterministic.

    Ready ties break by (device, seq, id) so the schedule is stable across
    runs. Raises DanglingTensorError for consumed-but-never-produced tensors
    that are not graph inputs, CycleError when nodes remain unordered.
    """
    pool = list(graph.nodes) if nodes is None else list(nodes)
    prod: dict[str, Node] = {}
    for n in pool:
        for out in n.outputs:
            prod[out] = n
    indeg: dict[str, int] = {}
    succ: dict[str, list[str]] = {n.id: [] for n in pool}
    byid = {n.id: n for n in pool}
    avail = set(graph.inputs)
    # tensors produced outside the pool count as available boundary values
    pool_out = {out for n in pool for out in n.outputs}
    all_prod = {out for n in graph.nodes for out in n.outputs}
    for n in pool:
        deg = 0
        for i in n.inputs:
            if i in avail:
                continue
            if i in pool_out:
                deg += 1
                succ[prod[i].id].append(n.id)
            elif i in all_prod:
                continue  # produced by a node outside this slice: boundary
            else:
                raise DanglingTensorError(i, n.id)
        indeg[n.id] = deg

    def key(n: Node) -> tuple:
        return (n.device if n.device is not None else -1, n.seq, n.id)

    heap = [(key(n), n.id) for n in pool if indeg[n.id] == 0]
    heapq.heapify(heap)
    order: list[Node] = []
    while heap:
        _, nid = heapq.heappop(heap)
        n = byid[nid]
        order.append(n)
        for sid in succ[nid]:
            indeg[sid] -= 1
            if indeg[sid] == 0:
                heapq.heappush(heap, (key(byid[sid]), sid))
    if len(order) != len(pool):
        raise CycleError([nid for nid, d in indeg.items() if d > 0])
    return order


# ---------------------------------------------------------------------------
# Lineage


@dataclass(frozen=True)
class Shard:
    tensor: str
    ranges: Ranges


@dataclass
class LineageEntry:
    logical: str
    mode: str  # full | partial
    shards: tuple[Shard, ...]

    def groups(self) -> dict[Ranges, list[Shard]]:
        out: dict[Ranges, list[Shard]] = {}
        for s in self.shards:
            out.setdefault(s.ranges, []).append(s)
        return out


Lineage = dict[str, LineageEntry]


def range_extents(ranges: Ranges) -> Shape:
    return tuple(hi - lo for lo, hi in ranges)


def ranges_volume(ranges: Ranges) -> int:
    v = 1
    for lo, hi in ranges:
        v *= hi - lo
    return v


def entry_tiles_exactly(entry: LineageEntry, shape: Shape) -> bool:
    """Distinct range tuples must disjointly cover the full index box."""
    distinct = list(entry.groups().keys())
    for rs in distinct:
        if len(rs) != len(shape):
            return False
        for (lo, hi), d in zip(rs, shape):
            if not (0 <= lo < hi <= d):
                return False
    total = 1
    for d in shape:
        total *= d
    cover = 0
    for rs in distinct:
        cover += ranges_volume(rs)
    if cover != total:
        return False
    # pairwise disjointness: boxes overlap iff they overlap on every axis
    for i in range(len(distinct)):
        for j in range(i + 1, len(distinct)):
            if all(lo1 < hi2 and lo2 < hi1
                   for (lo1, hi1), (lo2, hi2) in zip(distinct[i], distinct[j])):
                return False
    return True


def entry_axis_intervals(entry: LineageEntry, shape: Shape) -> list[list[tuple[int, int]]] | None:
    """Per-axis sorted interval lists when the tiling is a grid, else None.

    A grid tiling is the cartesian product of per-axis interval partitions;
    every tiling the parallelizer emits has this form.
    """
    ndim = len(shape)
    axes: list[set[tuple[int, int]]] = [set() for _ in range(ndim)]
    distinct = list(entry.groups().keys())
    for rs in distinct:
        if len(rs) != ndim:
            return None
        for a, iv in enumerate(rs):
            axes[a].add(iv)
    out: list[list[tuple[int, int]]] = []
    for a in range(ndim):
        ivs = sorted(axes[a])
        pos = 0
        for lo, hi in ivs:
            if lo != pos or hi <= lo:
                return None
            pos = hi
        if pos != shape[a]:
            return None
        out.append(ivs)
    # grid means every combination is present exactly once
    expect = 1
    for ivs in out:
        expect *= len(ivs)
    if len(distinct) != expect:
        return None
    return out


def validate_lineage(logical: Graph, parallel: Graph, lineage: Lineage) -> list[str]:
    """Structural validation; returns a list of human-readable violations.

    Range-tiling problems are reported but callers may choose to treat them as
    refutable obligations rather than load errors.
    """
    problems: list[str] = []
    for tid, entry in lineage.items():
        if tid not in logical.tensors:
            problems.append(f"lineage references unknown logical tensor {tid!r}")
            continue
        if entry.mode not in ("full", "partial"):
            problems.append(f"{tid}: bad mode {entry.mode!r}")
        shape = logical.tensors[tid].shape
        for s in entry.shards:
            if s.tensor not in parallel.tensors:
                problems.append(f"{tid}: shard tensor {s.tensor!r} not in parallel graph")
                continue
            pshape = parallel.tensors[s.tensor].shape
            if range_extents(s.ranges) != pshape:
                problems.append(
                    f"{tid}: shard {s.tensor} shape {pshape} != range extents "
                    f"{range_extents(s.ranges)}")
        if not entry_tiles_exactly(entry, shape):
            problems.append(f"{tid}: shard ranges do not tile the logical shape {shape}")
    return problems


def flat_index(idx: tuple[int, ...], shape: Shape) -> int:
    f = 0
    for i, d in zip(idx, shape):
        f = f * d + i
    return f


def unflatten(f: int, shape: Shape) -> tuple[int, ...]:
    idx = []
    for d in reversed(shape):
        idx.append(f % d)
        f //= d
    return tuple(reversed(idx))


def iter_box(ranges: Ranges):
    """Yield every multi-index inside the half-open box."""
    if not ranges:
        yield ()
        return
    def rec(a: int, prefix: tuple[int, ...]):
        if a == len(ranges):
            yield prefix
            return
        lo, hi = ranges[a]
        for v in range(lo, hi):
            yield from rec(a + 1, prefix + (v,))
    yield from rec(0, ())


def backward_slice(graph: Graph, roots: Iterable[str], stop: set[str]) -> tuple[list[Node], set[str]]:
    """Nodes reachable backwards from roots, stopping at `stop` tensors.

    Returns (nodes in stable graph order, boundary tensor ids actually hit).
    Graph inputs always act as boundaries.
    """
    prod = graph.producer_map()
    seen_t: set[str] = set()
    picked: set[str] = set()
    boundary: set[str] = set()
    stack = list(roots)
    while stack:
        tid = stack.pop()
        if tid in seen_t:
            continue
        seen_t.add(tid)
        if tid in stop or tid not in prod:
            if tid in stop or tid in graph.inputs:
                boundary.add(tid)
            continue
        n = prod[tid]
        if n.id not in picked:
            picked.add(n.id)
            stack.extend(n.inputs)
    nodes = [n for n in graph.nodes if n.id in picked]
    return nodes, boundary
