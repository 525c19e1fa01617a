"""Reference mini-parallelizer.

Lowers one completed logical graph onto a dp x pp x tp device grid with nm
microbatches per replica, emitting an explicit per-device parallel graph plus
the lineage map tying every checkpointed logical tensor to its shards.

Placement is propagated per tensor. Batch tensors are row-sliced across
(replica, microbatch); the sliced axis is tracked through shape ops so
backward-pass transposes keep working. Weights are column- or row-split
across the tensor group depending on whether their consumer's activation
arrives contraction-sliced; row-split matmuls produce partial results
resolved by an eager all_reduce over the tensor group.

Batch folds (reductions over the batch axis, matmul contractions over it,
and embedding-table scatters) aggregate with: local fold, microbatch add
tree, then an all_reduce across replicas. Normalization constants are kept
exactly as the logical graph wrote them (completion folds any 1/N into the
scale node marked norm="global_batch"), so every fold is a plain sum and
aggregation is exact; there is no per-replica rescaling anywhere. The
popular local-mean convention (dp-scaled constants plus gradient averaging)
is representable too, and it is exactly what the wrong_scaling fault
category injects.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

from .completion import LossSpec
from .errors import PlanEqError, UnsupportedOperator
from .graph import (Graph, Lineage, LineageEntry, Node, Shape, Shard, Tensor,
                    topo_sort)
from .plan import Plan


@dataclass(frozen=True)
class ParallelConfig:
    dp: int = 1
    tp: int = 1
    pp: int = 1
    nm: int = 1

    def device(self, r: int, s: int, c: int) -> int:
        return (r * self.pp + s) * self.tp + c

    def coords(self, dev: int) -> tuple[int, int, int]:
        c = dev % self.tp
        rs = dev // self.tp
        return rs // self.pp, rs % self.pp, c

    @property
    def world(self) -> int:
        return self.dp * self.pp * self.tp

    def to_dict(self) -> dict:
        return {"dp": self.dp, "tp": self.tp, "pp": self.pp, "nm": self.nm}


def config_from_dict(d: dict) -> ParallelConfig:
    return ParallelConfig(dp=int(d.get("dp", 1)), tp=int(d.get("tp", 1)),
                          pp=int(d.get("pp", 1)), nm=int(d.get("nm", 1)))


@dataclass
class _Placed:
    stage: int  # -1 means present on every stage
    batch: int | None  # axis sliced across (replica, microbatch), if any
    tp_axis: int | None
    ids: dict[tuple[int, int | None], str] = field(default_factory=dict)  # (dev, m) -> tid


class _Lowering:
    def __init__(self, logical: Graph, cfg: ParallelConfig, loss_kind: str,
                 lineage_set: list[str]):
        self.lg = logical
        self.cfg = cfg
        self.loss_kind = loss_kind
        self.lineage_order = lineage_set
        self.lineage_set = set(lineage_set)
        self.pg = Graph(name=logical.name + ".par")
        self.P: dict[str, _Placed] = {}
        self.moved: dict[tuple[str, int], _Placed] = {}
        self.chunked: dict[tuple[str, int], _Placed] = {}
        self.partial_entries: dict[str, LineageEntry] = {}
        self.seq: dict[int, int] = {}
        self._uniq = 0
        self.cons = logical.consumers_map()
        blocks = sorted({n.attrs.get("pp_block", 0) for n in logical.nodes})
        if cfg.pp > len(blocks):
            raise UnsupportedOperator(
                f"pipeline degree {cfg.pp} exceeds the {len(blocks)} layer blocks")
        self.stage_of_block = {b: min(cfg.pp - 1, i * cfg.pp // len(blocks))
                               for i, b in enumerate(blocks)}
        self.has_batch = any(logical.tensors[t].meta.get("batch")
                             for t in logical.inputs)
        self.batch_full = self._batch_extent()
        per = cfg.dp * cfg.nm
        if self.batch_full % per != 0:
            raise UnsupportedOperator(
                f"batch extent {self.batch_full} not divisible by dp*nm={per}")
        self.rows = self.batch_full // per

    # -- small helpers -------------------------------------------------------

    def _batch_extent(self) -> int:
        for tid in self.lg.inputs:
            t = self.lg.tensors[tid]
            if t.meta.get("batch"):
                return t.shape[0]
        return self.cfg.dp * self.cfg.nm  # degenerate: no batch inputs

    def _next_seq(self, dev: int) -> int:
        self.seq[dev] = self.seq.get(dev, 0) + 1
        return self.seq[dev]

    def new_tensor(self, base: str, shape: Shape, dev: int, m: int | None,
                   role: str = "intermediate", dtype: str = "real",
                   meta: dict | None = None) -> str:
        tid = f"{base}@{dev}" + (f".m{m}" if m is not None else "")
        if tid in self.pg.tensors:
            self._uniq += 1
            tid = f"{tid}.u{self._uniq}"
        self.pg.add_tensor(Tensor(id=tid, shape=tuple(shape), role=role, dtype=dtype,
                                  device=dev, microbatch=m, meta=meta or {}))
        return tid

    def emit(self, kind: str, dev: int, inputs: list[str], outputs: list[str],
             attrs: dict, base: str, m: int | None) -> Node:
        nid = f"{base}@{dev}" + (f".m{m}" if m is not None else "")
        self._uniq += 1
        node = Node(id=f"{nid}.n{self._uniq}", kind=kind, inputs=tuple(inputs),
                    outputs=tuple(outputs), attrs=attrs, device=dev,
                    seq=self._next_seq(dev))
        self.pg.add_node(node)
        return node

    def local_shape(self, tid: str, p: _Placed) -> Shape:
        shape = list(self.lg.shape(tid))
        if p.batch is not None:
            shape[p.batch] = self.rows
        if p.tp_axis is not None and self.cfg.tp > 1:
            shape[p.tp_axis] //= self.cfg.tp
        return tuple(shape)

    def copy_ranges(self, tid: str, p: _Placed, dev: int, m: int | None) -> tuple:
        full = self.lg.shape(tid)
        r, _s, c = self.cfg.coords(dev)
        out = []
        for a, d in enumerate(full):
            if a == p.batch:
                ri = r * self.cfg.nm + (m or 0)
                out.append((ri * self.rows, (ri + 1) * self.rows))
            elif a == p.tp_axis and self.cfg.tp > 1:
                w = d // self.cfg.tp
                out.append((c * w, (c + 1) * w))
            else:
                out.append((0, d))
        return tuple(out)

    def mb_keys(self, batched: bool) -> list[int | None]:
        return list(range(self.cfg.nm)) if batched else [None]

    def tp_group(self, r: int, s: int) -> list[int]:
        return [self.cfg.device(r, s, c) for c in range(self.cfg.tp)]

    def dp_group(self, s: int, c: int) -> list[int]:
        return [self.cfg.device(r, s, c) for r in range(self.cfg.dp)]

    # -- placement of graph inputs -------------------------------------------

    def node_stage(self, node: Node) -> int:
        blk = node.attrs.get("pp_block")
        if blk is not None:
            return self.stage_of_block[blk]
        for tid in node.inputs:
            if tid in self.P:
                st = self.P[tid].stage
                if st >= 0:
                    return st
        return 0

    def place_input(self, tid: str):
        t = self.lg.tensors[tid]
        consumers = self.cons.get(tid, [])
        stage = self.node_stage(consumers[0]) if consumers else 0
        batch = 0 if t.meta.get("batch") else None
        p = _Placed(stage=stage, batch=batch, tp_axis=None)
        shape = self.local_shape(tid, p)
        for r in range(self.cfg.dp):
            for m in self.mb_keys(batch is not None):
                for c in range(self.cfg.tp):
                    dev = self.cfg.device(r, stage, c)
                    pid = self.new_tensor(tid, shape, dev, m, role=t.role,
                                          dtype=t.dtype,
                                          meta={"from": tid, **t.meta})
                    p.ids[(dev, m)] = pid
                    self.pg.inputs.append(pid)
        self.P[tid] = p

    def place_weight(self, tid: str, tp_axis: int | None, stage: int):
        t = self.lg.tensors[tid]
        if self.cfg.tp == 1:
            tp_axis = None
        if tp_axis is not None and t.shape[tp_axis] % self.cfg.tp != 0:
            raise UnsupportedOperator(
                f"weight {tid} axis {tp_axis} extent {t.shape[tp_axis]} "
                f"not divisible by tp={self.cfg.tp}")
        p = _Placed(stage=stage, batch=None, tp_axis=tp_axis)
        shape = self.local_shape(tid, p)
        for r in range(self.cfg.dp):
            for c in range(self.cfg.tp):
                dev = self.cfg.device(r, stage, c)
                pid = self.new_tensor(tid, shape, dev, None, role="weight",
                                      dtype=t.dtype, meta={"from": tid})
                p.ids[(dev, None)] = pid
                self.pg.inputs.append(pid)
        self.P[tid] = p

    # -- stage alignment and tensor-group alignment ----------------------------

    def on_stage(self, tid: str, stage: int) -> _Placed:
        if tid not in self.P and self.lg.tensors[tid].role == "weight":
            self.place_weight(tid, None, stage)
        p = self.P[tid]
        if p.stage in (stage, -1):
            return p
        key = (tid, stage)
        if key in self.moved:
            return self.moved[key]
        p2 = _Placed(stage=stage, batch=p.batch, tp_axis=p.tp_axis)
        shape = self.local_shape(tid, p)
        for (dev, m), pid in sorted(p.ids.items()):
            r, _s, c = self.cfg.coords(dev)
            nd = self.cfg.device(r, stage, c)
            nid = self.new_tensor(f"{tid}.s{stage}", shape, nd, m,
                                  meta={"from": tid, "moved": True})
            self.emit("move", nd, [pid], [nid], {"src": dev, "dst": nd},
                      f"mv.{tid}.s{stage}", m)
            p2.ids[(nd, m)] = nid
        self.moved[key] = p2
        return p2

    def chunk_to(self, tid: str, p: _Placed, axis: int) -> _Placed:
        """Slice a replicated-over-c tensor along `axis` so device c keeps its share."""
        key = (tid, axis)
        if key in self.chunked:
            return self.chunked[key]
        p2 = _Placed(stage=p.stage, batch=p.batch, tp_axis=axis)
        for (dev, m), pid in sorted(p.ids.items()):
            _r, _s, c = self.cfg.coords(dev)
            shape = list(self.pg.shape(pid))
            if shape[axis] % self.cfg.tp != 0:
                raise UnsupportedOperator(
                    f"cannot chunk {tid} axis {axis} extent {shape[axis]} "
                    f"into tp={self.cfg.tp} parts")
            shape[axis] //= self.cfg.tp
            nid = self.new_tensor(f"{tid}.ck{axis}", tuple(shape), dev, m,
                                  meta={"from": tid})
            self.emit("chunk", dev, [pid], [nid],
                      {"axis": axis, "parts": self.cfg.tp, "index": c,
                       "chunk_key": f"{tid}.{axis}"},
                      f"ck.{tid}.{axis}", m)
            p2.ids[(dev, m)] = nid
        self.chunked[key] = p2
        return p2

    def fetch(self, p: _Placed, r: int, m: int | None, c: int, stage: int) -> str:
        dev = self.cfg.device(r, p.stage if p.stage != -1 else stage, c)
        key_m = m if p.batch is not None else None
        return p.ids[(dev, key_m)]

    # -- main walk -------------------------------------------------------------

    def run(self) -> Plan:
        for tid in self.lg.inputs:
            t = self.lg.tensors[tid]
            if t.role != "weight":
                self.place_input(tid)
        for node in topo_sort(self.lg):
            stage = self.node_stage(node)
            if node.kind == "matmul":
                self.rule_matmul(node, stage)
            elif node.kind in ("sum", "mean") and self._is_batch_fold(node):
                self.rule_batch_fold(node, stage)
            elif node.kind == "embedding_grad":
                self.rule_batch_fold(node, stage)
            elif node.kind == "gnorm_sq":
                self.rule_gnorm(node)
            else:
                self.rule_simd(node, stage)
        lineage = self.build_lineage()
        for tid in self.lg.outputs:
            p = self.P[tid]
            for (_dev, _m), pid in sorted(p.ids.items()):
                self.pg.outputs.append(pid)
        self.pg.config = {"cfg": self.cfg.to_dict(), "loss_kind": self.loss_kind}
        return Plan(logical=self.lg, parallel=self.pg, lineage=lineage,
                    config={"cfg": self.cfg.to_dict(), "loss_kind": self.loss_kind})

    @staticmethod
    def _axes(node: Node, rank: int) -> list[int]:
        axes = node.attrs.get("axes")
        if axes is None:
            return list(range(rank))
        return sorted(a % rank for a in axes)

    def _is_batch_fold(self, node: Node) -> bool:
        p = self.P[node.inputs[0]]
        if p.batch is None:
            return False
        axes = self._axes(node, len(self.lg.shape(node.inputs[0])))
        return p.batch in axes and not node.attrs.get("keepdims", False)

    # -- SIMD rule: everything elementwise or shape-only ------------------------

    def rule_simd(self, node: Node, stage: int):
        cfg = self.cfg
        ins = list(node.inputs)
        ps = [self.on_stage(tid, stage) for tid in ins]
        out = node.outputs[0]
        out_full = self.lg.shape(out)
        in_fulls = [self.lg.shape(t) for t in ins]

        batch = self._map_out_batch(node, ps, in_fulls)
        if batch is None and node.kind == "expand" and node.attrs.get("rebatch") \
                and self.has_batch and node.attrs["shape"][0] == self.batch_full:
            batch = 0  # loss backward re-broadcasts over the folded batch

        # Settle on one tensor-group slicing for the inputs.
        want: int | None = None
        for p, full in zip(ps, in_fulls):
            if p.tp_axis is not None and len(full) == len(out_full):
                if want is not None and want != p.tp_axis:
                    raise UnsupportedOperator(
                        f"{node.id}: inputs sliced on different axes")
                want = p.tp_axis
        if want is not None and cfg.tp > 1:
            for i, (p, full) in enumerate(zip(ps, in_fulls)):
                if p.tp_axis is None and len(full) == len(out_full) and \
                        full[want] == out_full[want] and full[want] > 1:
                    ps[i] = self.chunk_to(ins[i], p, want)

        out_tp, tp_reduced = self._map_out_tp(node, ps, in_fulls, out_full)
        out_p = _Placed(stage=stage, batch=batch, tp_axis=out_tp)
        loc_out = self.local_shape(out, out_p)

        for r in range(cfg.dp):
            for m in self.mb_keys(batch is not None):
                pre: dict[int, str] = {}
                for c in range(cfg.tp):
                    dev = cfg.device(r, stage, c)
                    in_ids = [self.fetch(p, r, m, c, stage) for p in ps]
                    attrs = self._local_attrs(node, batch, out_tp)
                    if tp_reduced:
                        oid = self.new_tensor(out + ".loc", loc_out, dev, m,
                                              meta={"from": out})
                        pre[c] = oid
                    else:
                        oid = self.new_tensor(out, loc_out, dev, m,
                                              meta={"from": out})
                        out_p.ids[(dev, m)] = oid
                    self.emit(node.kind, dev, in_ids, [oid], attrs, node.id, m)
                if tp_reduced:
                    self._tp_allreduce(node.id, out, pre, out_p, loc_out, r, m, stage)
        self.P[out] = out_p

    def _tp_allreduce(self, base: str, out: str, pre: dict[int, str],
                      out_p: _Placed, loc_out: Shape, r: int, m: int | None,
                      stage: int) -> dict[int, str]:
        cfg = self.cfg
        if cfg.tp == 1:
            out_p.ids[(cfg.device(r, stage, 0), m)] = pre[0]
            return dict(pre)
        group = self.tp_group(r, stage)
        outs, got = [], {}
        for c in range(cfg.tp):
            dev = cfg.device(r, stage, c)
            oid = self.new_tensor(out, loc_out, dev, m, meta={"from": out})
            out_p.ids[(dev, m)] = oid
            got[c] = oid
            outs.append(oid)
        self.emit("all_reduce", group[0], [pre[c] for c in range(cfg.tp)], outs,
                  {"group": group, "op": "sum"}, f"ar.{base}", m)
        return got

    def _map_out_batch(self, node: Node, ps: list[_Placed],
                       in_fulls: list[Shape]) -> int | None:
        kind = node.kind
        src = None
        for p in ps:
            if p.batch is not None:
                if src is not None and src != p.batch:
                    raise UnsupportedOperator(
                        f"{node.id}: inputs batch-sliced on different axes")
                src = p.batch
        if src is None:
            return None
        if kind == "transpose":
            perm = tuple(int(x) for x in node.attrs["perm"])
            return perm.index(src)
        if kind in ("view", "expand"):
            if node.attrs["shape"][src] != in_fulls[0][src] or src != 0:
                raise UnsupportedOperator(
                    f"{node.kind} {node.id} reshapes the batch axis")
            return src
        if kind in ("sum", "mean"):
            axes = self._axes(node, len(in_fulls[0]))
            if src in axes:
                raise UnsupportedOperator(f"{node.id}: batch fold in SIMD rule")
            if node.attrs.get("keepdims", False):
                return src
            return src - sum(1 for a in axes if a < src)
        return src

    def _map_out_tp(self, node: Node, ps: list[_Placed], in_fulls: list[Shape],
                    out_full: Shape) -> tuple[int | None, bool]:
        """Output tensor-group axis and whether the sliced axis gets reduced."""
        kind = node.kind
        p0 = ps[0] if ps else None
        if kind in ("full", "create_mask"):
            return None, False
        if kind == "embedding":
            if ps[0].tp_axis is not None:
                raise UnsupportedOperator(f"{node.id}: sliced embedding table")
            return None, False
        if kind == "view":
            if p0.tp_axis is None:
                return None, False
            o, _w = self._view_axis_map(in_fulls[0], out_full, p0.tp_axis)
            return o, False
        if kind == "transpose":
            if p0.tp_axis is None:
                return None, False
            perm = tuple(int(p) for p in node.attrs["perm"])
            return perm.index(p0.tp_axis), False
        if kind == "expand":
            return p0.tp_axis, False
        if kind in ("sum", "mean"):
            axes = self._axes(node, len(in_fulls[0]))
            if p0.tp_axis is not None and p0.tp_axis in axes:
                return None, True
            if p0.tp_axis is None:
                return None, False
            if node.attrs.get("keepdims", False):
                return p0.tp_axis, False
            return p0.tp_axis - sum(1 for a in axes if a < p0.tp_axis), False
        if kind == "softmax":
            ax = node.attrs.get("axis", -1) % len(in_fulls[0])
            if p0.tp_axis == ax:
                raise UnsupportedOperator(f"{node.id}: softmax along the sliced axis")
            return p0.tp_axis, False
        # elementwise family: inputs were aligned above, pick the sliced one
        for p, full in zip(ps, in_fulls):
            if p.tp_axis is not None and len(full) == len(out_full):
                return p.tp_axis, False
        return None, False

    def _view_axis_map(self, in_full: Shape, out_full: Shape, a: int) -> tuple[int, int]:
        """Map sliced input axis `a` through a row-major regrouping.

        Returns (out_axis, local width of that axis). The sliced axis must be
        the leading axis of its factor group and the matching output axis must
        split evenly, otherwise the layout is not expressible as a slice.
        """
        groups = []
        i = j = 0
        while i < len(in_full) and j < len(out_full):
            ia, jb = [i], [j]
            pa, pb = in_full[i], out_full[j]
            while pa != pb:
                if pa < pb:
                    i += 1
                    ia.append(i)
                    pa *= in_full[i]
                else:
                    j += 1
                    jb.append(j)
                    pb *= out_full[j]
            groups.append((ia, jb))
            i += 1
            j += 1
        if i < len(in_full) or j < len(out_full):  # trailing extent-1 axes
            groups.append((list(range(i, len(in_full))),
                           list(range(j, len(out_full)))))
        for ia, jb in groups:
            if a in ia:
                if a != ia[0] or not jb:
                    raise UnsupportedOperator(
                        "sliced axis is not the leading factor of its view group")
                o = jb[0]
                if out_full[o] % self.cfg.tp != 0:
                    raise UnsupportedOperator(
                        f"view target axis {o} extent {out_full[o]} not "
                        f"divisible by tp={self.cfg.tp}")
                return o, out_full[o] // self.cfg.tp
        raise UnsupportedOperator("sliced axis lost by view regrouping")

    def _local_attrs(self, node: Node, out_batch: int | None,
                     out_tp: int | None) -> dict:
        attrs = dict(node.attrs)
        kind = node.kind
        if kind in ("view", "expand"):
            tgt = [int(d) for d in node.attrs["shape"]]
            if out_batch is not None:
                tgt[out_batch] = self.rows
            if out_tp is not None and self.cfg.tp > 1:
                tgt[out_tp] //= self.cfg.tp
            attrs["shape"] = tgt
            attrs["view_key"] = node.attrs.get("view_key", node.id)
            if out_tp is not None and self.cfg.tp > 1:
                keys = list(node.attrs.get("factor_keys") or [None] * len(tgt))
                keys[out_tp] = f"{node.id}.f{out_tp}.loc"
                attrs["factor_keys"] = keys
        return attrs

    # -- matmul -----------------------------------------------------------------

    def rule_matmul(self, node: Node, stage: int):
        cfg = self.cfg
        a_t, b_t = node.inputs
        out = node.outputs[0]
        if b_t not in self.P and self.lg.tensors[b_t].role == "weight":
            pa0 = self.on_stage(a_t, stage)
            rank_a = len(self.lg.shape(a_t))
            rank_b = len(self.lg.shape(b_t))
            if pa0.tp_axis == rank_a - 1 and cfg.tp > 1:
                self.place_weight(b_t, 0, stage)  # row split, partial out
            else:
                self.place_weight(b_t, rank_b - 1 if cfg.tp > 1 else None, stage)
        pa = self.on_stage(a_t, stage)
        pb = self.on_stage(b_t, stage)
        fa, fb = self.lg.shape(a_t), self.lg.shape(b_t)
        ka = len(fa) - 1
        kb = len(fb) - 2 if len(fb) >= 2 else 0

        fold_a = pa.batch == ka
        fold_b = pb.batch == kb and pb.batch is not None
        if fold_a != fold_b:
            raise UnsupportedOperator(
                f"{node.id}: batch-sliced contraction on one operand only")
        fold = fold_a

        a_k = pa.tp_axis == ka
        b_k = pb.tp_axis == kb and len(fb) >= 2
        partial = False
        out_tp: int | None = None
        if a_k or b_k:
            if a_k and not b_k:
                if pb.tp_axis is not None:
                    raise UnsupportedOperator(f"{node.id}: operand slicings clash")
                pb = self.chunk_to(b_t, pb, kb)
            elif b_k and not a_k:
                if pa.tp_axis is not None:
                    raise UnsupportedOperator(f"{node.id}: operand slicings clash")
                pa = self.chunk_to(a_t, pa, ka)
            partial = cfg.tp > 1
        elif pa.tp_axis is not None and pb.tp_axis is not None:
            if len(fa) == len(fb) and pa.tp_axis == pb.tp_axis and pa.tp_axis < ka:
                out_tp = pa.tp_axis  # shared batched axis
            else:
                raise UnsupportedOperator(f"{node.id}: operand slicings clash")
        elif pa.tp_axis is not None:
            out_tp = pa.tp_axis  # a sliced off-contraction keeps its position
        elif pb.tp_axis is not None:
            if pb.tp_axis == len(fb) - 1:
                out_tp = len(self.lg.shape(out)) - 1  # column split
            elif len(fa) == len(fb):
                pa = self.chunk_to(a_t, pa, pb.tp_axis)
                out_tp = pb.tp_axis
            else:
                raise UnsupportedOperator(f"{node.id}: operand slicings clash")

        if fold:
            out_p = _Placed(stage=stage, batch=None, tp_axis=out_tp)
            loc_out = self.local_shape(out, out_p)
            locs: dict[tuple[int, int | None, int], str] = {}
            for r in range(cfg.dp):
                for m in self.mb_keys(True):
                    for c in range(cfg.tp):
                        dev = cfg.device(r, stage, c)
                        in_ids = [self.fetch(pa, r, m, c, stage),
                                  self.fetch(pb, r, m, c, stage)]
                        oid = self.new_tensor(out + ".loc", loc_out, dev, m,
                                              meta={"from": out})
                        self.emit("matmul", dev, in_ids, [oid], dict(node.attrs),
                                  node.id, m)
                        locs[(r, m, c)] = oid
            self._finalize_chain(node, out, out_p, loc_out, locs,
                                 tp_partial=partial, stage=stage)
            self.P[out] = out_p
            return

        batch = pa.batch if pa.batch is not None and pa.batch != ka else None
        if batch is None and pb.batch is not None and pb.batch != kb:
            batch = pb.batch
        out_p = _Placed(stage=stage, batch=batch, tp_axis=out_tp)
        loc_out = self.local_shape(out, out_p)
        for r in range(cfg.dp):
            for m in self.mb_keys(batch is not None):
                pre: dict[int, str] = {}
                for c in range(cfg.tp):
                    dev = cfg.device(r, stage, c)
                    in_ids = [self.fetch(pa, r, m, c, stage),
                              self.fetch(pb, r, m, c, stage)]
                    if partial:
                        oid = self.new_tensor(out + ".loc", loc_out, dev, m,
                                              meta={"from": out})
                        pre[c] = oid
                    else:
                        oid = self.new_tensor(out, loc_out, dev, m, meta={"from": out})
                        out_p.ids[(dev, m)] = oid
                    self.emit("matmul", dev, in_ids, [oid], dict(node.attrs),
                              node.id, m)
                if partial:
                    self._tp_allreduce(node.id, out, pre, out_p, loc_out, r, m, stage)
        self.P[out] = out_p

    # -- batch folds -------------------------------------------------------------

    def rule_batch_fold(self, node: Node, stage: int):
        cfg = self.cfg
        out = node.outputs[0]
        if node.kind == "embedding_grad":
            pg_ = self.on_stage(node.inputs[0], stage)
            pids = self.on_stage(node.inputs[1], stage)
            ps = [pg_, pids]
            g_tp = pg_.tp_axis
            if g_tp is None:
                loc_tp: int | None = None
            elif g_tp >= 2:
                loc_tp = g_tp - 1
            else:
                raise UnsupportedOperator(f"{node.id}: ids axis sliced")
            tp_reduced = False
        else:
            p0 = self.on_stage(node.inputs[0], stage)
            ps = [p0]
            axes = self._axes(node, len(self.lg.shape(node.inputs[0])))
            tp_reduced = p0.tp_axis is not None and p0.tp_axis in axes
            if tp_reduced or p0.tp_axis is None:
                loc_tp = None
            else:
                keep = bool(node.attrs.get("keepdims"))
                loc_tp = p0.tp_axis if keep else \
                    p0.tp_axis - sum(1 for a in axes if a < p0.tp_axis)

        out_p = _Placed(stage=stage, batch=None, tp_axis=loc_tp)
        loc_out = self.local_shape(out, out_p)
        locs: dict[tuple[int, int | None, int], str] = {}
        for r in range(cfg.dp):
            for m in self.mb_keys(True):
                pre: dict[int, str] = {}
                for c in range(cfg.tp):
                    dev = cfg.device(r, stage, c)
                    in_ids = [self.fetch(p, r, m, c, stage) for p in ps]
                    oid = self.new_tensor(out + ".loc", loc_out, dev, m,
                                          meta={"from": out})
                    self.emit(node.kind, dev, in_ids, [oid], dict(node.attrs),
                              node.id, m)
                    pre[c] = oid
                if tp_reduced and cfg.tp > 1:
                    group = self.tp_group(r, stage)
                    outs = []
                    for c in range(cfg.tp):
                        dev = cfg.device(r, stage, c)
                        tid = self.new_tensor(out + ".tp", loc_out, dev, m,
                                              meta={"from": out})
                        locs[(r, m, c)] = tid
                        outs.append(tid)
                    self.emit("all_reduce", group[0],
                              [pre[c] for c in range(cfg.tp)], outs,
                              {"group": group, "op": "sum"}, f"tpar.{node.id}", m)
                else:
                    for c in range(cfg.tp):
                        locs[(r, m, c)] = pre[c]
        self._finalize_chain(node, out, out_p, loc_out, locs,
                             tp_partial=False, stage=stage)
        self.P[out] = out_p

    def _finalize_chain(self, node: Node, out: str, out_p: _Placed,
                        loc_out: Shape, locs: dict, tp_partial: bool, stage: int):
        """Microbatch add tree, replica all_reduce, optional mean rescale."""
        cfg = self.cfg
        if tp_partial and cfg.tp > 1:
            for r in range(cfg.dp):
                for m in self.mb_keys(True):
                    group = self.tp_group(r, stage)
                    outs = []
                    for c in range(cfg.tp):
                        dev = cfg.device(r, stage, c)
                        tid = self.new_tensor(out + ".tp", loc_out, dev, m,
                                              meta={"from": out})
                        outs.append(tid)
                    self.emit("all_reduce", group[0],
                              [locs[(r, m, c)] for c in range(cfg.tp)], outs,
                              {"group": group, "op": "sum"}, f"tpar.{node.id}", m)
                    for c in range(cfg.tp):
                        locs[(r, m, c)] = outs[c]
        accs: dict[tuple[int, int], str] = {}
        for r in range(cfg.dp):
            for c in range(cfg.tp):
                dev = cfg.device(r, stage, c)
                acc = locs[(r, 0, c)]
                for m in range(1, cfg.nm):
                    nid = self.new_tensor(f"{out}.acc{m}", loc_out, dev, None,
                                          meta={"from": out})
                    self.emit("add", dev, [acc, locs[(r, m, c)]], [nid], {},
                              f"mb.{node.id}.{m}", None)
                    acc = nid
                accs[(r, c)] = acc
        finals: dict[tuple[int, int], str] = {}
        if cfg.dp > 1:
            for c in range(cfg.tp):
                group = self.dp_group(stage, c)
                outs = []
                for r in range(cfg.dp):
                    dev = cfg.device(r, stage, c)
                    tid = self.new_tensor(out + ".dp", loc_out, dev, None,
                                          meta={"from": out})
                    finals[(r, c)] = tid
                    outs.append(tid)
                self.emit("all_reduce", group[0],
                          [accs[(r, c)] for r in range(cfg.dp)], outs,
                          {"group": group, "op": "sum"}, f"dpar.{node.id}.c{c}", None)
        else:
            finals = dict(accs)
        for (r, c), tid in sorted(finals.items()):
            out_p.ids[(cfg.device(r, stage, c), None)] = tid

        # Every batch fold is a plain sum, so the replica accumulators are
        # honest partial shards of the logical value; checkpoint those when
        # the folded tensor is itself a requested lineage point.
        if out in self.lineage_set and self.cons.get(out) and cfg.dp > 1:
            shards = []
            for (r, c), tid in sorted(accs.items()):
                dev = cfg.device(r, stage, c)
                shards.append(Shard(tensor=tid,
                                    ranges=self.copy_ranges(out, out_p, dev, None)))
            self.partial_entries[out] = LineageEntry(logical=out, mode="partial",
                                                     shards=tuple(shards))

    # -- gradient norm -------------------------------------------------------------

    def rule_gnorm(self, node: Node):
        cfg = self.cfg
        out = node.outputs[0]
        by_dev: dict[int, list[str]] = {}
        for tid in node.inputs:
            p = self.P[tid]
            for (dev, _m), pid in sorted(p.ids.items()):
                # A grad that is not tp-sliced is replicated across the tp
                # group; count it on column 0 only, else the replica-wide
                # all_reduce would add it tp times.
                _r, _s, c = cfg.coords(dev)
                if p.tp_axis is None and cfg.tp > 1 and c != 0:
                    continue
                by_dev.setdefault(dev, []).append(pid)
        out_p = _Placed(stage=-1, batch=None, tp_axis=None)
        for r in range(cfg.dp):
            group, locals_ = [], []
            for s in range(cfg.pp):
                for c in range(cfg.tp):
                    dev = cfg.device(r, s, c)
                    if dev not in by_dev:
                        continue
                    oid = self.new_tensor(out + ".loc", (1,), dev, None,
                                          meta={"from": out})
                    self.emit("gnorm_sq", dev, by_dev[dev], [oid],
                              dict(node.attrs), node.id, None)
                    group.append(dev)
                    locals_.append(oid)
            if not locals_:
                raise UnsupportedOperator(
                    f"{node.id}: replica {r} holds no gradient shards")
            if len(group) > 1:
                outs = []
                for dev in group:
                    tid = self.new_tensor(out, (1,), dev, None, meta={"from": out})
                    out_p.ids[(dev, None)] = tid
                    outs.append(tid)
                self.emit("all_reduce", group[0], locals_, outs,
                          {"group": group, "op": "sum"}, f"ar.{node.id}.r{r}", None)
            else:
                out_p.ids[(group[0], None)] = locals_[0]
        self.P[out] = out_p

    # -- lineage ---------------------------------------------------------------

    def placed_for_entry(self, tid: str) -> _Placed:
        moved = [p for (t, _s), p in self.moved.items() if t == tid]
        if len(moved) == 1:
            return moved[0]
        return self.P[tid]

    def build_lineage(self) -> Lineage:
        lineage: Lineage = {}
        for tid in self.lineage_order:
            if tid in self.partial_entries:
                lineage[tid] = self.partial_entries[tid]
                continue
            if tid not in self.P:
                raise PlanEqError(f"lineage tensor {tid!r} was never placed")
            p = self.placed_for_entry(tid)
            shards = []
            for (dev, m), pid in sorted(p.ids.items()):
                shards.append(Shard(tensor=pid,
                                    ranges=self.copy_ranges(tid, p, dev, m)))
            lineage[tid] = LineageEntry(logical=tid, mode="full",
                                        shards=tuple(shards))
        return lineage


def default_lineage(logical: Graph, interiors: list[str] | None = None) -> list[str]:
    """Inputs, weights, requested interiors, then graph outputs, in topo order."""
    seen: set[str] = set()
    out: list[str] = []

    def push(tid: str):
        if tid not in seen:
            seen.add(tid)
            out.append(tid)

    for tid in logical.inputs:
        push(tid)
    for tid in interiors or []:
        if tid not in logical.tensors:
            raise PlanEqError(f"unknown lineage tensor {tid!r}")
        push(tid)
    for tid in logical.outputs:
        push(tid)
    pos = {t: i for i, t in enumerate(logical.tensors)}
    out.sort(key=lambda t: pos[t])
    return out


def parallelize(logical: Graph, cfg: ParallelConfig,
                loss: LossSpec | None = None,
                lineage_interiors: list[str] | None = None) -> Plan:
    """Lower `logical` onto the device grid and return the full plan."""
    kind = logical.config.get("loss_kind") or (loss.kind if loss else "sum")
    lineage_set = default_lineage(logical, lineage_interiors)
    return _Lowering(logical, cfg, kind, lineage_set).run()
