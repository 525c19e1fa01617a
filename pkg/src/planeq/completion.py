"""Training-iteration completion.

Takes a forward graph whose designated output is a scalar-energy tensor and
appends: the loss head (sum-all then scale), reverse-mode gradient nodes for
every tensor on a differentiable path, a gradient-norm probe, and a plain
first-order update for each weight. The result is one logical graph computing
the full iteration, which is what gets parallelized and verified.

Backward rules emit ordinary graph nodes (no dedicated gradient ops beyond
silu_grad and embedding_grad), so the verifier treats backward computation
exactly like forward computation.

Conventions the parallelizer relies on:
  - scale nodes whose constant normalizes over the global batch carry
    attrs["norm"] == "global_batch" (their parallel copies are rescaled),
  - graph.config["loss_kind"] records mean vs sum aggregation,
  - graph.config["grads"] maps tensor id -> finalized gradient tensor id.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

from .errors import PlanEqError, UnsupportedOperator
from .graph import Graph, Node, Shape, Tensor, topo_sort
from .ops import get_op, infer_node_shapes


@dataclass(frozen=True)
class LossSpec:
    kind: str = "mean"  # mean | sum
    scale: Fraction = Fraction(1)


@dataclass(frozen=True)
class OptimSpec:
    lr: Fraction = Fraction(1, 10)


class _Emitter:
    def __init__(self, g: Graph):
        self.g = g
        self.seq = max((n.seq for n in g.nodes), default=0) + 1
        self._n = 0

    def tensor(self, tid: str, shape: Shape, meta=None) -> str:
        base = tid
        k = 0
        while tid in self.g.tensors:
            k += 1
            tid = f"{base}.{k}"
        self.g.add_tensor(Tensor(id=tid, shape=shape, meta=meta or {}))
        return tid

    def node(self, kind: str, inputs: list[str], out: str, attrs: dict | None = None,
             block: int | None = None) -> str:
        attrs = dict(attrs or {})
        if block is not None:
            attrs["pp_block"] = block
        in_shapes = [self.g.shape(t) for t in inputs]
        probe = Node(id="?", kind=kind, inputs=tuple(inputs), outputs=(), attrs=attrs)
        out_shape = infer_node_shapes(probe, in_shapes)[0]
        tid = self.tensor(out, out_shape)
        self._n += 1
        self.g.add_node(Node(id=f"n.{tid}", kind=kind, inputs=tuple(inputs),
                             outputs=(tid,), attrs=attrs, seq=self.seq))
        self.seq += 1
        return tid


def _keepdims_shape(shape: Shape, axes: tuple[int, ...]) -> Shape:
    return tuple(1 if a in axes else d for a, d in enumerate(shape))


def _norm_axes(attrs: dict, rank: int) -> tuple[int, ...]:
    axes = attrs.get("axes")
    if axes is None:
        return tuple(range(rank))
    return tuple(sorted(a % rank for a in axes))


def backward_node(g: Graph, em: _Emitter, node: Node, gouts: dict[str, str],
                  requires: set[str]) -> dict[int, str]:
    """Emit gradient nodes for one forward node.

    gouts maps this node's output tensor ids to their (already accumulated)
    upstream gradient ids. Returns {input slot: gradient tensor id} for the
    slots the operator differentiates.
    """
    k = node.kind
    blk = node.attrs.get("pp_block")
    x = node.inputs
    y = node.outputs
    g_y = gouts.get(y[0]) if y else None

    def nm(tag: str) -> str:
        return f"b.{node.id}.{tag}"

    if g_y is None:
        return {}

    if k == "add":
        return {0: g_y, 1: g_y}
    if k == "sub":
        neg = em.node("scale", [g_y], nm("neg"), {"factor": Fraction(-1)}, blk)
        return {0: g_y, 1: neg}
    if k == "mul":
        ga = em.node("mul", [g_y, x[1]], nm("ga"), None, blk)
        gb = em.node("mul", [g_y, x[0]], nm("gb"), None, blk)
        return {0: ga, 1: gb}
    if k == "div":
        ga = em.node("div", [g_y, x[1]], nm("ga"),
                     {"den_positive": node.attrs.get("den_positive", False)}, blk)
        num = em.node("mul", [x[0], g_y], nm("num"), None, blk)
        den = em.node("mul", [x[1], x[1]], nm("den2"), None, blk)
        q = em.node("div", [num, den], nm("q"), {"den_positive": True}, blk)
        gb = em.node("scale", [q], nm("gb"), {"factor": Fraction(-1)}, blk)
        return {0: ga, 1: gb}
    if k in ("identity", "move", "shift"):
        return {0: g_y}
    if k in ("dropout", "apply_mask"):
        gx = em.node(k, [g_y, x[1]], nm("gx"), None, blk)
        return {0: gx}
    if k == "scale":
        attrs = {"factor": Fraction(node.attrs["factor"])}
        if node.attrs.get("norm"):
            attrs["norm"] = node.attrs["norm"]
        gx = em.node("scale", [g_y], nm("gx"), attrs, blk)
        return {0: gx}
    if k == "pow":
        n = int(node.attrs["exponent"])
        if n == 1:
            return {0: g_y}
        if n == 2:
            t = x[0]
        else:
            t = em.node("pow", [x[0]], nm("p"), {"exponent": n - 1}, blk)
        prod = em.node("mul", [g_y, t], nm("gp"), None, blk)
        gx = em.node("scale", [prod], nm("gx"), {"factor": Fraction(n)}, blk)
        return {0: gx}
    if k == "rsqrt":
        r = y[0]
        r2 = em.node("mul", [r, r], nm("r2"), None, blk)
        r3 = em.node("mul", [r2, r], nm("r3"), None, blk)
        prod = em.node("mul", [g_y, r3], nm("gr"), None, blk)
        gx = em.node("scale", [prod], nm("gx"), {"factor": Fraction(-1, 2)}, blk)
        return {0: gx}
    if k == "silu":
        gx = em.node("silu_grad", [x[0], g_y], nm("gx"), None, blk)
        return {0: gx}
    if k == "softmax":
        p = y[0]
        t = em.node("mul", [g_y, p], nm("gp"), None, blk)
        s = em.node("sum", [t], nm("s"), {"axes": [-1], "keepdims": True}, blk)
        e = em.node("expand", [s], nm("e"), {"shape": list(g.shape(p))}, blk)
        d = em.node("sub", [g_y, e], nm("d"), None, blk)
        gx = em.node("mul", [p, d], nm("gx"), None, blk)
        return {0: gx}
    if k == "view":
        gx = em.node("view", [g_y], nm("gx"), {"shape": list(g.shape(x[0]))}, blk)
        return {0: gx}
    if k == "transpose":
        perm = tuple(int(p) for p in node.attrs["perm"])
        inv = [0] * len(perm)
        for i, p in enumerate(perm):
            inv[p] = i
        gx = em.node("transpose", [g_y], nm("gx"), {"perm": inv}, blk)
        return {0: gx}
    if k == "expand":
        src = g.shape(x[0])
        tgt = g.shape(y[0])
        axes = [a for a in range(len(src)) if src[a] == 1 and tgt[a] != 1]
        gx = em.node("sum", [g_y], nm("gx"), {"axes": axes, "keepdims": True}, blk)
        return {0: gx}
    if k in ("sum", "mean"):
        src = g.shape(x[0])
        axes = _norm_axes(node.attrs, len(src))
        keep = bool(node.attrs.get("keepdims"))
        cur = g_y
        if not keep:
            cur = em.node("view", [cur], nm("k"),
                          {"shape": list(_keepdims_shape(src, axes))}, blk)
        e_attrs: dict = {"shape": list(src)}
        if 0 in axes:
            e_attrs["rebatch"] = True  # broadcast back over a folded batch axis
        cur = em.node("expand", [cur], nm("e"), e_attrs, blk)
        if k == "mean":
            count = 1
            for a in axes:
                count *= src[a]
            cur = em.node("scale", [cur], nm("gx"), {"factor": Fraction(1, count)}, blk)
        return {0: cur}
    if k == "matmul":
        A, B = x
        a_shape, b_shape = g.shape(A), g.shape(B)
        bt_perm = list(range(len(b_shape)))
        bt_perm[-1], bt_perm[-2] = bt_perm[-2], bt_perm[-1]
        at_perm = list(range(len(a_shape)))
        at_perm[-1], at_perm[-2] = at_perm[-2], at_perm[-1]
        bt = em.node("transpose", [B], nm("bt"), {"perm": bt_perm}, blk)
        ga = em.node("matmul", [g_y, bt], nm("ga"), None, blk)
        at = em.node("transpose", [A], nm("at"), {"perm": at_perm}, blk)
        p = em.node("matmul", [at, g_y], nm("pb"), None, blk)
        if len(b_shape) == len(a_shape) or len(a_shape) == 2:
            gb = p
        else:
            lead = list(range(len(a_shape) - 2))
            gb = em.node("sum", [p], nm("gb"), {"axes": lead, "keepdims": False}, blk)
        return {0: ga, 1: gb}
    if k == "embedding":
        table, ids = x
        v = g.shape(table)[0]
        gt = em.node("embedding_grad", [g_y, ids], nm("gt"), {"vocab": v}, blk)
        return {0: gt}
    raise UnsupportedOperator(f"no backward rule for operator kind {k!r}")


BACKWARD_RULES = ("add", "sub", "mul", "div", "identity", "shift", "dropout",
                  "apply_mask", "scale", "pow", "rsqrt", "silu", "softmax",
                  "view", "transpose", "expand", "sum", "mean", "matmul",
                  "embedding")


def complete(forward: Graph, loss: LossSpec = LossSpec(),
             optim: OptimSpec | None = OptimSpec(),
             energy: str | None = None) -> Graph:
    """Append loss, backward, gradient norm, and weight updates."""
    g = Graph(name=forward.name + ".train", config=dict(forward.config),
              inputs=list(forward.inputs), outputs=list(forward.outputs))
    for t in forward.tensors.values():
        g.add_tensor(Tensor(t.id, t.shape, t.role, t.dtype, t.device, t.microbatch,
                            dict(t.meta)))
    for n in forward.nodes:
        g.add_node(Node(n.id, n.kind, n.inputs, n.outputs, dict(n.attrs), n.device, n.seq))

    em = _Emitter(g)
    energy = energy or forward.outputs[0]
    e_shape = g.shape(energy)
    n_elems = 1
    for d in e_shape:
        n_elems *= d
    order = topo_sort(g)
    prod = g.producer_map()
    e_block = prod[energy].attrs.get("pp_block", 0) if energy in prod else 0

    presum = em.node("sum", [energy], "presum", {"axes": None, "keepdims": False}, e_block)
    factor = loss.scale * (Fraction(1, n_elems) if loss.kind == "mean" else 1)
    l_attrs = {"factor": factor}
    if loss.kind == "mean":
        l_attrs["norm"] = "global_batch"
    loss_t = em.node("scale", [presum], "loss", l_attrs, e_block)
    prod = g.producer_map()

    # which tensors lie on a differentiable path from weights/real inputs
    requires: set[str] = set()
    for tid, t in g.tensors.items():
        if t.role == "weight":
            requires.add(tid)
        elif t.role == "data_input" and t.dtype == "real" and not t.meta.get("mask"):
            requires.add(tid)
    order = topo_sort(g)
    for n in order:
        diff = get_op(n.kind).diff_inputs
        if any(n.inputs[s] in requires for s in diff if s < len(n.inputs)):
            for out in n.outputs:
                requires.add(out)
    if loss_t not in requires:
        raise PlanEqError("loss does not depend on any weight; nothing to differentiate")

    seed = em.node("full", [], "g.seed", {"shape": [1], "value": Fraction(1)}, e_block)
    contributions: dict[str, list[str]] = {loss_t: [seed]}
    grad_of: dict[str, str] = {}

    def finalize(tid: str) -> str | None:
        if tid in grad_of:
            return grad_of[tid]
        parts = contributions.get(tid)
        if not parts:
            return None
        blk = prod[tid].attrs.get("pp_block") if tid in prod else None
        acc = parts[0]
        for i, p in enumerate(parts[1:]):
            acc = em.node("add", [acc, p], f"g.{tid}.acc{i}", None, blk)
        # stable, named handle for every finalized gradient
        acc = em.node("identity", [acc], f"g.{tid}", None, blk)
        grad_of[tid] = acc
        return acc

    for node in reversed(order):
        gouts: dict[str, str] = {}
        needed = False
        for out in node.outputs:
            if out in requires:
                gt = finalize(out)
                if gt is not None:
                    gouts[out] = gt
                    needed = True
        if not needed:
            continue
        slot_grads = backward_node(g, em, node, gouts, requires)
        for slot, gt in slot_grads.items():
            tid = node.inputs[slot]
            if tid in requires:
                contributions.setdefault(tid, []).append(gt)

    weights = sorted(tid for tid, t in g.tensors.items() if t.role == "weight")
    weight_block: dict[str, int] = {}
    for n in order:
        for tid in n.inputs:
            if tid in weights and tid not in weight_block:
                weight_block[tid] = n.attrs.get("pp_block", 0)
    g_weights = {}
    for w in weights:
        gw = finalize(w)
        if gw is None:
            raise PlanEqError(f"weight {w!r} received no gradient")
        g_weights[w] = gw

    gnorm = em.node("gnorm_sq", [g_weights[w] for w in weights], "gnorm_sq",
                    {"gnorm": True}, max(weight_block.values(), default=0))

    updated = {}
    if optim is not None:
        for w in weights:
            d = em.node("scale", [g_weights[w]], f"o.delta.{w}",
                        {"factor": -optim.lr}, weight_block.get(w, 0))
            updated[w] = em.node("add", [w, d], f"opt.{w}", None, weight_block.get(w, 0))

    g.outputs = list(forward.outputs) + [loss_t, gnorm] + \
        [g_weights[w] for w in weights] + [updated[w] for w in weights]
    g.config.update({
        "loss_kind": loss.kind,
        "loss": loss_t,
        "energy": energy,
        "gnorm": gnorm,
        "grads": grad_of,
        "weight_grads": g_weights,
        "updated": updated,
        "weights": weights,
    })
    return g
