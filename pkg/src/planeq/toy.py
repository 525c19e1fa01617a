"""Builder helpers and the reference decoder training graph.

The decoder is deliberately small but keeps every structural ingredient that
makes lowering interesting: table lookup, pre-norm residual blocks with
masked renormalized attention, a gated MLP, weight-tied microbatchable
batch dimension, and a scalar energy head whose mean becomes the loss.

Dropout takes explicit 0/1 mask inputs so the graph stays deterministic;
masks are data inputs flagged meta["mask"] and are excluded from
differentiation.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

from .errors import ConfigError, PlanEqError
from .graph import Graph, Node, Shape, Tensor
from .ops import infer_node_shapes


class GraphBuilder:
    """Thin convenience layer: tensors named after the op that makes them."""

    def __init__(self, name: str):
        self.g = Graph(name=name)
        self._seq = 0

    def _next(self) -> int:
        self._seq += 1
        return self._seq

    def data_input(self, name: str, shape: Shape, dtype: str = "real",
                   batch: bool = True, **meta) -> str:
        md = dict(meta)
        if batch:
            md["batch"] = True
        self.g.add_tensor(Tensor(id=name, shape=tuple(shape), role="data_input",
                                 dtype=dtype, meta=md))
        self.g.inputs.append(name)
        return name

    def weight(self, name: str, shape: Shape, **meta) -> str:
        self.g.add_tensor(Tensor(id=name, shape=tuple(shape), role="weight",
                                 meta=dict(meta)))
        self.g.inputs.append(name)
        return name

    def op(self, kind: str, inputs: list[str], name: str, block: int = 0,
           attrs: dict | None = None) -> str:
        attrs = dict(attrs or {})
        attrs.setdefault("pp_block", block)
        node = Node(id=f"n.{name}", kind=kind, inputs=tuple(inputs),
                    outputs=(name,), attrs=attrs, seq=self._next())
        shapes = infer_node_shapes(node, [self.g.shape(t) for t in inputs])
        if name in self.g.tensors:
            raise PlanEqError(f"tensor {name!r} already defined")
        self.g.add_tensor(Tensor(id=name, shape=shapes[0]))
        self.g.add_node(node)
        return name


@dataclass(frozen=True)
class ToyConfig:
    layers: int = 2
    hidden: int = 8
    heads: int = 2
    seq: int = 4
    vocab: int = 16
    batch: int = 4
    mlp_ratio: int = 4
    eps: Fraction = Fraction(1, 100)

    def __post_init__(self):
        for f in ("layers", "hidden", "heads", "seq", "vocab", "batch", "mlp_ratio"):
            if getattr(self, f) < 1:
                raise ConfigError(f"{f} must be at least 1")
        if self.hidden % self.heads:
            raise ConfigError("hidden size must divide evenly into heads")


def _layer_norm(gb: GraphBuilder, x: str, tag: str, blk: int, eps: Fraction) -> str:
    shape = list(gb.g.shape(x))
    mu = gb.op("mean", [x], f"{tag}.mu", blk, {"axes": [-1], "keepdims": True})
    mue = gb.op("expand", [mu], f"{tag}.mue", blk, {"shape": shape})
    xc = gb.op("sub", [x, mue], f"{tag}.xc", blk)
    x2 = gb.op("pow", [xc], f"{tag}.x2", blk, {"exponent": 2})
    var = gb.op("mean", [x2], f"{tag}.var", blk, {"axes": [-1], "keepdims": True})
    sv = gb.op("shift", [var], f"{tag}.sv", blk, {"addend": eps})
    rs = gb.op("rsqrt", [sv], f"{tag}.rs", blk)
    rse = gb.op("expand", [rs], f"{tag}.rse", blk, {"shape": shape})
    return gb.op("mul", [xc, rse], f"{tag}.y", blk)


def _attention(gb: GraphBuilder, x: str, k: int, blk: int, tc: ToyConfig) -> str:
    B, S, H = tc.batch, tc.seq, tc.hidden
    h, d = tc.heads, tc.hidden // tc.heads
    wq = gb.weight(f"l{k}.wq", (H, H))
    wk = gb.weight(f"l{k}.wk", (H, H))
    wv = gb.weight(f"l{k}.wv", (H, H))
    q = gb.op("matmul", [x, wq], f"l{k}.q", blk)
    ky = gb.op("matmul", [x, wk], f"l{k}.k", blk)
    v = gb.op("matmul", [x, wv], f"l{k}.v", blk)
    qh = gb.op("view", [q], f"l{k}.qh", blk, {"shape": [B, S, h, d]})
    qt = gb.op("transpose", [qh], f"l{k}.qt", blk, {"perm": [0, 2, 1, 3]})
    kh = gb.op("view", [ky], f"l{k}.kh", blk, {"shape": [B, S, h, d]})
    kt = gb.op("transpose", [kh], f"l{k}.kt", blk, {"perm": [0, 2, 3, 1]})
    vh = gb.op("view", [v], f"l{k}.vh", blk, {"shape": [B, S, h, d]})
    vt = gb.op("transpose", [vh], f"l{k}.vt", blk, {"perm": [0, 2, 1, 3]})
    sc = gb.op("matmul", [qt, kt], f"l{k}.sc", blk)
    sd = gb.op("scale", [sc], f"l{k}.sd", blk, {"factor": Fraction(1, d)})
    sm = gb.op("softmax", [sd], f"l{k}.sm", blk, {"axis": -1})
    msk = gb.op("create_mask", [], f"l{k}.msk", blk, {"size": S, "kind": "causal"})
    pm = gb.op("apply_mask", [sm, msk], f"l{k}.pm", blk)
    z = gb.op("sum", [pm], f"l{k}.z", blk, {"axes": [-1], "keepdims": True})
    ze = gb.op("expand", [z], f"l{k}.ze", blk, {"shape": [B, h, S, S]})
    # masked rows renormalize; the causal diagonal keeps every row positive
    pr = gb.op("div", [pm, ze], f"l{k}.pr", blk, {"den_positive": True})
    av = gb.op("matmul", [pr, vt], f"l{k}.av", blk)
    ao = gb.op("transpose", [av], f"l{k}.ao", blk, {"perm": [0, 2, 1, 3]})
    am = gb.op("view", [ao], f"l{k}.am", blk, {"shape": [B, S, H]})
    wo = gb.weight(f"l{k}.wo", (H, H))
    return gb.op("matmul", [am, wo], f"l{k}.proj", blk)


def toy_forward(tc: ToyConfig = ToyConfig()) -> Graph:
    B, S, H, V = tc.batch, tc.seq, tc.hidden, tc.vocab
    F = tc.hidden * tc.mlp_ratio
    gb = GraphBuilder("toy")
    ids = gb.data_input("ids", (B, S), dtype="int", vocab=V, enum="position")
    wemb = gb.weight("emb.w", (V, H))
    x = gb.op("embedding", [wemb, ids], "x0", 0)
    boundaries = ["x0"]
    for k in range(tc.layers):
        blk = k + 1
        y1 = _layer_norm(gb, x, f"l{k}.ln1", blk, tc.eps)
        proj = _attention(gb, y1, k, blk, tc)
        dm1 = gb.data_input(f"l{k}.dmask1", (B, S, H), mask=True)
        dp1 = gb.op("dropout", [proj, dm1], f"l{k}.dp1", blk)
        r1 = gb.op("add", [x, dp1], f"l{k}.res1", blk)
        y2 = _layer_norm(gb, r1, f"l{k}.ln2", blk, tc.eps)
        w1 = gb.weight(f"l{k}.w1", (H, F))
        u = gb.op("matmul", [y2, w1], f"l{k}.up", blk)
        su = gb.op("silu", [u], f"l{k}.silu", blk)
        # activation dropout sits inside the MLP so its mask meets a
        # tensor that is column-sliced under tensor parallelism
        dm2 = gb.data_input(f"l{k}.dmask2", (B, S, F), mask=True)
        dp2 = gb.op("dropout", [su, dm2], f"l{k}.dp2", blk)
        w2 = gb.weight(f"l{k}.w2", (F, H))
        dn = gb.op("matmul", [dp2, w2], f"l{k}.down", blk)
        x = gb.op("add", [r1, dn], f"x{k + 1}", blk)
        boundaries.append(x)
    blk = tc.layers + 1
    yf = _layer_norm(gb, x, "lnf", blk, tc.eps)
    wh = gb.weight("head.w", (H, V))
    logits = gb.op("matmul", [yf, wh], "logits", blk)
    energy = gb.op("pow", [logits], "energy", blk, {"exponent": 2})
    gb.g.outputs = [energy]
    gb.g.config = {
        "model": {"layers": tc.layers, "hidden": H, "heads": tc.heads,
                  "seq": S, "vocab": V, "batch": B, "mlp_ratio": tc.mlp_ratio},
        "boundaries": boundaries,
        "energy": energy,
    }
    return gb.g


def toy_interiors(trained: Graph) -> list[str]:
    """Lineage checkpoints: block boundaries, their grads, and the energy."""
    bounds = trained.config.get("boundaries", [])
    grads = trained.config.get("grads", {})
    out = list(bounds)
    out += [grads[b] for b in bounds if b in grads]
    energy = trained.config.get("energy")
    if energy and energy not in out:
        out.append(energy)
    return out
