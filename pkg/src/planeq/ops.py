"""Operator semantics registry.

Each operator kind bundles:
  - full-scale shape inference (the declared-shape validity rule),
  - an index map `deps` giving, for one output element, the input elements it
    reads (this is the data-movement part of the kernel),
  - a scalar `kernel` combining those elements symbolically,
  - a reduced-dimension rule emitting integer constraints for shape reduction.

Symbolic execution is generic over (deps, kernel); embedding gathers are the
exception since their index map depends on token values, which stay concrete
on both execution routes.

The exact concrete oracle in oracle.py intentionally does NOT reuse deps or
kernel; it re-implements every operator with plain loops so the two routes can
cross-check each other.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Any, Sequence

from . import dims
from .dims import DimContext, Term, cint, tprod, tsum
from .errors import ShapeError, UnknownOperator
from .graph import Node, Shape, flat_index, iter_box, unflatten
from .sym import EXP, RSQRT, SIGMOID, ExecContext, Expr


@dataclass
class VTensor:
    """Flat row-major value grid; data holds Exprs, or ints for token tensors."""
    shape: Shape
    data: list

    def at(self, idx: tuple[int, ...]):
        return self.data[flat_index(idx, self.shape)]


def full_box(shape: Shape):
    return iter_box(tuple((0, d) for d in shape))


def _pshape(s: Shape) -> str:
    return "[" + ",".join(map(str, s)) + "]"


class Op:
    kind = ""
    diff_inputs: tuple[int, ...] = ()
    affine = True  # index map is affine in the output index
    is_comm = False

    def infer_shapes(self, node: Node, ins: list[Shape]) -> list[Shape]:
        raise NotImplementedError

    def deps(self, node: Node, ins: list[Shape], outs: list[Shape], oslot: int,
             oidx: tuple[int, ...]) -> list[tuple[int, tuple[int, ...]]]:
        raise NotImplementedError

    def kernel(self, node: Node, ctx: ExecContext, args: list, oidx, outs, ins):
        raise NotImplementedError

    def execute(self, node: Node, ins: list[VTensor], outs_shapes: list[Shape],
                ctx: ExecContext) -> list[VTensor]:
        in_shapes = [t.shape for t in ins]
        outs = []
        for oslot, oshape in enumerate(outs_shapes):
            data = []
            for oidx in full_box(oshape):
                dps = self.deps(node, in_shapes, outs_shapes, oslot, oidx)
                args = [ins[slot].data[flat_index(idx, ins[slot].shape)] for slot, idx in dps]
                data.append(self.kernel(node, ctx, args, oidx, outs_shapes, in_shapes))
            outs.append(VTensor(oshape, data))
        return outs

    def reduce_dims(self, node: Node, ins: list[list[Term]], C: DimContext,
                    fins: list[Shape], fouts: list[Shape]) -> list[list[Term]]:
        """Reduced-dimension rule: emit constraints, return output dim terms.

        fins/fouts are the declared full-scale shapes, used only to bound
        fresh variables.
        """
        raise NotImplementedError

    # helpers ---------------------------------------------------------------

    def _want(self, node: Node, cond: bool, msg: str):
        if not cond:
            raise ShapeError(f"{node.kind} {node.id}: {msg}")


def _eq_dims(node: Node, C: DimContext, a: list[Term], b: list[Term], what: str):
    for i, (x, y) in enumerate(zip(a, b)):
        C.eq(x, y, f"{node.id}:{what}[{i}]")


class Elementwise(Op):
    """n same-shaped real inputs, one output."""

    arity = 2

    def infer_shapes(self, node, ins):
        self._want(node, len(ins) == self.arity, f"expects {self.arity} inputs")
        for s in ins[1:]:
            self._want(node, s == ins[0], f"operand shapes differ: {_pshape(ins[0])} vs {_pshape(s)}")
        return [ins[0]]

    def deps(self, node, ins, outs, oslot, oidx):
        return [(i, oidx) for i in range(len(ins))]

    def reduce_dims(self, node, ins, C, fins, fouts):
        for other in ins[1:]:
            _eq_dims(node, C, ins[0], other, "elemwise")
        return [list(ins[0])]


class AddOp(Elementwise):
    kind = "add"
    diff_inputs = (0, 1)

    def kernel(self, node, ctx, args, oidx, outs, ins):
        return ctx.alg.add(args[0], args[1])


class SubOp(Elementwise):
    kind = "sub"
    diff_inputs = (0, 1)

    def kernel(self, node, ctx, args, oidx, outs, ins):
        return ctx.alg.sub(args[0], args[1])


class MulOp(Elementwise):
    kind = "mul"
    diff_inputs = (0, 1)

    def kernel(self, node, ctx, args, oidx, outs, ins):
        return ctx.alg.mul(args[0], args[1])


class DivOp(Elementwise):
    kind = "div"
    diff_inputs = (0, 1)

    def kernel(self, node, ctx, args, oidx, outs, ins):
        ctx.require_nonzero(args[1], positive=bool(node.attrs.get("den_positive")))
        return ctx.alg.div(args[0], args[1])


class DropoutOp(Elementwise):
    kind = "dropout"  # mask comes in as data, gradient only flows to slot 0
    diff_inputs = (0,)

    def kernel(self, node, ctx, args, oidx, outs, ins):
        return ctx.alg.mul(args[0], args[1])


class SiluGradOp(Elementwise):
    kind = "silu_grad"  # inputs (x, upstream): upstream * (s + x*s*(1-s)), s = sigmoid(x)

    def kernel(self, node, ctx, args, oidx, outs, ins):
        alg = ctx.alg
        x, g = args
        s = alg.app(SIGMOID, x)
        inner = alg.add(s, alg.mul(alg.mul(x, s), alg.sub(alg.one, s)))
        return alg.mul(g, inner)


class Unary(Op):
    def infer_shapes(self, node, ins):
        self._want(node, len(ins) == 1, "expects 1 input")
        return [ins[0]]

    def deps(self, node, ins, outs, oslot, oidx):
        return [(0, oidx)]

    def reduce_dims(self, node, ins, C, fins, fouts):
        return [list(ins[0])]


class IdentityOp(Unary):
    kind = "identity"
    diff_inputs = (0,)

    def kernel(self, node, ctx, args, oidx, outs, ins):
        return args[0]


class ScaleOp(Unary):
    kind = "scale"  # attrs: factor (rational), optional norm="global_batch"
    diff_inputs = (0,)

    def kernel(self, node, ctx, args, oidx, outs, ins):
        return ctx.alg.scale(args[0], Fraction(node.attrs["factor"]))


class ShiftOp(Unary):
    kind = "shift"  # attrs: addend (rational)
    diff_inputs = (0,)

    def kernel(self, node, ctx, args, oidx, outs, ins):
        return ctx.alg.add(args[0], ctx.alg.const(Fraction(node.attrs["addend"])))


class PowOp(Unary):
    kind = "pow"  # attrs: exponent (int >= 1)
    diff_inputs = (0,)

    def infer_shapes(self, node, ins):
        self._want(node, int(node.attrs.get("exponent", 0)) >= 1, "exponent must be >= 1")
        return super().infer_shapes(node, ins)

    def kernel(self, node, ctx, args, oidx, outs, ins):
        return ctx.alg.powi(args[0], int(node.attrs["exponent"]))


class RsqrtOp(Unary):
    kind = "rsqrt"
    diff_inputs = (0,)

    def kernel(self, node, ctx, args, oidx, outs, ins):
        ctx.require_nonzero(args[0], positive=True)
        return ctx.alg.app(RSQRT, args[0])


class SiluOp(Unary):
    kind = "silu"
    diff_inputs = (0,)

    def kernel(self, node, ctx, args, oidx, outs, ins):
        return ctx.alg.mul(args[0], ctx.alg.app(SIGMOID, args[0]))


class MoveOp(Unary):
    kind = "move"  # attrs: src, dst devices
    is_comm = True

    def kernel(self, node, ctx, args, oidx, outs, ins):
        return args[0]


class SoftmaxOp(Op):
    kind = "softmax"  # attrs: axis (last only)
    diff_inputs = (0,)

    def infer_shapes(self, node, ins):
        self._want(node, len(ins) == 1, "expects 1 input")
        ax = int(node.attrs.get("axis", -1))
        self._want(node, ax in (-1, len(ins[0]) - 1), "softmax supported on the last axis only")
        self._want(node, ins[0][-1] >= 2, "softmax axis must have extent >= 2")
        return [ins[0]]

    def deps(self, node, ins, outs, oslot, oidx):
        n = ins[0][-1]
        row = oidx[:-1]
        return [(0, oidx)] + [(0, row + (j,)) for j in range(n)]

    def kernel(self, node, ctx, args, oidx, outs, ins):
        alg = ctx.alg
        e_self = alg.app(EXP, args[0])
        total = alg.addn([alg.app(EXP, a) for a in args[1:]])
        ctx.require_nonzero(total, positive=True)
        return alg.div(e_self, total)

    def reduce_dims(self, node, ins, C, fins, fouts):
        C.ge(ins[0][-1], cint(2), f"{node.id}:softmax-axis")
        return [list(ins[0])]


class CreateMaskOp(Op):
    kind = "create_mask"  # attrs: size; lower-triangular ones
    affine = True

    def infer_shapes(self, node, ins):
        self._want(node, len(ins) == 0, "expects no inputs")
        s = int(node.attrs["size"])
        self._want(node, s >= 2, "mask size must be >= 2")
        return [(s, s)]

    def deps(self, node, ins, outs, oslot, oidx):
        return []

    def kernel(self, node, ctx, args, oidx, outs, ins):
        i, j = oidx
        return ctx.alg.one if j <= i else ctx.alg.zero

    def execute(self, node, ins, outs_shapes, ctx):
        s = outs_shapes[0]
        data = [ctx.alg.one if j <= i else ctx.alg.zero
                for i in range(s[0]) for j in range(s[1])]
        return [VTensor(s, data)]

    def reduce_dims(self, node, ins, C, fins, fouts):
        d = C.fresh(f"{node.id}.size", fouts[0][0])
        C.ge(d, cint(2), f"{node.id}:mask-size")
        return [[d, d]]


class ApplyMaskOp(Op):
    kind = "apply_mask"  # out = x * mask broadcast over leading dims of x
    diff_inputs = (0,)

    def infer_shapes(self, node, ins):
        self._want(node, len(ins) == 2, "expects (x, mask)")
        x, m = ins
        self._want(node, len(m) == 2 and m[0] == m[1], "mask must be square")
        self._want(node, len(x) >= 2 and x[-2:] == m, f"mask {_pshape(m)} must match trailing dims of {_pshape(x)}")
        return [x]

    def deps(self, node, ins, outs, oslot, oidx):
        return [(0, oidx), (1, oidx[-2:])]

    def kernel(self, node, ctx, args, oidx, outs, ins):
        return ctx.alg.mul(args[0], args[1])

    def reduce_dims(self, node, ins, C, fins, fouts):
        x, m = ins
        C.eq(m[0], m[1], f"{node.id}:mask-square")
        _eq_dims(node, C, x[-2:], m, "mask-trailing")
        return [list(x)]


class ViewOp(Op):
    kind = "view"  # attrs: shape (target), optional factor_keys per target axis
    diff_inputs = (0,)

    def infer_shapes(self, node, ins):
        self._want(node, len(ins) == 1, "expects 1 input")
        tgt = tuple(int(d) for d in node.attrs["shape"])
        n_in = 1
        for d in ins[0]:
            n_in *= d
        n_out = 1
        for d in tgt:
            n_out *= d
        self._want(node, n_in == n_out, f"element count changes: {_pshape(ins[0])} -> {_pshape(tgt)}")
        return [tgt]

    def deps(self, node, ins, outs, oslot, oidx):
        return [(0, unflatten(flat_index(oidx, outs[0]), ins[0]))]

    def kernel(self, node, ctx, args, oidx, outs, ins):
        return args[0]

    def reduce_dims(self, node, ins, C, fins, fouts):
        tgt = fouts[0]
        base = node.attrs.get("view_key", node.id)
        keys = node.attrs.get("factor_keys") or [None] * len(tgt)
        out = []
        for a, d in enumerate(tgt):
            key = keys[a] if keys[a] is not None else f"{base}.f{a}"
            out.append(C.declare(f"k.{key}", d))
        C.eq(tprod(list(ins[0])), tprod(out), f"{node.id}:view-volume")
        return [out]


class TransposeOp(Op):
    kind = "transpose"  # attrs: perm
    diff_inputs = (0,)

    def infer_shapes(self, node, ins):
        perm = tuple(int(p) for p in node.attrs["perm"])
        self._want(node, len(ins) == 1 and sorted(perm) == list(range(len(ins[0]))),
                   "perm must permute input axes")
        return [tuple(ins[0][p] for p in perm)]

    def deps(self, node, ins, outs, oslot, oidx):
        perm = tuple(int(p) for p in node.attrs["perm"])
        inv = [0] * len(perm)
        for i, p in enumerate(perm):
            inv[p] = i
        return [(0, tuple(oidx[inv[a]] for a in range(len(perm))))]

    def kernel(self, node, ctx, args, oidx, outs, ins):
        return args[0]

    def reduce_dims(self, node, ins, C, fins, fouts):
        perm = tuple(int(p) for p in node.attrs["perm"])
        return [[ins[0][p] for p in perm]]


class ExpandOp(Op):
    kind = "expand"  # attrs: shape; broadcasts extent-1 axes
    diff_inputs = (0,)

    def infer_shapes(self, node, ins):
        tgt = tuple(int(d) for d in node.attrs["shape"])
        src = ins[0]
        self._want(node, len(tgt) == len(src), "expand cannot change rank")
        for s, t in zip(src, tgt):
            self._want(node, s == t or s == 1, f"cannot expand {_pshape(src)} to {_pshape(tgt)}")
        return [tgt]

    def deps(self, node, ins, outs, oslot, oidx):
        src = ins[0]
        return [(0, tuple(0 if src[a] == 1 else oidx[a] for a in range(len(src))))]

    def kernel(self, node, ctx, args, oidx, outs, ins):
        return args[0]

    def reduce_dims(self, node, ins, C, fins, fouts):
        base = node.attrs.get("view_key", node.id)
        keys = node.attrs.get("factor_keys") or [None] * len(fouts[0])
        out = []
        for a, d in enumerate(fouts[0]):
            if fins[0][a] == d:
                out.append(ins[0][a])
            else:  # broadcast axis: full extent 1 expanding to d
                key = keys[a] if keys[a] is not None else f"{base}.f{a}"
                out.append(C.declare(f"k.{key}", d))
        return [out]


class SumOp(Op):
    kind = "sum"  # attrs: axes, keepdims
    diff_inputs = (0,)

    def _axes(self, node: Node, rank: int) -> tuple[int, ...]:
        axes = node.attrs.get("axes")
        if axes is None:
            return tuple(range(rank))
        return tuple(sorted(a % rank for a in axes))

    def infer_shapes(self, node, ins):
        self._want(node, len(ins) == 1, "expects 1 input")
        axes = self._axes(node, len(ins[0]))
        keep = bool(node.attrs.get("keepdims"))
        out = []
        for a, d in enumerate(ins[0]):
            if a in axes:
                if keep:
                    out.append(1)
            else:
                out.append(d)
        return [tuple(out) if out else (1,)]

    def deps(self, node, ins, outs, oslot, oidx):
        axes = self._axes(node, len(ins[0]))
        keep = bool(node.attrs.get("keepdims"))
        fixed: list[int | None] = []
        full_reduce = (not keep) and len(axes) == len(ins[0])
        it = iter(()) if full_reduce else iter(oidx)
        for a in range(len(ins[0])):
            if a in axes:
                fixed.append(None)
                if keep:
                    next(it)
            else:
                fixed.append(next(it))
        out = []
        ranges = tuple((0, ins[0][a]) if fixed[a] is None else (fixed[a], fixed[a] + 1)
                       for a in range(len(ins[0])))
        for idx in iter_box(ranges):
            out.append((0, idx))
        return out

    def kernel(self, node, ctx, args, oidx, outs, ins):
        return ctx.alg.addn(args)

    def reduce_dims(self, node, ins, C, fins, fouts):
        axes = self._axes(node, len(ins[0]))
        keep = bool(node.attrs.get("keepdims"))
        red = [ins[0][a] for a in axes]
        orig_fold = 1
        for a in axes:
            orig_fold *= fins[0][a]
        if orig_fold >= 2:
            # a real fold must stay a fold: product of extents >= 2, linearized
            C.ge(tsum(red), cint(len(red) + 1), f"{node.id}:fold-size")
        out = []
        for a, d in enumerate(ins[0]):
            if a in axes:
                if keep:
                    out.append(cint(1))
            else:
                out.append(d)
        return [out if out else [cint(1)]]


class MeanOp(SumOp):
    kind = "mean"

    def kernel(self, node, ctx, args, oidx, outs, ins):
        return ctx.alg.scale(ctx.alg.addn(args), Fraction(1, len(args)))


class MatmulOp(Op):
    kind = "matmul"  # A[..., M, K] @ B[..., K, N]; B may be rank-2 (shared weight)
    diff_inputs = (0, 1)

    def infer_shapes(self, node, ins):
        self._want(node, len(ins) == 2, "expects 2 inputs")
        a, b = ins
        self._want(node, len(a) >= 2 and len(b) >= 2, "operands must be rank >= 2")
        self._want(node, len(b) == len(a) or len(b) == 2, "B must match A rank or be rank-2")
        if len(b) == len(a):
            self._want(node, a[:-2] == b[:-2], "leading (batch) dims must match")
        self._want(node, a[-1] == b[-2], f"contraction mismatch {_pshape(a)} @ {_pshape(b)}")
        return [a[:-1] + (b[-1],)]

    def deps(self, node, ins, outs, oslot, oidx):
        a, b = ins
        k = a[-1]
        lead = oidx[:-2]
        m, n = oidx[-2], oidx[-1]
        da = [(0, lead + (m, kk)) for kk in range(k)]
        if len(b) == 2:
            db = [(1, (kk, n)) for kk in range(k)]
        else:
            db = [(1, lead + (kk, n)) for kk in range(k)]
        return da + db

    def kernel(self, node, ctx, args, oidx, outs, ins):
        alg = ctx.alg
        k = len(args) // 2
        return alg.addn([alg.mul(args[i], args[k + i]) for i in range(k)])

    def reduce_dims(self, node, ins, C, fins, fouts):
        a, b = ins
        C.eq(a[-1], b[-2], f"{node.id}:contraction")
        # local shards may contract over width 1; only require the reduced
        # extent to stay nondegenerate when the full-scale op folds >= 2
        if fins[0][-1] >= 2:
            C.ge(a[-1], cint(2), f"{node.id}:contraction-size")
        if len(b) == len(a):
            _eq_dims(node, C, a[:-2], b[:-2], "batch")
        return [list(a[:-1]) + [b[-1]]]


class EinsumOp(Op):
    kind = "einsum"  # attrs: spec like "bij,bjk->bik"; single output, no ellipsis
    diff_inputs = ()

    def _parse(self, node: Node, n_in: int):
        spec = node.attrs["spec"].replace(" ", "")
        lhs, rhs = spec.split("->")
        subs = lhs.split(",")
        if len(subs) != n_in:
            raise ShapeError(f"einsum {node.id}: spec arity mismatch")
        return subs, rhs

    def infer_shapes(self, node, ins):
        subs, rhs = self._parse(node, len(ins))
        extent: dict[str, int] = {}
        for sub, shape in zip(subs, ins):
            self._want(node, len(sub) == len(shape), "subscript rank mismatch")
            for ch, d in zip(sub, shape):
                if ch in extent:
                    self._want(node, extent[ch] == d, f"index {ch} extent conflict")
                else:
                    extent[ch] = d
        contracted = [ch for ch in sorted(set("".join(subs))) if ch not in rhs]
        csize = 1
        for ch in contracted:
            csize *= extent[ch]
        if contracted:
            self._want(node, csize >= 2, "contraction must fold at least 2 elements")
        return [tuple(extent[ch] for ch in rhs)]

    def _plan(self, node, ins):
        subs, rhs = self._parse(node, len(ins))
        extent: dict[str, int] = {}
        for sub, shape in zip(subs, ins):
            for ch, d in zip(sub, shape):
                extent[ch] = d
        contracted = [ch for ch in sorted(set("".join(subs))) if ch not in rhs]
        return subs, rhs, extent, contracted

    def deps(self, node, ins, outs, oslot, oidx):
        subs, rhs, extent, contracted = self._plan(node, ins)
        binding = dict(zip(rhs, oidx))
        out = []
        for combo in iter_box(tuple((0, extent[ch]) for ch in contracted)):
            b = dict(binding)
            b.update(zip(contracted, combo))
            for slot, sub in enumerate(subs):
                out.append((slot, tuple(b[ch] for ch in sub)))
        return out

    def kernel(self, node, ctx, args, oidx, outs, ins):
        alg = ctx.alg
        n = len(ins)
        prods = [alg.muln(args[i:i + n]) for i in range(0, len(args), n)]
        return alg.addn(prods)

    def reduce_dims(self, node, ins, C, fins, fouts):
        subs, rhs = self._parse(node, len(ins))
        rep: dict[str, Term] = {}
        for sub, shape in zip(subs, ins):
            for ch, d in zip(sub, shape):
                if ch in rep:
                    C.eq(rep[ch], d, f"{node.id}:einsum-{ch}")
                else:
                    rep[ch] = d
        contracted = [ch for ch in sorted(rep) if ch not in rhs]
        if contracted:
            C.ge(tsum([rep[ch] for ch in contracted]), cint(len(contracted) + 1),
                 f"{node.id}:einsum-fold")
        return [[rep[ch] for ch in rhs]]


class FullOp(Op):
    kind = "full"  # attrs: shape, value (rational)

    def infer_shapes(self, node, ins):
        self._want(node, len(ins) == 0, "expects no inputs")
        return [tuple(int(d) for d in node.attrs["shape"])]

    def deps(self, node, ins, outs, oslot, oidx):
        return []

    def kernel(self, node, ctx, args, oidx, outs, ins):
        return ctx.alg.const(Fraction(node.attrs["value"]))

    def reduce_dims(self, node, ins, C, fins, fouts):
        return [[C.fresh(f"{node.id}.d{a}", int(d)) for a, d in enumerate(fouts[0])]]


class ChunkOp(Op):
    kind = "chunk"  # attrs: axis, parts, index
    diff_inputs = (0,)

    def infer_shapes(self, node, ins):
        ax = int(node.attrs["axis"])
        parts = int(node.attrs["parts"])
        idx = int(node.attrs["index"])
        d = ins[0][ax]
        self._want(node, parts >= 1 and 0 <= idx < parts, "bad parts/index")
        self._want(node, d % parts == 0, f"axis extent {d} not divisible by {parts}")
        out = list(ins[0])
        out[ax] = d // parts
        return [tuple(out)]

    def deps(self, node, ins, outs, oslot, oidx):
        ax = int(node.attrs["axis"])
        width = outs[0][ax]
        off = int(node.attrs["index"]) * width
        idx = list(oidx)
        idx[ax] += off
        return [(0, tuple(idx))]

    def kernel(self, node, ctx, args, oidx, outs, ins):
        return args[0]

    def reduce_dims(self, node, ins, C, fins, fouts):
        ax = int(node.attrs["axis"])
        parts = int(node.attrs["parts"])
        full_out = fouts[0][ax]
        key = node.attrs.get("chunk_key")
        q = C.declare(f"k.{key}", full_out) if key else C.fresh(f"{node.id}.q", full_out)
        C.eq(ins[0][ax], tprod([cint(parts), q]), f"{node.id}:chunk-even")
        out = list(ins[0])
        out[ax] = q
        return [out]


class EmbeddingOp(Op):
    kind = "embedding"  # inputs (table [V,H], ids int [..]) -> [.., H]
    diff_inputs = (0,)
    affine = False  # index map depends on token values

    def infer_shapes(self, node, ins):
        self._want(node, len(ins) == 2, "expects (table, ids)")
        t, ids = ins
        self._want(node, len(t) == 2, "table must be rank-2")
        n = 1
        for d in ids:
            n *= d
        self._want(node, t[0] >= n, "vocab must cover enumerated token ids")
        return [ids + (t[1],)]

    def execute(self, node, ins, outs_shapes, ctx):
        table, ids = ins
        oshape = outs_shapes[0]
        h = table.shape[1]
        data = []
        for iidx in full_box(ids.shape):
            row = ids.at(iidx)
            base = int(row) * h
            data.extend(table.data[base:base + h])
        return [VTensor(oshape, data)]

    def reduce_dims(self, node, ins, C, fins, fouts):
        t, ids = ins
        C.ge(t[0], tprod(list(ids)), f"{node.id}:vocab-covers-ids")
        return [list(ids) + [t[1]]]


class EmbeddingGradOp(Op):
    kind = "embedding_grad"  # inputs (g [.., H], ids) -> [V, H]; attrs: vocab
    affine = False

    def infer_shapes(self, node, ins):
        g, ids = ins
        self._want(node, len(ins) == 2 and g[:-1] == ids, "grad leading dims must match ids")
        v = int(node.attrs["vocab"])
        n = 1
        for d in ids:
            n *= d
        self._want(node, v >= n, "vocab must cover enumerated token ids")
        return [(v, g[-1])]

    def execute(self, node, ins, outs_shapes, ctx):
        g, ids = ins
        v, h = outs_shapes[0]
        alg = ctx.alg
        data = [alg.zero] * (v * h)
        for iidx in full_box(ids.shape):
            row = int(ids.at(iidx))
            for hh in range(h):
                pos = row * h + hh
                data[pos] = alg.add(data[pos], g.at(iidx + (hh,)))
        return [VTensor((v, h), data)]

    def reduce_dims(self, node, ins, C, fins, fouts):
        g, ids = ins
        _eq_dims(node, C, list(g[:-1]), list(ids), "grad-vs-ids")
        v = C.fresh(f"{node.id}.v", fouts[0][0])
        C.ge(v, tprod(list(ids)), f"{node.id}:vocab-covers-ids")
        return [[v, g[-1]]]


class GnormSqOp(Op):
    kind = "gnorm_sq"  # variadic inputs -> [1], sum of squares of everything

    def infer_shapes(self, node, ins):
        self._want(node, len(ins) >= 1, "expects at least 1 input")
        return [(1,)]

    def deps(self, node, ins, outs, oslot, oidx):
        out = []
        for slot, shape in enumerate(ins):
            for idx in full_box(shape):
                out.append((slot, idx))
        return out

    def kernel(self, node, ctx, args, oidx, outs, ins):
        alg = ctx.alg
        return alg.addn([alg.mul(a, a) for a in args])

    def reduce_dims(self, node, ins, C, fins, fouts):
        if len(ins) == 1:
            C.ge(tsum(list(ins[0])), cint(len(ins[0]) + 1), f"{node.id}:fold-size")
        return [[cint(1)]]


class CommOp(Op):
    """k inputs, k outputs, ordered to match attrs['group']."""
    is_comm = True

    def _k(self, node: Node) -> int:
        return len(node.attrs["group"])

    def infer_shapes(self, node, ins):
        k = self._k(node)
        self._want(node, len(ins) == k, f"expects {k} inputs for group of {k}")
        return self._comm_shapes(node, ins)

    def _comm_shapes(self, node, ins) -> list[Shape]:
        raise NotImplementedError


class AllReduceOp(CommOp):
    kind = "all_reduce"

    def _comm_shapes(self, node, ins):
        for s in ins[1:]:
            self._want(node, s == ins[0], "all_reduce operands must share a shape")
        return [ins[0]] * len(ins)

    def deps(self, node, ins, outs, oslot, oidx):
        return [(i, oidx) for i in range(len(ins))]

    def kernel(self, node, ctx, args, oidx, outs, ins):
        return ctx.alg.addn(args)

    def reduce_dims(self, node, ins, C, fins, fouts):
        for other in ins[1:]:
            _eq_dims(node, C, ins[0], other, "all_reduce")
        return [list(ins[0]) for _ in ins]


class AllGatherOp(CommOp):
    kind = "all_gather"  # attrs: axis

    def _comm_shapes(self, node, ins):
        ax = int(node.attrs["axis"])
        base = list(ins[0])
        total = 0
        for s in ins:
            self._want(node, list(s[:ax]) + list(s[ax + 1:]) == base[:ax] + base[ax + 1:],
                       "all_gather operands differ off-axis")
            total += s[ax]
        base[ax] = total
        return [tuple(base)] * len(ins)

    def deps(self, node, ins, outs, oslot, oidx):
        ax = int(node.attrs["axis"])
        c = oidx[ax]
        for slot, s in enumerate(ins):
            if c < s[ax]:
                idx = list(oidx)
                idx[ax] = c
                return [(slot, tuple(idx))]
            c -= s[ax]
        raise IndexError("all_gather index out of range")

    def kernel(self, node, ctx, args, oidx, outs, ins):
        return args[0]

    def reduce_dims(self, node, ins, C, fins, fouts):
        ax = int(node.attrs["axis"])
        for other in ins[1:]:
            _eq_dims(node, C, ins[0][:ax] + ins[0][ax + 1:],
                     other[:ax] + other[ax + 1:], "all_gather-offaxis")
        out = list(ins[0])
        out[ax] = tsum([s[ax] for s in ins])
        return [out for _ in ins]


class ReduceScatterOp(CommOp):
    kind = "reduce_scatter"  # attrs: axis; output j owns slice j of the sum

    def _comm_shapes(self, node, ins):
        ax = int(node.attrs["axis"])
        k = len(ins)
        for s in ins[1:]:
            self._want(node, s == ins[0], "reduce_scatter operands must share a shape")
        self._want(node, ins[0][ax] % k == 0, "scatter axis must divide evenly")
        out = list(ins[0])
        out[ax] //= k
        return [tuple(out)] * k

    def deps(self, node, ins, outs, oslot, oidx):
        ax = int(node.attrs["axis"])
        width = outs[oslot][ax]
        idx = list(oidx)
        idx[ax] += oslot * width
        return [(i, tuple(idx)) for i in range(len(ins))]

    def kernel(self, node, ctx, args, oidx, outs, ins):
        return ctx.alg.addn(args)

    def reduce_dims(self, node, ins, C, fins, fouts):
        ax = int(node.attrs["axis"])
        k = len(ins)
        for other in ins[1:]:
            _eq_dims(node, C, ins[0], other, "reduce_scatter")
        q = C.fresh(f"{node.id}.q", fouts[0][ax])
        C.eq(ins[0][ax], tprod([cint(k), q]), f"{node.id}:scatter-even")
        out = list(ins[0])
        out[ax] = q
        return [out for _ in ins]


class AllToAllOp(CommOp):
    kind = "all_to_all"  # attrs: split_axis, concat_axis

    def _comm_shapes(self, node, ins):
        sa = int(node.attrs["split_axis"])
        ca = int(node.attrs["concat_axis"])
        k = len(ins)
        for s in ins[1:]:
            self._want(node, s == ins[0], "all_to_all operands must share a shape")
        self._want(node, ins[0][sa] % k == 0, "split axis must divide evenly")
        out = list(ins[0])
        out[sa] //= k
        out[ca] = out[ca] * k
        return [tuple(out)] * k

    def deps(self, node, ins, outs, oslot, oidx):
        sa = int(node.attrs["split_axis"])
        ca = int(node.attrs["concat_axis"])
        k = len(ins)
        seg_len = outs[oslot][ca] // k
        src = oidx[ca] // seg_len
        idx = list(oidx)
        idx[ca] = oidx[ca] % seg_len
        idx[sa] = idx[sa] + oslot * (ins[0][sa] // k)
        return [(src, tuple(idx))]

    def kernel(self, node, ctx, args, oidx, outs, ins):
        return args[0]

    def reduce_dims(self, node, ins, C, fins, fouts):
        sa = int(node.attrs["split_axis"])
        ca = int(node.attrs["concat_axis"])
        k = len(ins)
        for other in ins[1:]:
            _eq_dims(node, C, ins[0], other, "all_to_all")
        q = C.fresh(f"{node.id}.q", fouts[0][sa])
        C.eq(ins[0][sa], tprod([cint(k), q]), f"{node.id}:split-even")
        out = list(ins[0])
        out[sa] = q
        out[ca] = tprod([cint(k), ins[0][ca]])
        return [out for _ in ins]


REGISTRY: dict[str, Op] = {}
for _cls in (AddOp, SubOp, MulOp, DivOp, DropoutOp, SiluGradOp, IdentityOp, ScaleOp,
             ShiftOp, PowOp, RsqrtOp, SiluOp, MoveOp, SoftmaxOp, CreateMaskOp,
             ApplyMaskOp, ViewOp, TransposeOp, ExpandOp, SumOp, MeanOp, MatmulOp,
             EinsumOp, FullOp, ChunkOp, EmbeddingOp, EmbeddingGradOp, GnormSqOp,
             AllReduceOp, AllGatherOp, ReduceScatterOp, AllToAllOp):
    _op = _cls()
    REGISTRY[_op.kind] = _op


def get_op(kind: str) -> Op:
    op = REGISTRY.get(kind)
    if op is None:
        raise UnknownOperator(kind)
    return op


def infer_node_shapes(node: Node, in_shapes: list[Shape]) -> list[Shape]:
    return get_op(node.kind).infer_shapes(node, in_shapes)


def sym_execute(graph, nodes: Sequence[Node], env: dict[str, VTensor],
                shapes: dict[str, Shape], ctx: ExecContext) -> dict[str, VTensor]:
    """Run the given (already topo-ordered) nodes symbolically, extending env.

    `shapes` supplies per-tensor shapes (reduced or full); outputs are placed
    back into env keyed by tensor id.
    """
    for node in nodes:
        op = get_op(node.kind)
        ins = [env[t] for t in node.inputs]
        out_shapes = [shapes[t] for t in node.outputs]
        outs = op.execute(node, ins, out_shapes, ctx)
        for tid, vt in zip(node.outputs, outs):
            env[tid] = vt
    return env
