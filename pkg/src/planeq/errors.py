"""Exception taxonomy shared across the package.

Every structured failure the pipeline can produce maps to one of these, so the
CLI can translate exceptions into exit codes without string matching.
"""

from __future__ import annotations


class PlanEqError(Exception):
    """Base class for all package errors."""


class PlanFormatError(PlanEqError):
    """Plan JSON is malformed or violates basic invariants."""


class SchemaVersionError(PlanFormatError):
    """Plan JSON declares an unsupported format version."""


class ConfigError(PlanEqError):
    """Invalid model or parallelization configuration."""


class GraphError(PlanEqError):
    """Base for graph structure problems."""


class CycleError(GraphError):
    """Topological sort found a dependency cycle."""

    def __init__(self, remaining: list[str]):
        self.remaining = remaining
        super().__init__(f"dependency cycle among nodes: {sorted(remaining)[:8]}")


class DanglingTensorError(GraphError):
    """A node consumes a tensor that nothing produces and that is not a graph input."""

    def __init__(self, tensor: str, node: str):
        self.tensor = tensor
        self.node = node
        super().__init__(f"node {node!r} consumes undefined tensor {tensor!r}")


class UnknownOperator(GraphError):
    """Node kind has no registered semantics."""

    def __init__(self, kind: str):
        self.kind = kind
        super().__init__(f"unknown operator kind {kind!r}")


class UnsupportedOperator(PlanEqError):
    """Operator is known but appears in a configuration the tool cannot handle."""


class ShapeError(PlanEqError):
    """Operator shape rule violated at declared shapes."""


class InfeasibleShapes(PlanEqError):
    """Shape reduction found the constraint system unsatisfiable.

    Carries a witness: the subset of constraints (as strings) that pinpoint
    the conflict, plus the node that introduced the clash when known.
    """

    def __init__(self, message: str, witness: list[str] | None = None, node: str | None = None):
        self.witness = witness or []
        self.node = node
        super().__init__(message)


class LineageShapeConflict(PlanEqError):
    """Reduced shard shapes cannot be stitched into a consistent logical shape."""


class UncoveredNode(PlanEqError):
    """A parallel node was claimed by no verification stage."""

    def __init__(self, nodes: list[str]):
        self.nodes = nodes
        super().__init__(f"{len(nodes)} parallel node(s) covered by no stage: {sorted(nodes)[:8]}")


class SolverUnavailable(PlanEqError):
    """No usable solver backend could be located or started."""


class SolverProtocolError(PlanEqError):
    """Solver child process answered outside the expected protocol."""


class OracleMismatch(PlanEqError):
    """Differential testing found a disagreement (used by oracle-check reporting)."""
