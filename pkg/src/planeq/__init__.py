"""Equivalence checking between a logical training graph and its distributed plan."""

from .errors import (
    ConfigError,
    CycleError,
    DanglingTensorError,
    GraphError,
    InfeasibleShapes,
    PlanEqError,
    PlanFormatError,
    SchemaVersionError,
    ShapeError,
    UncoveredNode,
)
from .graph import Graph, LineageEntry, Node, Shard, Tensor, validate_lineage
from .plan import Plan, load, plan_from_dict, plan_to_dict, save
from .shapes import reduce_plan
from .verify import VerifyOptions, verify_plan

__all__ = [
    "ConfigError",
    "CycleError",
    "DanglingTensorError",
    "Graph",
    "GraphError",
    "InfeasibleShapes",
    "LineageEntry",
    "Node",
    "Plan",
    "PlanEqError",
    "PlanFormatError",
    "SchemaVersionError",
    "Shard",
    "ShapeError",
    "Tensor",
    "UncoveredNode",
    "VerifyOptions",
    "load",
    "plan_from_dict",
    "plan_to_dict",
    "reduce_plan",
    "save",
    "validate_lineage",
    "verify_plan",
]

__version__ = "0.1.0"
