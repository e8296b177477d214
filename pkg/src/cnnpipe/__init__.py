"""Pipeline planning and simulation for CNN inference on device clusters."""

from importlib import resources

from .cost import Cluster, CostBreakdown, DeviceSpec, Region, piece_redundancy, receptive_field, stage_cost
from .graph import LayerSpec, ModelError, ModelGraph, VertexSet, parse_model, topological_order, width
from .oracle import OracleReport, oracle_heterogeneous, oracle_homogeneous
from .partition import PartitionResult, Piece, partition, partition_large
from .planner import (
    InfeasibleError,
    PipelinePlan,
    StageConfig,
    adapt_heterogeneous,
    averaged_cluster,
    balance_strips,
    plan,
    plan_homogeneous,
)
from .simulator import SimConfig, SimReport, estimate_memory, simulate

__version__ = "0.1.0"

FIXTURES = ("vgg16", "yolov2", "resnet_block", "inception_c", "unbalanced", "fig8", "nas_like")


def fixture_path(name: str):
    """Path of a bundled model file, e.g. ``fixture_path("vgg16")``."""
    return resources.files(__package__) / "fixtures" / f"{name}.json"


def load_fixture(name: str) -> ModelGraph:
    return parse_model(fixture_path(name).read_bytes())


__all__ = [
    "Cluster", "CostBreakdown", "DeviceSpec", "Region", "piece_redundancy", "receptive_field", "stage_cost",
    "LayerSpec", "ModelError", "ModelGraph", "VertexSet", "parse_model", "topological_order", "width",
    "OracleReport", "oracle_heterogeneous", "oracle_homogeneous",
    "PartitionResult", "Piece", "partition", "partition_large",
    "InfeasibleError", "PipelinePlan", "StageConfig", "adapt_heterogeneous", "averaged_cluster",
    "balance_strips", "plan", "plan_homogeneous",
    "SimConfig", "SimReport", "estimate_memory", "simulate",
    "FIXTURES", "fixture_path", "load_fixture",
]
