"""Deterministic simulator of a split-model API marketplace on a validated ledger."""

from .audit import (
    CATALOG,
    Claim,
    ClaimKind,
    Escrow,
    ExecutionTrace,
    MissingFragments,
    Verdict,
    inject_adversary,
    reconstruct_trace,
    resolve,
    usage_audit,
)
from .ledger import Ledger, ValidationRejected, VirtualId
from .market import Marketplace
from .model_ir import GraphBuilder, ModelGraph, evaluate, hash_component
from .partitioner import PartitionPlan, partition
from .runner import run_scenario
from .scenario import Scenario, load_scenario

__version__ = "0.1.0"

__all__ = [
    "CATALOG",
    "Claim",
    "ClaimKind",
    "Escrow",
    "ExecutionTrace",
    "GraphBuilder",
    "Ledger",
    "Marketplace",
    "MissingFragments",
    "ModelGraph",
    "PartitionPlan",
    "Scenario",
    "ValidationRejected",
    "Verdict",
    "VirtualId",
    "evaluate",
    "hash_component",
    "inject_adversary",
    "load_scenario",
    "partition",
    "reconstruct_trace",
    "resolve",
    "run_scenario",
    "usage_audit",
]
