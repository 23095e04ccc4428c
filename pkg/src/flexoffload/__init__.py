"""Memory-budgeted tensor offloading: preservation planning, windowed prefetch, simulation."""

from .config import ExecutionConfig
from .errors import (
    CapabilityError,
    CorruptionError,
    FlexOffloadError,
    InsufficientBudgetError,
    InvalidParameterError,
    StorageError,
    UsageError,
)
from .executor import run, run_mmap_like, run_sync
from .manifest import ModelManifest, Role, generate_manifest, validate_manifest, write_blob
from .perfmodel import CostModel, predict_async, predict_sync
from .planner import PlanStrategy, PreservationPlan, io_bytes_per_token, plan, residual_spread
from .report import RunReport
from .simulator import SimTimeline, simulate, sweep
from .storage import ReadMode, ReadRequest, StoreHandle, measure_bandwidth, open_store

__version__ = "0.1.0"

__all__ = [
    "ExecutionConfig",
    "FlexOffloadError",
    "UsageError",
    "InvalidParameterError",
    "InsufficientBudgetError",
    "StorageError",
    "CapabilityError",
    "CorruptionError",
    "run",
    "run_sync",
    "run_mmap_like",
    "ModelManifest",
    "Role",
    "generate_manifest",
    "validate_manifest",
    "write_blob",
    "CostModel",
    "predict_sync",
    "predict_async",
    "PlanStrategy",
    "PreservationPlan",
    "plan",
    "residual_spread",
    "io_bytes_per_token",
    "RunReport",
    "SimTimeline",
    "simulate",
    "sweep",
    "ReadMode",
    "ReadRequest",
    "StoreHandle",
    "open_store",
    "measure_bandwidth",
]
