"""Closed-form throughput predictors for synchronous and overlapped offloading."""

from __future__ import annotations

from dataclasses import dataclass

from .errors import InvalidParameterError, ModelUndefinedError
from .planner import PreservationPlan, io_bytes_per_token


@dataclass(frozen=True)
class CostModel:
    """Hardware model: aggregate storage bandwidth and a byte-proportional compute cost.

    The simulator splits bandwidth evenly over ``io_channels`` servers and
    charges ``per_tensor_io_overhead_ns`` per request; the closed forms below
    ignore the overhead.
    """

    io_bandwidth_bytes_per_s: float
    compute_ns_per_byte: float = 0.0
    per_tensor_io_overhead_ns: float = 0.0
    io_channels: int = 1

    def __post_init__(self):
        if self.io_bandwidth_bytes_per_s < 0:
            raise InvalidParameterError("io_bandwidth_bytes_per_s must be >= 0")
        if self.compute_ns_per_byte < 0 or self.per_tensor_io_overhead_ns < 0:
            raise InvalidParameterError("costs must be non-negative")
        if self.io_channels < 1:
            raise InvalidParameterError("io_channels must be >= 1")

    def compute_latency_s(self, layer_bytes_total: int) -> float:
        return self.compute_ns_per_byte * layer_bytes_total / 1e9

    def io_time_s(self, io_bytes: int) -> float:
        if io_bytes == 0:
            return 0.0
        if self.io_bandwidth_bytes_per_s == 0:
            raise ModelUndefinedError("zero bandwidth with nonzero IO per token")
        return io_bytes / self.io_bandwidth_bytes_per_s


def _rate(seconds: float) -> float:
    if seconds <= 0:
        raise ModelUndefinedError("per-token latency is zero; throughput unbounded")
    return 1.0 / seconds


def predict_sync(plan: PreservationPlan, cost: CostModel, layer_bytes_total: int) -> float:
    """Tokens/s when each layer's IO and compute run back to back."""
    return _rate(cost.compute_latency_s(layer_bytes_total) + cost.io_time_s(io_bytes_per_token(plan)))


def predict_async(plan: PreservationPlan, cost: CostModel, layer_bytes_total: int) -> float:
    """Tokens/s when IO fully overlaps compute: the slower side binds."""
    return _rate(max(cost.compute_latency_s(layer_bytes_total), cost.io_time_s(io_bytes_per_token(plan))))
