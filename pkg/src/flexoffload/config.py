from __future__ import annotations

from dataclasses import dataclass

from .errors import InvalidParameterError, UsageError
from .planner import PlanStrategy
from .storage import ReadMode

DEFAULT_WINDOW = 3


@dataclass(frozen=True)
class ExecutionConfig:
    """Knobs shared by the threaded executor and the simulator.

    ``window_k`` counts layers whose prefetched tensors may be live at once,
    including the layer currently being computed, so ``window_k == 1`` means
    no lookahead.
    """

    strategy: PlanStrategy = PlanStrategy.FLEX
    budget_bytes: int = 0
    window_k: int = DEFAULT_WINDOW
    io_threads: int = 4
    compute_threads: int = 1
    read_mode: ReadMode = ReadMode.CACHED
    tokens: int = 1
    compute_cost_ns_per_byte: float = 0.0
    verify_payloads: bool = False
    seed: int = 0
    page_bytes: int = 4096

    def __post_init__(self):
        object.__setattr__(self, "strategy", PlanStrategy(self.strategy))
        object.__setattr__(self, "read_mode", ReadMode(self.read_mode))
        for name in ("window_k", "io_threads", "compute_threads", "tokens", "page_bytes"):
            if getattr(self, name) < 1:
                raise InvalidParameterError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.compute_cost_ns_per_byte < 0:
            raise InvalidParameterError("compute_cost_ns_per_byte must be >= 0")
        if self.budget_bytes < 0:
            raise InvalidParameterError("budget_bytes must be >= 0")

    def check_against(self, n_layers: int) -> None:
        if self.window_k > n_layers:
            raise UsageError(f"window_k {self.window_k} exceeds the model's {n_layers} layers")
