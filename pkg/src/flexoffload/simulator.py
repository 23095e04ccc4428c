"""Deterministic discrete-event model of the offloading engine.

Same scheduling rules as the threaded executor: a shared in-order IO queue
served by ``io_channels`` servers, a sliding window of ``window_k`` layers
counted inclusively from the layer being computed, release on compute
completion. Time is integer nanoseconds.
"""

from __future__ import annotations

import heapq
import random
from collections import Counter
from dataclasses import dataclass, field, replace

from .config import ExecutionConfig
from .errors import UsageError
from .executor import COMPUTE_END, COMPUTE_START, IO_END, IO_START
from .manifest import ModelManifest
from .perfmodel import CostModel, predict_async, predict_sync
from .planner import PlanStrategy, PreservationPlan, check_plan, empty_plan, io_bytes_per_token, plan
from .report import RunReport

PREFETCH, SYNC, MMAP = "prefetch", "sync", "mmap"

# CLI/sweep scenario name -> (plan strategy, schedule)
SCENARIOS = {
    "flex": (PlanStrategy.FLEX, PREFETCH),
    "layer-order": (PlanStrategy.LAYER_ORDER, PREFETCH),
    "attn-first": (PlanStrategy.ATTN_FIRST, PREFETCH),
    "ffn-first": (PlanStrategy.FFN_FIRST, PREFETCH),
    "none": (PlanStrategy.NONE, PREFETCH),
    "sync": (PlanStrategy.NONE, SYNC),
    "flex-sync": (PlanStrategy.FLEX, SYNC),
    "mmap": (PlanStrategy.NONE, MMAP),
}


@dataclass
class SimTimeline:
    events: list = field(default_factory=list)  # (t_ns, kind, token, layer, tensor)
    report: RunReport | None = None
    steady_throughput_tps: float = 0.0
    steady_start_ns: int = 0
    end_ns: int = 0
    token_end_ns: list = field(default_factory=list)
    token_compute_ns: list = field(default_factory=list)
    token_io_stall_ns: list = field(default_factory=list)


def simulate(
    manifest: ModelManifest,
    plan: PreservationPlan,
    config: ExecutionConfig,
    cost: CostModel,
    schedule: str = PREFETCH,
    jitter: tuple[int, int] | None = None,
    record: bool = True,
) -> SimTimeline:
    """Run the scheduling rules on a simulated clock.

    ``schedule`` is ``prefetch`` (window ``config.window_k``), ``sync`` (no
    lookahead) or ``mmap`` (one channel, page-sized requests for every
    tensor regardless of the plan). ``jitter=(seed, max_ns)`` adds a
    reproducible random delay to every request.
    """
    if schedule not in (PREFETCH, SYNC, MMAP):
        raise UsageError(f"unknown schedule {schedule!r}")
    try:
        check_plan(manifest, plan)
    except UsageError as exc:
        raise UsageError(f"plan/manifest mismatch: {exc}") from None
    config.check_against(manifest.n_layers)
    if cost.io_bandwidth_bytes_per_s <= 0 and io_bytes_per_token(plan) > 0:
        raise UsageError("simulation needs positive bandwidth when any tensor is offloaded")

    n = manifest.n_layers
    total = config.tokens * n
    if schedule == MMAP:
        plan = empty_plan(manifest)
        k, channels = 1, 1
    elif schedule == SYNC:
        k, channels = 1, cost.io_channels
    else:
        k, channels = config.window_k, cost.io_channels

    rate = cost.io_bandwidth_bytes_per_s / cost.io_channels
    rng = random.Random(jitter[0]) if jitter else None

    # per-layer request list: (tensor, bytes, first request of tensor, last request of tensor)
    requests: list[list] = []
    for layer in manifest.layers:
        reqs = []
        for t in layer.tensors:
            if plan.is_locked(layer.index, t.role):
                continue
            if schedule == MMAP:
                page = config.page_bytes
                starts = range(0, t.size_bytes, page)
                for first in starts:
                    reqs.append((t, min(page, t.size_bytes - first), first == 0, first == starts[-1]))
            else:
                reqs.append((t, t.size_bytes, True, True))
        requests.append(reqs)
    layer_compute_ns = [round(cost.compute_ns_per_byte * layer.size_bytes) for layer in manifest.layers]

    def service_ns(nbytes: int) -> int:
        ns = round(cost.per_tensor_io_overhead_ns + nbytes * 1e9 / rate)
        if rng is not None:
            ns += rng.randint(0, jitter[1])
        return ns

    events = []
    heap: list = []
    seq = 0
    now = 0
    free = channels
    cursor_g, cursor_pos = 0, 0
    loaded: Counter = Counter()
    computed = 0
    computing = False
    live = manifest.embedding_bytes + plan.locked_bytes
    peak = live
    io_bytes = 0
    io_requests = 0
    io_stall = 0
    mem_stall = 0
    layer_io_stall = [0] * n
    layer_busy = [0] * n
    steady_start = 0
    layer_end: list[int] = []
    token_end, token_compute, token_stall = [], [0] * config.tokens, [0] * config.tokens

    def emit(kind, g, name=None):
        if record:
            events.append((now, kind, g // n, g % n, name))

    def next_item():
        nonlocal cursor_g, cursor_pos
        while cursor_g < total and cursor_pos >= len(requests[cursor_g % n]):
            cursor_g, cursor_pos = cursor_g + 1, 0
        return cursor_g if cursor_g < total else None

    def dispatch():
        nonlocal free, cursor_pos, seq, live, peak, io_requests
        while free:
            g = next_item()
            if g is None or g >= computed + k:
                return
            t, nbytes, first, last = requests[g % n][cursor_pos]
            cursor_pos += 1
            free -= 1
            if first:
                live += t.size_bytes
                peak = max(peak, live)
                emit(IO_START, g, t.name)
            io_requests += 1
            seq += 1
            heapq.heappush(heap, (now + service_ns(nbytes), seq, IO_END, g, t, (nbytes, last)))

    def try_compute():
        nonlocal computing, seq
        if computing or computed >= total:
            return
        g = computed
        if loaded[g] < len(requests[g % n]):
            return
        computing = True
        emit(COMPUTE_START, g)
        seq += 1
        heapq.heappush(heap, (now + layer_compute_ns[g % n], seq, COMPUTE_END, g, None, None))

    def blocked_channels() -> int:
        if not free:
            return 0
        g = next_item()
        return free if g is not None and g >= computed + k else 0

    dispatch()
    try_compute()
    while heap:
        t_next, _, kind, g, tensor, payload = heapq.heappop(heap)
        dt = t_next - now
        if dt:
            if not computing and computed < total:
                io_stall += dt
                layer_io_stall[computed % n] += dt
                token_stall[computed // n] += dt
            mem_stall += blocked_channels() * dt
        now = t_next
        if kind == IO_END:
            nbytes, last = payload
            free += 1
            loaded[g] += 1
            io_bytes += nbytes
            if last:
                emit(IO_END, g, tensor.name)
        else:
            computing = False
            emit(COMPUTE_END, g)
            layer_busy[g % n] += layer_compute_ns[g % n]
            token_compute[g // n] += layer_compute_ns[g % n]
            live -= plan.residual_bytes_per_layer[g % n]
            del loaded[g]
            computed += 1
            layer_end.append(now)
            if computed == k:
                steady_start = now
            if computed % n == 0:
                token_end.append(now)
        dispatch()
        try_compute()

    assert computed == total, "simulation stalled"
    end = now
    wall_s = end / 1e9
    throughput = config.tokens / wall_s if end else float("inf")
    # Steady state: whole tokens' worth of layers after the first k, so the
    # per-layer mix matches the closed forms.
    if config.tokens > 1:
        span = layer_end[k - 1 + (config.tokens - 1) * n] - layer_end[k - 1]
        steady = (config.tokens - 1) / (span / 1e9) if span else float("inf")
    else:
        steady = throughput

    label = {PREFETCH: plan.strategy.value, SYNC: "sync" if plan.strategy is PlanStrategy.NONE else f"{plan.strategy.value}-sync", MMAP: "mmap"}[schedule]
    report = RunReport(
        strategy=label,
        budget_bytes=plan.budget_bytes if schedule != MMAP else config.budget_bytes,
        window_k=k,
        io_threads=channels,
        compute_threads=config.compute_threads,
        read_mode=config.read_mode.value,
        tokens_generated=config.tokens,
        wall_time_s=wall_s,
        throughput_tokens_per_s=throughput,
        peak_tracked_bytes=peak,
        io_bytes_total=io_bytes,
        io_stall_ns=io_stall,
        mem_stall_ns=mem_stall,
        layer_io_stall_ns=tuple(layer_io_stall),
        layer_compute_ns=tuple(layer_busy),
        io_requests=io_requests,
        source="simulated",
    )
    return SimTimeline(events, report, steady, steady_start, end, token_end, token_compute, token_stall)



# ---------------------------------------------------------------------------
# Trace analysis shared by simulator and executor tests
# ---------------------------------------------------------------------------


def read_multisets(events) -> dict[int, Counter]:
    """Tensor names whose IO completed, per token."""
    out: dict[int, Counter] = {}
    for _, kind, token, _, name in events:
        if kind == IO_END:
            out.setdefault(token, Counter())[name] += 1
    return out


def causality_violations(events, manifest: ModelManifest, plan: PreservationPlan) -> list[str]:
    """Compute starts that precede a non-locked tensor's IO completion, or out-of-order layers."""
    problems = []
    expected_next = 0
    n = manifest.n_layers
    need = [
        {t.name for t in layer.tensors if not plan.is_locked(layer.index, t.role)} for layer in manifest.layers
    ]
    got: dict[tuple[int, int], set] = {}
    for _, kind, token, layer, name in sorted(events, key=lambda e: (e[0], _KIND_ORDER[e[1]])):
        if kind == IO_END:
            got.setdefault((token, layer), set()).add(name)
        elif kind == COMPUTE_START:
            g = token * n + layer
            if g != expected_next:
                problems.append(f"token {token} layer {layer} computed out of order")
            missing = need[layer] - got.get((token, layer), set())
            if missing:
                problems.append(f"token {token} layer {layer} computed before loading {sorted(missing)}")
        elif kind == COMPUTE_END:
            expected_next = token * n + layer + 1
    return problems


_KIND_ORDER = {IO_END: 0, COMPUTE_END: 1, COMPUTE_START: 2, IO_START: 3}


def live_layer_spans(events, n_layers: int) -> int:
    """Largest span of consecutive global layer indices with live prefetched buffers."""
    live: set[int] = set()
    widest = 0
    for _, kind, token, layer, _ in sorted(events, key=lambda e: (e[0], _KIND_ORDER[e[1]])):
        g = token * n_layers + layer
        if kind == IO_START:
            live.add(g)
            widest = max(widest, max(live) - min(live) + 1)
        elif kind == COMPUTE_END:
            live.discard(g)
    return widest


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------


def analytic_report(manifest: ModelManifest, p: PreservationPlan, config: ExecutionConfig, cost: CostModel, schedule: str) -> RunReport:
    """RunReport filled from the closed-form predictors."""
    if schedule == MMAP:
        p = empty_plan(manifest)
        cost = replace(cost, io_bandwidth_bytes_per_s=cost.io_bandwidth_bytes_per_s / cost.io_channels)
    layer_bytes = manifest.decoding_bytes
    predictor = predict_async if schedule == PREFETCH else predict_sync
    tps = predictor(p, cost, layer_bytes)
    io = cost.io_time_s(io_bytes_per_token(p))
    comp = cost.compute_latency_s(layer_bytes)
    k = config.window_k if schedule == PREFETCH else 1
    max_resid = max(p.residual_bytes_per_layer)
    if schedule == PREFETCH:
        io_stall, mem_stall = max(0.0, io - comp), max(0.0, comp - io)
    else:
        io_stall, mem_stall = io, comp
    tokens = config.tokens
    label = {PREFETCH: p.strategy.value, SYNC: "sync" if p.strategy is PlanStrategy.NONE else f"{p.strategy.value}-sync", MMAP: "mmap"}[schedule]
    return RunReport(
        strategy=label,
        budget_bytes=p.budget_bytes if schedule != MMAP else config.budget_bytes,
        window_k=k,
        io_threads=1 if schedule == MMAP else cost.io_channels,
        compute_threads=config.compute_threads,
        read_mode=config.read_mode.value,
        tokens_generated=tokens,
        wall_time_s=tokens / tps,
        throughput_tokens_per_s=tps,
        peak_tracked_bytes=p.embedding_bytes + p.locked_bytes + k * max_resid,
        io_bytes_total=tokens * io_bytes_per_token(p),
        io_stall_ns=round(io_stall * 1e9 * tokens),
        mem_stall_ns=round(mem_stall * 1e9 * tokens),
        source="analytic",
    )


def sweep(
    manifest: ModelManifest,
    budgets: list[int],
    strategies: list[str],
    config: ExecutionConfig,
    cost: CostModel,
    mode: str = "simulated",
) -> list[RunReport]:
    """Factorial budget x scenario table, budgets outermost, rows in input order."""
    if list(budgets) != sorted(budgets):
        raise UsageError("budgets must be sorted ascending")
    unknown = [s for s in strategies if s not in SCENARIOS]
    if unknown:
        raise UsageError(f"unknown strategies {unknown}; choose from {sorted(SCENARIOS)}")
    if mode not in ("simulated", "analytic"):
        raise UsageError(f"unknown sweep mode {mode!r}")
    rows = []
    for budget in budgets:
        for name in strategies:
            strategy, schedule = SCENARIOS[name]
            p = plan(manifest, budget, strategy)
            cfg = replace(config, strategy=strategy, budget_bytes=budget)
            if mode == "analytic":
                rows.append(analytic_report(manifest, p, cfg, cost, schedule))
            else:
                rows.append(simulate(manifest, p, cfg, cost, schedule, record=False).report)
    return rows
