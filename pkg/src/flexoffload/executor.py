"""Threaded offloading engine.

IO workers pull ``(layer, tensor)`` items from one shared queue in layer
order and read each non-locked tensor into a recycled buffer. The calling
thread drives compute: it waits for a layer's tensors, runs the synthetic
kernel over the layer and then releases the layer's buffers, which is what
lets IO for layer ``i + window_k`` claim a slot.
"""

from __future__ import annotations

import logging
import threading
import time
import zlib
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace

import numpy as np

from .config import ExecutionConfig
from .errors import CorruptionError, UsageError
from .manifest import ModelManifest, Role, TensorSpec, payload_checksums
from .planner import PlanStrategy, PreservationPlan, check_plan, io_bytes_per_token
from .report import RunReport
from .storage import ReadRequest, StoreHandle, aligned_length, alloc_buffer

log = logging.getLogger(__name__)

IO_START, IO_END, COMPUTE_START, COMPUTE_END = "IO_START", "IO_END", "COMPUTE_START", "COMPUTE_END"


class MemoryTracker:
    """Live/peak byte counter for tensor payloads held by the engine."""

    def __init__(self):
        self._lock = threading.Lock()
        self.current = 0
        self.peak = 0

    def allocate(self, n: int) -> None:
        with self._lock:
            self.current += n
            if self.current > self.peak:
                self.peak = self.current

    def release(self, n: int) -> None:
        with self._lock:
            self.current -= n
            assert self.current >= 0, "released more bytes than allocated"


def touch(buf, size: int) -> int:
    """Stream a tensor through the CPU: one 8-byte load per 64-byte cache line.

    Every cache line of the payload is pulled in, so memory traffic equals the
    tensor size, but the ALU work stays small enough that the configured
    ns/byte cost, not the touch itself, sets compute latency.
    """
    words = size // 8
    total = 0
    if words:
        total += int(np.frombuffer(buf, dtype=np.uint64, count=words)[::8].sum(dtype=np.uint64))
    if size % 8:
        total += int(np.frombuffer(buf, dtype=np.uint8, count=size)[words * 8 :].sum())
    return total


class _Kernel:
    """Synthetic compute: touch the layer's bytes, then pad to the configured cost."""

    def __init__(self, config: ExecutionConfig, pool: ThreadPoolExecutor | None):
        self.ns_per_byte = config.compute_cost_ns_per_byte
        self.pool = pool

    def __call__(self, pieces: list[tuple[object, int]], layer_bytes: int) -> None:
        start = time.perf_counter_ns()
        if self.pool is None:
            for buf, size in pieces:
                touch(buf, size)
        else:
            list(self.pool.map(lambda p: touch(*p), pieces))
        deadline = start + int(self.ns_per_byte * layer_bytes)
        remaining = deadline - time.perf_counter_ns()
        if remaining > 0:
            time.sleep(remaining / 1e9)


class _Engine:
    def __init__(self, manifest, plan, store, config, label, trace):
        self.manifest = manifest
        self.plan = plan
        self.store = store
        self.config = config
        self.label = label
        self.trace = trace
        n = manifest.n_layers
        self.n = n
        self.total_layers = config.tokens * n
        self.k = config.window_k

        self.residual: list[list[TensorSpec]] = [
            [t for t in layer.tensors if not plan.is_locked(layer.index, t.role)] for layer in manifest.layers
        ]
        self.cv = threading.Condition()
        self.tracker = MemoryTracker()
        self.error: BaseException | None = None
        self.stop = False

        # LayerProgress: per-layer slot counters, valid for the epoch that owns the slot
        self.loaded = [0] * n
        self.epoch = [-1] * n
        self.buffers: list[dict[Role, object]] = [{} for _ in range(n)]
        self.computed = 0
        self.cursor = (0, 0)  # (global layer index, position within its residual list)

        self.pools: dict[Role, list] = defaultdict(list)
        for role in {t.role for ts in self.residual for t in ts}:
            cap = aligned_length(manifest.role_size(role), manifest.alignment)
            self.pools[role] = [alloc_buffer(cap) for _ in range(self.k)]

        self.resident: dict[str, object] = {}
        self.expected = payload_checksums(manifest, config.seed) if config.verify_payloads else None

        self.io_requests = 0
        self.io_bytes = 0
        self.mem_stall_ns = 0
        self.io_stall_ns = 0
        self.layer_io_stall = [0] * n
        self.layer_compute = [0] * n
        self.violations = 0
        self.t0 = 0

    # -- helpers ---------------------------------------------------------

    def _emit(self, kind, g, tensor=None):
        if self.trace is not None:
            self.trace.append((time.perf_counter_ns() - self.t0, kind, g // self.n, g % self.n, tensor))

    def _verify(self, name: str, buf, size: int, token: int) -> None:
        if self.expected is None:
            return
        got = zlib.crc32(memoryview(buf)[:size])
        if got != self.expected[name]:
            raise CorruptionError(f"payload mismatch for tensor {name} at token {token}")

    def _next_item(self):
        g, pos = self.cursor
        while g < self.total_layers and pos >= len(self.residual[g % self.n]):
            g, pos = g + 1, 0
        self.cursor = (g, pos)
        if g >= self.total_layers:
            return None
        return g, self.residual[g % self.n][pos]

    # -- startup ---------------------------------------------------------

    def load_resident(self) -> None:
        """Read embeddings and locked tensors once; charged to peak memory."""
        wanted = list(self.manifest.embeddings)
        for layer in self.manifest.layers:
            wanted += [t for t in layer.tensors if self.plan.is_locked(layer.index, t.role)]
        for t in wanted:
            if t.size_bytes == 0:
                continue
            buf = alloc_buffer(self.store.read_length(t))
            self.tracker.allocate(t.size_bytes)
            self.store.read_tensor(ReadRequest(t, buf))
            self._verify(t.name, buf, t.size_bytes, -1)
            self.resident[t.name] = buf

    # -- IO side ---------------------------------------------------------

    def io_worker(self) -> None:
        try:
            while True:
                with self.cv:
                    waited_from = None
                    while True:
                        if self.stop:
                            return
                        item = self._next_item()
                        if item is None:
                            return
                        if item[0] < self.computed + self.k:
                            break
                        if waited_from is None:
                            waited_from = time.perf_counter_ns()
                        self.cv.wait()
                    if waited_from is not None:
                        self.mem_stall_ns += time.perf_counter_ns() - waited_from
                    g, tensor = item
                    self.cursor = (self.cursor[0], self.cursor[1] + 1)
                    slot = g % self.n
                    if self.epoch[slot] != g:
                        assert self.loaded[slot] == 0 and not self.buffers[slot], "slot reused before release"
                        self.epoch[slot] = g
                    buf = self.pools[tensor.role].pop()
                    self.buffers[slot][tensor.role] = buf
                    self.tracker.allocate(tensor.size_bytes)
                    self._emit(IO_START, g, tensor.name)
                n = self.store.read_tensor(ReadRequest(tensor, buf))
                with self.cv:
                    self._emit(IO_END, g, tensor.name)
                    self.io_requests += 1
                    self.io_bytes += n
                    self.loaded[slot] += 1
                    self.cv.notify_all()
        except BaseException as exc:  # noqa: BLE001 - propagated to the coordinator
            with self.cv:
                if self.error is None:
                    self.error = exc
                self.stop = True
                self.cv.notify_all()

    # -- compute side ----------------------------------------------------

    def compute_loop(self, kernel: _Kernel) -> None:
        for g in range(self.total_layers):
            slot = g % self.n
            layer = self.manifest.layers[slot]
            need = len(self.residual[slot])
            with self.cv:
                waited_from = time.perf_counter_ns()
                while not self.stop and not (self.epoch[slot] == g and self.loaded[slot] == need) and need:
                    self.cv.wait()
                if self.error is not None:
                    raise self.error
                waited = time.perf_counter_ns() - waited_from
                if need and (self.epoch[slot] != g or self.loaded[slot] != need):
                    self.violations += 1
                loaded = dict(self.buffers[slot])
            self.io_stall_ns += waited
            self.layer_io_stall[slot] += waited

            self._emit(COMPUTE_START, g)
            c0 = time.perf_counter_ns()
            pieces = []
            for t in layer.tensors:
                if t.role in loaded:
                    buf = loaded[t.role]
                    self._verify(t.name, buf, t.size_bytes, g // self.n)
                else:
                    buf = self.resident[t.name]
                pieces.append((buf, t.size_bytes))
            kernel(pieces, layer.size_bytes)
            self.layer_compute[slot] += time.perf_counter_ns() - c0
            self._emit(COMPUTE_END, g)

            with self.cv:
                for t in self.residual[slot]:
                    self.pools[t.role].append(self.buffers[slot].pop(t.role))
                    self.tracker.release(t.size_bytes)
                self.loaded[slot] = 0
                self.computed += 1
                self.cv.notify_all()

    def run(self) -> RunReport:
        cfg = self.config
        w0 = time.perf_counter()
        self.load_resident()
        warmup = time.perf_counter() - w0

        compute_pool = ThreadPoolExecutor(cfg.compute_threads) if cfg.compute_threads > 1 else None
        kernel = _Kernel(cfg, compute_pool)
        workers = [threading.Thread(target=self.io_worker, name=f"io-{i}", daemon=True) for i in range(cfg.io_threads)]
        self.t0 = time.perf_counter_ns()
        start = time.perf_counter()
        for w in workers:
            w.start()
        try:
            self.compute_loop(kernel)
        except BaseException:
            with self.cv:
                self.stop = True
                self.cv.notify_all()
            raise
        finally:
            for w in workers:
                w.join()
            if compute_pool is not None:
                compute_pool.shutdown()
        wall = time.perf_counter() - start
        if self.error is not None:
            raise self.error
        if self.violations:
            raise AssertionError(f"{self.violations} layers computed before their tensors were loaded")
        return RunReport(
            strategy=self.label,
            budget_bytes=self.plan.budget_bytes,
            window_k=self.k,
            io_threads=cfg.io_threads,
            compute_threads=cfg.compute_threads,
            read_mode=cfg.read_mode.value,
            tokens_generated=cfg.tokens,
            wall_time_s=wall,
            throughput_tokens_per_s=cfg.tokens / wall if wall > 0 else float("inf"),
            peak_tracked_bytes=self.tracker.peak,
            io_bytes_total=self.io_bytes,
            io_stall_ns=self.io_stall_ns,
            mem_stall_ns=self.mem_stall_ns,
            warmup_s=warmup,
            layer_io_stall_ns=tuple(self.layer_io_stall),
            layer_compute_ns=tuple(self.layer_compute),
            io_requests=self.io_requests,
        )


def run(
    manifest: ModelManifest,
    plan: PreservationPlan,
    store: StoreHandle,
    config: ExecutionConfig,
    trace: list | None = None,
    label: str | None = None,
) -> RunReport:
    """Generate ``config.tokens`` tokens with windowed asynchronous prefetching.

    ``trace``, when given, receives ``(t_ns, kind, token, layer, tensor)``
    tuples for every IO and compute boundary.
    """
    check_plan(manifest, plan)
    config.check_against(manifest.n_layers)
    engine = _Engine(manifest, plan, store, config, label or plan.strategy.value, trace)
    report = engine.run()
    expected = config.tokens * io_bytes_per_token(plan)
    assert report.io_bytes_total == expected, (report.io_bytes_total, expected)
    return report


def run_sync(
    manifest: ModelManifest,
    plan: PreservationPlan,
    store: StoreHandle,
    config: ExecutionConfig,
    trace: list | None = None,
) -> RunReport:
    """Synchronous offloading: a layer's reads finish before its compute, no lookahead.

    This is the prefetch engine with a one-layer window; reads within a
    layer still fan out over ``io_threads``.
    """
    label = "sync" if plan.strategy is PlanStrategy.NONE else f"{plan.strategy.value}-sync"
    return run(manifest, plan, store, replace(config, window_k=1), trace=trace, label=label)


def run_mmap_like(
    manifest: ModelManifest,
    store: StoreHandle,
    config: ExecutionConfig,
    trace: list | None = None,
    page_bytes: int | None = None,
) -> RunReport:
    """Demand-paging baseline: one thread, page-sized reads of every tensor, every token."""
    page = page_bytes or config.page_bytes
    if page < 1:
        raise UsageError("page_bytes must be >= 1")
    if store.mode.value == "bypass" and page % manifest.alignment:
        raise UsageError(f"page_bytes {page} must be a multiple of alignment {manifest.alignment} in bypass mode")
    config.check_against(manifest.n_layers)

    tracker = MemoryTracker()
    expected = payload_checksums(manifest, config.seed) if config.verify_payloads else None
    for t in manifest.embeddings:
        tracker.allocate(t.size_bytes)
    buffers = {
        role: alloc_buffer(aligned_length(manifest.role_size(role), manifest.alignment) + aligned_length(page, manifest.alignment))
        for role in {t.role for t in manifest.layers[0].tensors}
    }
    kernel = _Kernel(config, None)
    n = manifest.n_layers
    io_stall = 0
    io_bytes = 0
    requests = 0
    layer_io = [0] * n
    layer_compute = [0] * n
    t0 = time.perf_counter_ns()

    def emit(kind, g, name=None):
        if trace is not None:
            trace.append((time.perf_counter_ns() - t0, kind, g // n, g % n, name))

    start = time.perf_counter()
    for g in range(config.tokens * n):
        layer = manifest.layers[g % n]
        r0 = time.perf_counter_ns()
        for t in layer.tensors:
            buf = buffers[t.role]
            tracker.allocate(t.size_bytes)
            emit(IO_START, g, t.name)
            for first in range(0, t.size_bytes, page):
                length = min(page, t.size_bytes - first)
                view = memoryview(buf)[first:]
                io_bytes += store.read_tensor(ReadRequest(t, view), start=first, length=length)
                requests += 1
            emit(IO_END, g, t.name)
        waited = time.perf_counter_ns() - r0
        io_stall += waited
        layer_io[g % n] += waited

        emit(COMPUTE_START, g)
        c0 = time.perf_counter_ns()
        pieces = []
        for t in layer.tensors:
            if expected is not None and zlib.crc32(memoryview(buffers[t.role])[: t.size_bytes]) != expected[t.name]:
                raise CorruptionError(f"payload mismatch for tensor {t.name} at token {g // n}")
            pieces.append((buffers[t.role], t.size_bytes))
        kernel(pieces, layer.size_bytes)
        layer_compute[g % n] += time.perf_counter_ns() - c0
        emit(COMPUTE_END, g)
        tracker.release(layer.size_bytes)
    wall = time.perf_counter() - start

    return RunReport(
        strategy="mmap",
        budget_bytes=config.budget_bytes,
        window_k=1,
        io_threads=1,
        compute_threads=1,
        read_mode=config.read_mode.value,
        tokens_generated=config.tokens,
        wall_time_s=wall,
        throughput_tokens_per_s=config.tokens / wall if wall > 0 else float("inf"),
        peak_tracked_bytes=tracker.peak,
        io_bytes_total=io_bytes,
        io_stall_ns=io_stall,
        mem_stall_ns=0,
        layer_io_stall_ns=tuple(layer_io),
        layer_compute_ns=tuple(layer_compute),
        io_requests=requests,
    )
