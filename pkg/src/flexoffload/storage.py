"""Whole-tensor reads from the packed blob, optionally bypassing the page cache."""

from __future__ import annotations

import enum
import mmap
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable

from .errors import CapabilityError, StorageError, UsageError
from .manifest import ModelManifest, TensorSpec


class ReadMode(str, enum.Enum):
    CACHED = "cached"
    BYPASS = "bypass"


def aligned_length(size: int, alignment: int) -> int:
    return -(-size // alignment) * alignment


def alloc_buffer(size: int) -> mmap.mmap:
    """Page-aligned anonymous buffer, usable as a direct-IO destination."""
    return mmap.mmap(-1, max(size, 1))


@dataclass
class ReadRequest:
    tensor: TensorSpec
    destination: object  # any writable buffer-protocol object


class StoreHandle:
    """Shared read handle over a blob file.

    ``read_tensor`` may be called from many threads at once provided each
    call gets its own destination. ``on_read`` (when set) observes every
    underlying ``(offset, length)`` system read; tests use it to check
    alignment.
    """

    def __init__(self, blob_path, manifest: ModelManifest, mode: ReadMode = ReadMode.CACHED):
        self.path = os.fspath(blob_path)
        self.manifest = manifest
        self.mode = ReadMode(mode)
        self.alignment = manifest.alignment
        self.on_read: Callable[[int, int], None] | None = None
        self._closed = False

        try:
            actual = os.stat(self.path).st_size
        except OSError as exc:
            raise StorageError(f"blob {self.path}: {exc.strerror}") from exc
        expected = manifest.extent
        if actual < expected:
            raise StorageError(f"blob {self.path} is short: expected at least {expected} bytes, found {actual}")
        self.size = actual

        flags = os.O_RDONLY
        if self.mode is ReadMode.BYPASS:
            flags |= self._direct_flag()
        try:
            self._fd = os.open(self.path, flags)
        except OSError as exc:
            if self.mode is ReadMode.BYPASS and exc.errno in (22, 95):  # EINVAL, EOPNOTSUPP
                raise CapabilityError(f"page-cache bypass not supported for {self.path}: {exc.strerror}") from exc
            raise StorageError(f"cannot open blob {self.path}: {exc.strerror}") from exc
        if self.mode is ReadMode.BYPASS:
            self._probe_direct()

    def _direct_flag(self) -> int:
        flag = getattr(os, "O_DIRECT", None)
        if flag is None:
            raise CapabilityError("page-cache bypass (O_DIRECT) is not available on this platform")
        if self.alignment < 512:
            raise CapabilityError(f"page-cache bypass needs alignment >= 512, manifest uses {self.alignment}")
        return flag

    def _probe_direct(self) -> None:
        buf = alloc_buffer(self.alignment)
        try:
            os.preadv(self._fd, [buf], 0)
        except OSError as exc:
            os.close(self._fd)
            self._closed = True
            raise CapabilityError(f"direct read probe failed on {self.path}: {exc.strerror}") from exc
        finally:
            buf.close()

    # -- lifecycle -------------------------------------------------------

    def close(self) -> None:
        if not self._closed:
            self._closed = True
            os.close(self._fd)

    @property
    def closed(self) -> bool:
        return self._closed

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    # -- reads -----------------------------------------------------------

    def read_length(self, tensor: TensorSpec) -> int:
        """Destination capacity a whole-tensor read needs."""
        return aligned_length(tensor.size_bytes, self.alignment)

    def read_tensor(self, request: ReadRequest, start: int = 0, length: int | None = None) -> int:
        """Read a tensor (or the ``[start, start+length)`` slice of it) into the destination.

        Whole-tensor reads are issued as one aligned request; the over-read
        tail past ``size_bytes`` is left in the buffer and ignored. Returns
        the number of payload bytes delivered.
        """
        if self._closed:
            raise UsageError(f"read of {request.tensor.name} after store was closed")
        t = request.tensor
        if length is None:
            length = t.size_bytes - start
        if start < 0 or length < 0 or start + length > t.size_bytes:
            raise UsageError(f"range [{start}, {start + length}) outside tensor {t.name} of {t.size_bytes} bytes")
        if self.mode is ReadMode.BYPASS and start % self.alignment:
            raise UsageError(f"bypass read of {t.name} at unaligned tensor offset {start}")
        span = aligned_length(length, self.alignment)
        dest = memoryview(request.destination).cast("B")
        if len(dest) < span:
            raise UsageError(f"destination for {t.name} holds {len(dest)} bytes, read needs {span}")

        offset = t.blob_offset + start
        done = 0
        while done < length:
            view = dest[done:span]
            if self.on_read is not None:
                self.on_read(offset + done, len(view))
            try:
                n = os.preadv(self._fd, [view], offset + done)
            except OSError as exc:
                raise StorageError(f"read of tensor {t.name} failed: {exc.strerror}") from exc
            if n <= 0:
                raise StorageError(f"unexpected end of blob while reading tensor {t.name}")
            done += n
            if self.mode is ReadMode.BYPASS and done < length and done % self.alignment:
                raise StorageError(f"short unaligned direct read of tensor {t.name}")
        return length


def open_store(blob_path, manifest: ModelManifest, mode: ReadMode | str = ReadMode.CACHED) -> StoreHandle:
    return StoreHandle(blob_path, manifest, ReadMode(mode))


def measure_bandwidth(handle: StoreHandle, sample_bytes: int, threads: int = 1) -> float:
    """Aggregate read throughput in bytes/s over the first ``sample_bytes`` of the model.

    Tensors are read whole, in blob order, one tensor per worker at a time.
    """
    if sample_bytes <= 0:
        raise UsageError("sample_bytes must be > 0")
    if threads < 1:
        raise UsageError("threads must be >= 1")
    if sample_bytes > handle.size:
        raise UsageError(f"sample_bytes {sample_bytes} exceeds blob size {handle.size}")

    tensors = []
    covered = 0
    for t in handle.manifest.all_tensors():
        if covered >= sample_bytes:
            break
        if t.size_bytes:
            tensors.append(t)
            covered += t.size_bytes
    if not tensors:
        raise UsageError("model has no tensors to sample")

    cap = max(handle.read_length(t) for t in tensors)
    local = threading.local()

    def read_one(t: TensorSpec) -> int:
        buf = getattr(local, "buf", None)
        if buf is None:
            buf = local.buf = alloc_buffer(cap)
        return handle.read_tensor(ReadRequest(t, buf))

    start = time.perf_counter()
    with ThreadPoolExecutor(max_workers=threads) as pool:
        total = sum(pool.map(read_one, tensors))
    elapsed = time.perf_counter() - start
    return total / max(elapsed, 1e-9)
