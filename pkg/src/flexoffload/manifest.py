"""Synthetic layer-structured model: manifest, packed blob, validation.

A model is N identical decoding layers of seven tensors (Q, K, V, O, UP, GATE,
DOWN) plus optional input/output embeddings. Tensors are opaque byte ranges in
a single packed blob file; all structure lives in the text manifest.
"""

from __future__ import annotations

import enum
import hashlib
import os
import zlib
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .errors import InvalidParameterError, StorageError, UsageError

DEFAULT_ALIGNMENT = 4096
MANIFEST_MAGIC = "FLEXMODEL"
MANIFEST_VERSION = 1


class Role(str, enum.Enum):
    ATTN_Q = "ATTN_Q"
    ATTN_K = "ATTN_K"
    ATTN_V = "ATTN_V"
    ATTN_O = "ATTN_O"
    FFN_UP = "FFN_UP"
    FFN_GATE = "FFN_GATE"
    FFN_DOWN = "FFN_DOWN"
    EMBED_IN = "EMBED_IN"
    EMBED_OUT = "EMBED_OUT"

    @property
    def is_attention(self) -> bool:
        return self in ATTENTION_ROLES

    @property
    def is_ffn(self) -> bool:
        return self in FFN_ROLES

    @property
    def is_embedding(self) -> bool:
        return self in (Role.EMBED_IN, Role.EMBED_OUT)


ATTENTION_ROLES = (Role.ATTN_Q, Role.ATTN_K, Role.ATTN_V, Role.ATTN_O)
FFN_ROLES = (Role.FFN_UP, Role.FFN_GATE, Role.FFN_DOWN)
LAYER_ROLES = ATTENTION_ROLES + FFN_ROLES

_SHORT = {
    Role.ATTN_Q: "attn_q",
    Role.ATTN_K: "attn_k",
    Role.ATTN_V: "attn_v",
    Role.ATTN_O: "attn_o",
    Role.FFN_UP: "ffn_up",
    Role.FFN_GATE: "ffn_gate",
    Role.FFN_DOWN: "ffn_down",
}


@dataclass(frozen=True)
class TensorSpec:
    name: str
    role: Role
    size_bytes: int
    blob_offset: int

    @property
    def end(self) -> int:
        return self.blob_offset + self.size_bytes


@dataclass(frozen=True)
class LayerSpec:
    index: int
    tensors: tuple[TensorSpec, ...]

    @property
    def size_bytes(self) -> int:
        return sum(t.size_bytes for t in self.tensors)

    def tensor(self, role: Role) -> TensorSpec:
        for t in self.tensors:
            if t.role == role:
                return t
        raise KeyError(f"layer {self.index} has no {role.value} tensor")


@dataclass(frozen=True)
class ModelManifest:
    n_layers: int
    layers: tuple[LayerSpec, ...]
    embeddings: tuple[TensorSpec, ...]
    alignment: int
    total_bytes: int

    @property
    def embedding_bytes(self) -> int:
        return sum(t.size_bytes for t in self.embeddings)

    @property
    def decoding_bytes(self) -> int:
        return sum(layer.size_bytes for layer in self.layers)

    @property
    def extent(self) -> int:
        """Length of the blob file: end of the last tensor."""
        return max((t.end for t in self.all_tensors()), default=0)

    def role_size(self, role: Role) -> int:
        return self.layers[0].tensor(role).size_bytes

    def all_tensors(self) -> Iterator[TensorSpec]:
        """Every tensor in blob order."""
        yield from sorted(
            [*self.embeddings, *(t for layer in self.layers for t in layer.tensors)],
            key=lambda t: (t.blob_offset, t.name),
        )


def _is_pow2(x: int) -> bool:
    return x > 0 and (x & (x - 1)) == 0


def _round_up(x: int, alignment: int) -> int:
    return -(-x // alignment) * alignment


def generate_manifest(
    n_layers: int,
    attn_tensor_bytes: int,
    ffn_tensor_bytes: int,
    gqa_kv_bytes: int | None = None,
    embed_bytes: int = 0,
    alignment: int = DEFAULT_ALIGNMENT,
) -> ModelManifest:
    """Lay out a model of ``n_layers`` identical decoding layers.

    Offsets are assigned in blob order ``EMBED_IN, layer 0 .. layer N-1,
    EMBED_OUT`` with each tensor start rounded up to ``alignment``. With
    ``embed_bytes == 0`` the model carries no embedding tensors at all.
    ``gqa_kv_bytes`` shrinks K and V only.
    """
    if n_layers < 1:
        raise InvalidParameterError(f"n_layers must be >= 1, got {n_layers}")
    for label, value in (("attn_tensor_bytes", attn_tensor_bytes), ("ffn_tensor_bytes", ffn_tensor_bytes)):
        if value <= 0:
            raise InvalidParameterError(f"{label} must be > 0, got {value}")
    if embed_bytes < 0:
        raise InvalidParameterError(f"embed_bytes must be >= 0, got {embed_bytes}")
    if gqa_kv_bytes is not None:
        if gqa_kv_bytes <= 0:
            raise InvalidParameterError(f"gqa_kv_bytes must be > 0, got {gqa_kv_bytes}")
        if gqa_kv_bytes > attn_tensor_bytes:
            raise InvalidParameterError(
                f"gqa_kv_bytes ({gqa_kv_bytes}) exceeds attn_tensor_bytes ({attn_tensor_bytes})"
            )
    if not _is_pow2(alignment):
        raise InvalidParameterError(f"alignment must be a power of two, got {alignment}")

    kv = attn_tensor_bytes if gqa_kv_bytes is None else gqa_kv_bytes
    sizes = {
        Role.ATTN_Q: attn_tensor_bytes,
        Role.ATTN_K: kv,
        Role.ATTN_V: kv,
        Role.ATTN_O: attn_tensor_bytes,
        Role.FFN_UP: ffn_tensor_bytes,
        Role.FFN_GATE: ffn_tensor_bytes,
        Role.FFN_DOWN: ffn_tensor_bytes,
    }

    cursor = 0

    def place(name: str, role: Role, size: int) -> TensorSpec:
        nonlocal cursor
        offset = _round_up(cursor, alignment)
        cursor = offset + size
        return TensorSpec(name, role, size, offset)

    embeddings = []
    if embed_bytes:
        embeddings.append(place("embed_in", Role.EMBED_IN, embed_bytes))
    layers = []
    for i in range(n_layers):
        tensors = tuple(place(f"layers.{i}.{_SHORT[r]}", r, sizes[r]) for r in LAYER_ROLES)
        layers.append(LayerSpec(i, tensors))
    if embed_bytes:
        embeddings.append(place("embed_out", Role.EMBED_OUT, embed_bytes))

    total = sum(sizes.values()) * n_layers + len(embeddings) * embed_bytes
    return ModelManifest(n_layers, tuple(layers), tuple(embeddings), alignment, total)


def validate_manifest(manifest: ModelManifest) -> list[str]:
    """Return one description per violated invariant; empty means valid."""
    problems: list[str] = []
    if not _is_pow2(manifest.alignment):
        problems.append(f"alignment {manifest.alignment} is not a power of two")
    if manifest.n_layers < 1:
        problems.append(f"n_layers {manifest.n_layers} < 1")
    if manifest.n_layers != len(manifest.layers):
        problems.append(f"n_layers {manifest.n_layers} != {len(manifest.layers)} layer records")
    for pos, layer in enumerate(manifest.layers):
        if layer.index != pos:
            problems.append(f"layer at position {pos} has index {layer.index}; indices must be 0..N-1")

    for t in manifest.embeddings:
        if not t.role.is_embedding:
            problems.append(f"tensor {t.name}: role {t.role.value} listed as embedding")
    tensors = [*manifest.embeddings, *(t for layer in manifest.layers for t in layer.tensors)]
    for t in tensors:
        if t.size_bytes < 0 or (t.size_bytes == 0 and not t.role.is_embedding):
            problems.append(f"tensor {t.name}: size_bytes {t.size_bytes} must be > 0")
        if t.blob_offset < 0:
            problems.append(f"tensor {t.name}: negative blob_offset {t.blob_offset}")
        if manifest.alignment > 0 and t.blob_offset % manifest.alignment:
            problems.append(f"tensor {t.name}: blob_offset {t.blob_offset} not a multiple of alignment {manifest.alignment}")

    ordered = sorted((t for t in tensors if t.size_bytes > 0), key=lambda t: t.blob_offset)
    for a, b in zip(ordered, ordered[1:]):
        if b.blob_offset < a.end:
            problems.append(f"tensors {a.name} and {b.name} overlap: [{a.blob_offset}, {a.end}) vs [{b.blob_offset}, {b.end})")

    names = Counter(t.name for t in tensors)
    for name, count in names.items():
        if count > 1:
            problems.append(f"tensor name {name} used {count} times")

    reference = None
    for layer in manifest.layers:
        roles = Counter(t.role for t in layer.tensors)
        if any(r.is_embedding for r in roles) or any(roles[r] != 1 for r in LAYER_ROLES):
            problems.append(
                f"layer {layer.index}: layer shape mismatch, roles must be exactly Q,K,V,O,UP,GATE,DOWN "
                f"(got {sorted(r.value for r in roles.elements())})"
            )
            continue
        shape = Counter((t.role, t.size_bytes) for t in layer.tensors)
        if reference is None:
            reference = (layer.index, shape)
        elif shape != reference[1]:
            problems.append(f"layer {layer.index}: layer shape mismatch against layer {reference[0]}")

    actual_total = sum(t.size_bytes for t in tensors)
    if actual_total != manifest.total_bytes:
        problems.append(f"total_bytes {manifest.total_bytes} != sum of tensor sizes {actual_total}")
    return problems


# ---------------------------------------------------------------------------
# Text serialization
# ---------------------------------------------------------------------------


def dumps_manifest(manifest: ModelManifest) -> str:
    lines = [f"{MANIFEST_MAGIC}\t{MANIFEST_VERSION}\t{manifest.n_layers}\t{manifest.alignment}"]
    layer_of = {t.name: -1 for t in manifest.embeddings}
    for layer in manifest.layers:
        for t in layer.tensors:
            layer_of[t.name] = layer.index
    for t in manifest.all_tensors():
        lines.append(f"TENSOR\t{layer_of[t.name]}\t{t.name}\t{t.role.value}\t{t.size_bytes}\t{t.blob_offset}")
    return "\n".join(lines) + "\n"


def loads_manifest(text: str) -> ModelManifest:
    rows = [line.split("\t") for line in text.splitlines() if line.strip()]
    if not rows or rows[0][0] != MANIFEST_MAGIC or len(rows[0]) != 4:
        raise UsageError("not a manifest: missing FLEXMODEL header")
    _, version, n_layers, alignment = rows[0]
    if int(version) != MANIFEST_VERSION:
        raise UsageError(f"unsupported manifest version {version}")
    n_layers, alignment = int(n_layers), int(alignment)

    per_layer: dict[int, list[TensorSpec]] = {}
    embeddings: list[TensorSpec] = []
    for lineno, row in enumerate(rows[1:], start=2):
        if row[0] != "TENSOR" or len(row) != 6:
            raise UsageError(f"manifest line {lineno}: malformed record {row!r}")
        _, layer, name, role, size, offset = row
        try:
            spec = TensorSpec(name, Role(role), int(size), int(offset))
        except ValueError as exc:
            raise UsageError(f"manifest line {lineno}: {exc}") from None
        if int(layer) < 0:
            embeddings.append(spec)
        else:
            per_layer.setdefault(int(layer), []).append(spec)

    def layer_order(t: TensorSpec) -> tuple[int, int]:
        rank = LAYER_ROLES.index(t.role) if t.role in LAYER_ROLES else len(LAYER_ROLES)
        return rank, t.blob_offset

    layers = tuple(LayerSpec(i, tuple(sorted(per_layer[i], key=layer_order))) for i in sorted(per_layer))
    embeddings.sort(key=lambda t: (t.role != Role.EMBED_IN, t.blob_offset))
    total = sum(t.size_bytes for t in embeddings) + sum(layer.size_bytes for layer in layers)
    return ModelManifest(n_layers, layers, tuple(embeddings), alignment, total)


def save_manifest(manifest: ModelManifest, path: str | os.PathLike) -> None:
    try:
        Path(path).write_text(dumps_manifest(manifest))
    except OSError as exc:
        raise StorageError(f"cannot write manifest {path}: {exc}") from exc


def load_manifest(path: str | os.PathLike) -> ModelManifest:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise StorageError(f"cannot read manifest {path}: {exc}") from exc
    return loads_manifest(text)


# ---------------------------------------------------------------------------
# Blob payloads
# ---------------------------------------------------------------------------


def _pattern_seed(seed: int, name: str) -> int:
    digest = hashlib.blake2b(f"{seed}\0{name}".encode(), digest_size=16).digest()
    return int.from_bytes(digest, "little")


def tensor_pattern(seed: int, name: str, size: int) -> bytes:
    """Deterministic payload of tensor ``name`` for a given seed."""
    return np.random.default_rng(_pattern_seed(seed, name)).bytes(size)


def payload_checksums(manifest: ModelManifest, seed: int) -> dict[str, int]:
    """CRC32 of every tensor's expected payload, keyed by tensor name."""
    return {t.name: zlib.crc32(tensor_pattern(seed, t.name, t.size_bytes)) for t in manifest.all_tensors()}


def write_blob(manifest: ModelManifest, path: str | os.PathLike, seed: int = 0) -> None:
    """Write the packed blob; alignment gaps are zero-filled."""
    problems = validate_manifest(manifest)
    if problems:
        raise InvalidParameterError("invalid manifest: " + "; ".join(problems))
    try:
        with open(path, "wb") as fh:
            for t in manifest.all_tensors():
                if fh.tell() < t.blob_offset:
                    fh.write(bytes(t.blob_offset - fh.tell()))
                fh.write(tensor_pattern(seed, t.name, t.size_bytes))
    except OSError as exc:
        raise StorageError(f"cannot write blob {path}: {exc}") from exc


def layer_composition(manifest: ModelManifest) -> Iterable[tuple[str, int]]:
    layer = manifest.layers[0]
    return [(t.role.value, t.size_bytes) for t in layer.tensors]
