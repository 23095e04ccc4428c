"""Tensor preservation planning: which tensors stay locked in memory.

FLEX is the flexible preservation heuristic: uniform FFN rounds chosen by
budget thresholds, then attention tensors one role-round at a time. The other
strategies exist as ablation baselines.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterable

from .errors import InsufficientBudgetError, InvalidParameterError, UsageError
from .manifest import ATTENTION_ROLES, FFN_ROLES, LAYER_ROLES, ModelManifest, Role

PLAN_MAGIC = "FLEXPLAN"

# K and V come first: under GQA they are the smaller tensors, and with equal
# sizes the order does not change locked bytes.
ATTENTION_PRIORITY = (Role.ATTN_K, Role.ATTN_V, Role.ATTN_Q, Role.ATTN_O)
FFN_PRIORITY = (Role.FFN_UP, Role.FFN_GATE, Role.FFN_DOWN)


class PlanStrategy(str, enum.Enum):
    FLEX = "flex"
    LAYER_ORDER = "layer-order"
    ATTN_FIRST = "attn-first"
    FFN_FIRST = "ffn-first"
    NONE = "none"


@dataclass(frozen=True)
class PreservationPlan:
    """Per-layer locked roles under a byte budget.

    ``locked_bytes`` counts decoding-layer tensors only; the always-resident
    embeddings are tracked separately in ``embedding_bytes`` and both together
    never exceed ``budget_bytes``.
    """

    strategy: PlanStrategy
    budget_bytes: int
    embedding_bytes: int
    locked: tuple[frozenset[Role], ...]
    locked_bytes: int
    residual_bytes_per_layer: tuple[int, ...]

    @property
    def n_layers(self) -> int:
        return len(self.locked)

    def is_locked(self, layer: int, role: Role) -> bool:
        return role in self.locked[layer]


def _build(manifest, strategy, budget, locked_sets) -> PreservationPlan:
    locked = tuple(frozenset(s) for s in locked_sets)
    residual = []
    locked_bytes = 0
    for layer, roles in zip(manifest.layers, locked):
        held = sum(layer.tensor(r).size_bytes for r in roles)
        locked_bytes += held
        residual.append(layer.size_bytes - held)
    return PreservationPlan(strategy, budget, manifest.embedding_bytes, locked, locked_bytes, tuple(residual))


def _fill_rounds(manifest: ModelManifest, roles: Iterable[Role], remaining: int, locked: list[set]) -> int:
    """Lock ``roles`` one role at a time across layers 0..N-1 until a tensor no longer fits."""
    for role in roles:
        for layer in manifest.layers:
            size = layer.tensor(role).size_bytes
            if size > remaining:
                return remaining
            locked[layer.index].add(role)
            remaining -= size
    return remaining


def flex_thresholds(manifest: ModelManifest) -> tuple[int, int, int]:
    """Budget thresholds for all/two/one FFN tensors per layer.

    The top threshold is every FFN tensor plus the first two attention roles
    of the priority order in every layer.
    """
    n = manifest.n_layers
    ffn = [manifest.role_size(r) for r in FFN_PRIORITY]
    half_attn = sum(manifest.role_size(r) for r in ATTENTION_PRIORITY[:2])
    return n * sum(ffn) + n * half_attn, n * sum(ffn[:2]), n * ffn[0]


def plan(manifest: ModelManifest, budget_bytes: int, strategy: PlanStrategy | str = PlanStrategy.FLEX) -> PreservationPlan:
    strategy = PlanStrategy(strategy)
    if budget_bytes < 0:
        raise InvalidParameterError(f"budget_bytes must be >= 0, got {budget_bytes}")
    embed = manifest.embedding_bytes
    if budget_bytes < embed:
        raise InsufficientBudgetError(
            f"budget {budget_bytes} B is below the always-resident embedding bytes {embed} B"
        )
    remaining = budget_bytes - embed
    locked: list[set] = [set() for _ in range(manifest.n_layers)]

    if strategy is PlanStrategy.FLEX:
        all_ffn, two_ffn, one_ffn = flex_thresholds(manifest)
        if remaining >= all_ffn:
            n_ffn = 3
        elif remaining >= two_ffn:
            n_ffn = 2
        elif remaining >= one_ffn:
            n_ffn = 1
        else:
            n_ffn = 0
        remaining = _fill_rounds(manifest, FFN_PRIORITY[:n_ffn], remaining, locked)
        _fill_rounds(manifest, ATTENTION_PRIORITY, remaining, locked)
    elif strategy is PlanStrategy.LAYER_ORDER:
        for layer in manifest.layers:
            for t in layer.tensors:
                if t.size_bytes > remaining:
                    break
                locked[layer.index].add(t.role)
                remaining -= t.size_bytes
            else:
                continue
            break
    elif strategy is PlanStrategy.ATTN_FIRST:
        _fill_rounds(manifest, ATTENTION_PRIORITY + FFN_PRIORITY, remaining, locked)
    elif strategy is PlanStrategy.FFN_FIRST:
        _fill_rounds(manifest, FFN_PRIORITY + ATTENTION_PRIORITY, remaining, locked)

    return _build(manifest, strategy, budget_bytes, locked)


def budget_from_fraction(manifest: ModelManifest, fraction: float) -> int:
    """Budget for ``fraction`` of total model bytes, floored at the resident embeddings."""
    if not 0 <= fraction <= 1:
        raise InvalidParameterError(f"budget fraction must lie in [0, 1], got {fraction}")
    return max(round(fraction * manifest.total_bytes), manifest.embedding_bytes)


def empty_plan(manifest: ModelManifest) -> PreservationPlan:
    return plan(manifest, manifest.embedding_bytes, PlanStrategy.NONE)


def residual_spread(p: PreservationPlan) -> int:
    r = p.residual_bytes_per_layer
    return max(r) - min(r) if r else 0


def io_bytes_per_token(p: PreservationPlan) -> int:
    return sum(p.residual_bytes_per_layer)


def check_plan(manifest: ModelManifest, p: PreservationPlan) -> None:
    """Raise UsageError when ``p`` was not computed for ``manifest``."""
    if p.n_layers != manifest.n_layers:
        raise UsageError(f"plan covers {p.n_layers} layers, manifest has {manifest.n_layers}")
    if p.embedding_bytes != manifest.embedding_bytes:
        raise UsageError("plan embedding bytes do not match manifest")
    for layer, roles, resid in zip(manifest.layers, p.locked, p.residual_bytes_per_layer):
        held = sum(layer.tensor(r).size_bytes for r in roles)
        if layer.size_bytes - held != resid:
            raise UsageError(f"plan residual for layer {layer.index} does not match manifest")


# ---------------------------------------------------------------------------
# Text serialization
# ---------------------------------------------------------------------------


def dumps_plan(p: PreservationPlan) -> str:
    lines = [f"{PLAN_MAGIC}\t1\t{p.budget_bytes}\t{p.locked_bytes}"]
    for i, roles in enumerate(p.locked):
        for role in LAYER_ROLES:
            if role in roles:
                lines.append(f"LOCK\t{i}\t{role.value}")
    return "\n".join(lines) + "\n"


def loads_plan(text: str, manifest: ModelManifest, strategy: PlanStrategy | str = PlanStrategy.FLEX) -> PreservationPlan:
    """Parse a plan file; the manifest supplies tensor sizes.

    The file format does not record the strategy, so the caller names it.
    """
    rows = [line.split("\t") for line in text.splitlines() if line.strip()]
    if not rows or rows[0][0] != PLAN_MAGIC or len(rows[0]) != 4:
        raise UsageError("not a plan: missing FLEXPLAN header")
    budget, locked_bytes = int(rows[0][2]), int(rows[0][3])
    locked: list[set] = [set() for _ in range(manifest.n_layers)]
    for row in rows[1:]:
        if row[0] != "LOCK" or len(row) != 3:
            raise UsageError(f"malformed plan record {row!r}")
        layer = int(row[1])
        if not 0 <= layer < manifest.n_layers:
            raise UsageError(f"plan locks layer {layer} outside 0..{manifest.n_layers - 1}")
        locked[layer].add(Role(row[2]))
    p = _build(manifest, PlanStrategy(strategy), budget, locked)
    if p.locked_bytes != locked_bytes:
        raise UsageError(f"plan header says {locked_bytes} locked bytes, records sum to {p.locked_bytes}")
    return p


__all__ = [
    "ATTENTION_ROLES",
    "FFN_ROLES",
    "PlanStrategy",
    "PreservationPlan",
    "plan",
    "empty_plan",
    "budget_from_fraction",
    "residual_spread",
    "io_bytes_per_token",
    "flex_thresholds",
    "dumps_plan",
    "loads_plan",
    "check_plan",
]
