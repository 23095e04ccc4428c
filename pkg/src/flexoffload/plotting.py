"""Figures rendered next to the CSV output.

Uses the object-oriented matplotlib API (no pyplot state), so it is safe
from worker threads and headless sessions.
"""

from __future__ import annotations

from collections import defaultdict
from pathlib import Path

from matplotlib.figure import Figure

from .executor import COMPUTE_END, COMPUTE_START, IO_END, IO_START

STYLE = {
    "mmap": dict(color="0.5", marker="x", linestyle=":"),
    "sync": dict(color="tab:brown", marker="v", linestyle="--"),
    "flex-sync": dict(color="tab:purple", marker="^", linestyle="--"),
    "none": dict(color="tab:orange", marker="s", linestyle="-."),
    "layer-order": dict(color="tab:red", marker="D"),
    "attn-first": dict(color="tab:green", marker="<"),
    "ffn-first": dict(color="tab:olive", marker=">"),
    "flex": dict(color="tab:blue", marker="o", linewidth=2),
}


def figure_path(csv_path, suffix: str = "") -> Path:
    p = Path(csv_path)
    return p.with_name(p.stem + suffix + ".png")


def plot_throughput(reports, path, model_bytes: int | None = None, title: str | None = None) -> Path:
    """Throughput against memory budget, one line per strategy."""
    series = defaultdict(list)
    for r in reports:
        x = r.budget_bytes / model_bytes if model_bytes else r.budget_bytes / 2**20
        series[r.strategy].append((x, r.throughput_tokens_per_s))

    fig = Figure(figsize=(5.5, 3.6), constrained_layout=True)
    ax = fig.add_subplot()
    for name, points in series.items():
        points.sort()
        xs, ys = zip(*points)
        ax.plot(xs, ys, label=name, **STYLE.get(name, {}))
    ax.set_xlabel("memory budget (fraction of model)" if model_bytes else "memory budget (MiB)")
    ax.set_ylabel("throughput (tokens/s)")
    ax.set_ylim(bottom=0)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8, ncol=2)
    if title:
        ax.set_title(title, fontsize=10)
    fig.savefig(path, dpi=150)
    return Path(path)


def plot_timeline(events, path, n_layers: int, title: str | None = None, max_tokens: int = 1) -> Path:
    """IO and compute spans per layer for the first ``max_tokens`` tokens.

    Long gaps on the compute row are IO stalls; gaps on the IO row while
    compute runs are window (memory) stalls.
    """
    io_open, comp_open = {}, {}
    io_spans, comp_spans = defaultdict(list), []
    for t, kind, token, layer, name in sorted(events, key=lambda e: e[0]):
        if token >= max_tokens:
            continue
        g = token * n_layers + layer
        if kind == IO_START:
            io_open[(g, name)] = t
        elif kind == IO_END and (g, name) in io_open:
            io_spans[g].append((io_open.pop((g, name)), t))
        elif kind == COMPUTE_START:
            comp_open[g] = t
        elif kind == COMPUTE_END and g in comp_open:
            comp_spans.append((g, comp_open.pop(g), t))

    fig = Figure(figsize=(7, 2.4), constrained_layout=True)
    ax = fig.add_subplot()
    scale = 1e6
    for g, spans in io_spans.items():
        lo = min(s for s, _ in spans)
        hi = max(e for _, e in spans)
        ax.broken_barh([(lo / scale, (hi - lo) / scale)], (1.1, 0.8), facecolors="tab:orange", edgecolor="k", linewidth=0.3)
        ax.text((lo + hi) / 2 / scale, 1.5, str(g), ha="center", va="center", fontsize=6)
    for g, s, e in comp_spans:
        ax.broken_barh([(s / scale, (e - s) / scale)], (0.1, 0.8), facecolors="tab:blue", edgecolor="k", linewidth=0.3)
        ax.text((s + e) / 2 / scale, 0.5, str(g), ha="center", va="center", fontsize=6, color="w")
    ax.set_yticks([0.5, 1.5], ["compute", "IO"])
    ax.set_xlabel("time (ms)")
    if title:
        ax.set_title(title, fontsize=10)
    fig.savefig(path, dpi=150)
    return Path(path)
