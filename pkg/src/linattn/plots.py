"""Figure rendering for the CLI report paths.

Each CSV the tool writes can get companion PNG figures next to it: scaling
curves for the benchmark, loss/accuracy curves for training, per-block
spread bars for the diagnostic.  Rendering is headless (Agg) and never
feeds back into the CSV bytes, so the delimited output stays deterministic.
"""

from __future__ import annotations

from typing import Dict, List, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402


def render_bench_figures(records: Sequence, slopes: Dict[str, float], stem) -> List[str]:
    """Write {stem}_time.png and {stem}_memory.png; returns the paths."""
    stem = str(stem)
    by_kind: Dict[str, list] = {}
    for r in records:
        if r.status == "ok":
            by_kind.setdefault(r.kind, []).append(r)
    written = []

    fig, ax = plt.subplots(figsize=(5.5, 4))
    for kind, rows in by_kind.items():
        xs = [r.length for r in rows]
        ys = [r.wall_ms for r in rows]
        if all(y > 0 for y in ys):
            label = f"{kind} (slope {slopes.get(kind, float('nan')):.2f})"
            ax.loglog(xs, ys, "o-", label=label)
    ax.set_xlabel("sequence length")
    ax.set_ylabel("forward wall time [ms]")
    ax.legend()
    ax.grid(True, which="both", alpha=0.3)
    fig.tight_layout()
    path = stem + "_time.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    written.append(path)

    fig, ax = plt.subplots(figsize=(5.5, 4))
    for kind, rows in by_kind.items():
        ax.loglog([r.length for r in rows], [max(r.peak_bytes, 1) for r in rows], "s-", label=kind)
    ax.set_xlabel("sequence length")
    ax.set_ylabel("peak allocated bytes")
    ax.legend()
    ax.grid(True, which="both", alpha=0.3)
    fig.tight_layout()
    path = stem + "_memory.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    written.append(path)
    return written


def render_metrics_figure(history: Sequence[dict], path) -> str:
    """Loss and accuracy curves over optimizer steps, train and eval splits."""
    fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(9, 3.6))
    for split, style in (("train", "-"), ("eval", "o--")):
        rows = [r for r in history if r["split"] == split]
        if not rows:
            continue
        steps = [r["step"] for r in rows]
        ax_loss.plot(steps, [r["loss"] for r in rows], style, label=split, markersize=3)
        ax_acc.plot(steps, [r["accuracy"] for r in rows], style, label=split, markersize=3)
    ax_loss.set_xlabel("step")
    ax_loss.set_ylabel("loss")
    ax_loss.legend()
    ax_acc.set_xlabel("step")
    ax_acc.set_ylabel("accuracy")
    ax_acc.set_ylim(0, 1.02)
    ax_acc.legend()
    fig.tight_layout()
    fig.savefig(str(path), dpi=120)
    plt.close(fig)
    return str(path)


def render_block_std_figure(stds_by_label: Dict[str, List[float]], path) -> str:
    """Per-block attention-output standard deviation, one line per model."""
    fig, ax = plt.subplots(figsize=(5.5, 4))
    for label, stds in stds_by_label.items():
        ax.plot(range(1, len(stds) + 1), stds, "o-", label=label)
    ax.set_xlabel("block")
    ax.set_ylabel("attention output std")
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(str(path), dpi=120)
    plt.close(fig)
    return str(path)
