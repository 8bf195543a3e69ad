"""Matplotlib figure rendering for report outputs.

All figures are written as self-contained SVG (fonts embedded as paths, no
external assets).  Bar patches carry ``gid`` markers like ``bar-0`` so the
emitted SVG stays machine-checkable.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
matplotlib.rcParams["svg.fonttype"] = "path"

import matplotlib.pyplot as plt  # noqa: E402


def _finish(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg")
    plt.close(fig)
    return path


def _tag_bars(bars, start: int = 0) -> int:
    for i, patch in enumerate(bars, start=start):
        patch.set_gid(f"bar-{i}")
    return start + len(bars)


def render_gain_density(bins, path, title="Per-client accuracy gain") -> Path:
    """bins: iterable of (left, right, count)."""
    bins = list(bins)
    fig, ax = plt.subplots(figsize=(6, 4))
    centers = [(lo + hi) / 2.0 for lo, hi, _ in bins]
    widths = [(hi - lo) * 0.95 for lo, hi, _ in bins]
    counts = [c for _, _, c in bins]
    _tag_bars(ax.bar(centers, counts, width=widths, color="#4878a8", label="clients"))
    ax.set_xlabel("accuracy gain")
    ax.set_ylabel("clients")
    ax.set_title(title)
    ax.legend()
    return _finish(fig, path)


def render_sensitivity(rows, path, title="Layer sensitivity") -> Path:
    """rows: dicts with layer_type, standalone_mean, optional combined_mean/overall."""
    rows = list(rows)
    fig, ax = plt.subplots(figsize=(8, 4.5))
    xs = range(len(rows))
    stand = [r["standalone_mean"] for r in rows]
    comb = [r.get("combined_mean") for r in rows]
    n = _tag_bars(ax.bar([x - 0.2 for x in xs], stand, width=0.4, label="stand-alone",
                         color="#4878a8"))
    comb_x = [x + 0.2 for x, c in zip(xs, comb) if c is not None]
    comb_y = [c for c in comb if c is not None]
    _tag_bars(ax.bar(comb_x, comb_y, width=0.4, label="combined", color="#d1605e"), start=n)
    over = [(x, r["overall"]) for x, r in zip(xs, rows) if r.get("overall") is not None]
    if over:
        ax.plot([x for x, _ in over], [y for _, y in over], "k_", markersize=18,
                label="overall")
    ax.set_xticks(list(xs))
    ax.set_xticklabels([r["layer_type"] for r in rows], rotation=30, ha="right")
    ax.set_ylabel("mean Top-1 accuracy")
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    return _finish(fig, path)


def render_accuracy(client_ids, accuracies, path, title="Per-client Top-1 accuracy") -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    _tag_bars(ax.bar([str(c) for c in client_ids], list(accuracies), color="#4878a8",
                     label="accuracy"))
    ax.set_xlabel("client")
    ax.set_ylabel("Top-1 accuracy")
    ax.set_ylim(0.0, 1.0)
    ax.set_title(title)
    ax.legend()
    return _finish(fig, path)


def render_resources(rows, path, title="Resource use vs FedAvg") -> Path:
    """rows: dicts with strategy and *_pct columns."""
    rows = list(rows)
    fig, ax = plt.subplots(figsize=(8, 4.5))
    xs = range(len(rows))
    n = 0
    for offset, key, label, color in (
        (-0.25, "storage_pct", "storage", "#4878a8"),
        (0.0, "flops_pct", "compute", "#d1605e"),
        (0.25, "comm_pct", "communication", "#6aa56a"),
    ):
        n = _tag_bars(
            ax.bar([x + offset for x in xs], [r[key] for r in rows], width=0.25,
                   label=label, color=color),
            start=n,
        )
    ax.set_xticks(list(xs))
    ax.set_xticklabels([r["strategy"] for r in rows], rotation=30, ha="right")
    ax.set_ylabel("% of FedAvg")
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    return _finish(fig, path)
