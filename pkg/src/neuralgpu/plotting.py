"""Static charts rendered from ``report.csv`` files."""

from __future__ import annotations

import csv
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def read_report(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _series(rows: list[dict], x_field: str) -> dict[str, list[tuple[float, float, float]]]:
    out = defaultdict(list)
    for row in rows:
        if row.get(x_field) in ("", None):
            continue
        err = float(row["stderr"]) if row.get("stderr") not in ("", None) else 0.0
        out[row["checkpoint"]].append((float(row[x_field]), float(row["accuracy"]), err))
    return {k: sorted(v) for k, v in out.items()}


def render_report(csv_paths, out_path) -> Path:
    """Accuracy vs length and error vs carry length, one line per checkpoint.

    Panels without data are left out; raises ValueError if nothing is plottable.
    """
    rows = [r for p in ([csv_paths] if isinstance(csv_paths, (str, Path)) else csv_paths)
            for r in read_report(p)]
    panels = []
    curves = _series([r for r in rows if r["suite"].startswith("uniform")], "length")
    if curves:
        panels.append(("length", curves))
    carries = _series([r for r in rows if r["suite"].startswith("carry")], "k")
    if carries:
        panels.append(("k", carries))
    if not panels:
        raise ValueError("report has no uniform or carry rows to plot")

    fig, axes = plt.subplots(1, len(panels), figsize=(5.5 * len(panels), 4), squeeze=False)
    for ax, (kind, series) in zip(axes[0], panels):
        for name, pts in series.items():
            x = [p[0] for p in pts]
            label = Path(name).name or name
            if kind == "length":
                ax.errorbar(x, [p[1] for p in pts], yerr=[p[2] for p in pts], marker="o", capsize=3, label=label)
                ax.set_xlabel("test length")
                ax.set_ylabel("sequence accuracy")
                ax.set_ylim(-0.02, 1.02)
            else:
                ax.errorbar(x, [1 - p[1] for p in pts], yerr=[p[2] for p in pts], marker="s", capsize=3,
                            label=label)
                ax.axhline(0.5, color="grey", lw=0.8, ls="--")
                ax.set_xlabel("carry chain length k")
                ax.set_ylabel("sequence error")
                ax.set_ylim(-0.02, 1.02)
        ax.grid(alpha=0.3)
        ax.legend(fontsize=8)
    fig.tight_layout()
    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out
