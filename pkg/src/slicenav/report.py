"""Result emission: JSON, aligned-text tables, SVG curves."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

__all__ = ["write_json", "format_table", "comparison_table_text",
           "sweep_table_text", "plot_curves"]

_TASK_LABELS = {
    "region_seg": "Region Dice",
    "tissue_seg": "Tissue Dice",
    "coord_field": "Coord MAE",
}


def write_json(path: str | Path, payload: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, sort_keys=True, indent=1, default=_coerce))


def _coerce(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON-serializable: {type(obj)}")


def format_table(headers: list[str], rows: list[list[str]]) -> str:
    widths = [max(len(h), *(len(r[i]) for r in rows)) if rows else len(h)
              for i, h in enumerate(headers)]
    def fmt(cells):
        return "  ".join(str(c).ljust(w) for c, w in zip(cells, widths))
    lines = [fmt(headers), fmt(["-" * w for w in widths])]
    lines.extend(fmt(r) for r in rows)
    return "\n".join(lines) + "\n"


def comparison_table_text(table: dict) -> str:
    headers = ["Epoch", "Method"] + [_TASK_LABELS.get(t, t) for t in table["tasks"]]
    rows = []
    for row in table["rows"]:
        cells = [str(row["epoch"]), row["method"]]
        for task in table["tasks"]:
            cells.append(f"{row[task]['mean']:.4f}")
        rows.append(cells)
    return format_table(headers, rows)


def sweep_table_text(table: dict) -> str:
    headers = ["K"] + [_TASK_LABELS.get(t, t) for t in table["tasks"]] + \
        ["Lat. (ms)", "Mem (MB)"]
    rows = []
    for row in table["rows"]:
        cells = [str(row["K"])]
        for task in table["tasks"]:
            cells.append(f"{row[task]['mean']:.4f}")
        cells.append(f"{row['latency_ms']:.2f}")
        cells.append(f"{row['peak_mem_mb']:.3f}")
        rows.append(cells)
    return format_table(headers, rows)


def plot_curves(series: dict[str, list[float]], path: str | Path,
                xlabel: str = "step", ylabel: str = "value") -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 4))
    for label, values in series.items():
        ax.plot(values, label=label)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.legend()
    fig.tight_layout()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path)
    plt.close(fig)
