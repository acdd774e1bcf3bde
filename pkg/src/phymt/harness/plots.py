"""Line plots written as deterministic SVG files."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# fixed element ids and no timestamp, so reruns give identical bytes
plt.rcParams["svg.hashsalt"] = "phymt"


def line_plot(path, series: dict, title: str, xlabel: str, ylabel: str, logy: bool = False):
    """``series`` maps a legend label to ``(x, y)`` sequences."""
    fig, ax = plt.subplots(figsize=(5.0, 3.6))
    for label, (x, y) in series.items():
        ax.plot(x, y, marker="o", label=label)
    if logy:
        ax.set_yscale("log")
    ax.set_title(title)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    _embed_data(path, series)
    return path


def _embed_data(path, series: dict):
    """Append the plotted points as an XML comment so the file stands alone."""
    lines = ["label,x,y"]
    for label, (x, y) in series.items():
        lines += [f"{label},{a!r},{b!r}" for a, b in zip(x, y)]
    body = "\n".join(lines).replace("--", "- -")
    with open(path, "a") as fh:
        fh.write(f"<!-- data\n{body}\n-->\n")


def series_from_rows(rows, metric: str) -> dict:
    """Group eval rows ``{method, grid_value, metric, value}`` into plot series."""
    out: dict = {}
    for r in rows:
        if r["metric"] != metric:
            continue
        xs, ys = out.setdefault(r["method"], ([], []))
        xs.append(float(r["grid_value"]))
        ys.append(float(r["value"]))
    return out
