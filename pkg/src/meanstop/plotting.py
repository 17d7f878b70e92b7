"""Line charts written as SVG files with matplotlib's non-interactive backend."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


@dataclass
class FigureSpec:
    key: str
    title: str
    xlabel: str
    ylabel: str
    series: dict[str, tuple[list[float], list[float]]] = field(default_factory=dict)
    logx: bool = False
    logy: bool = False


def save_svg(spec: FigureSpec, path) -> Path:
    """Render ``spec`` to ``path``; ids and metadata are fixed so reruns give identical files."""
    path = Path(path)
    with plt.rc_context({"svg.hashsalt": "meanstop", "svg.fonttype": "path"}):
        fig, ax = plt.subplots(figsize=(5.0, 3.5))
        for label, (xs, ys) in spec.series.items():
            ax.plot(xs, ys, marker="o", label=label)
        if spec.logx:
            ax.set_xscale("log")
        if spec.logy:
            ax.set_yscale("log")
        ax.set_title(spec.title)
        ax.set_xlabel(spec.xlabel)
        ax.set_ylabel(spec.ylabel)
        if len(spec.series) > 1:
            ax.legend()
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
        plt.close(fig)
    return path
