"""
SVG trajectory plots (matplotlib, Agg backend).
"""

from pathlib import Path
from typing import Optional, Sequence, Union

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.collections import LineCollection  # noqa: E402

from src.config import H_COLORS  # noqa: E402
from src.logic.datasets import Coupling  # noqa: E402
from src.logic.errors import ShapeError  # noqa: E402
from src.logic.sampling import TrajectoryLog  # noqa: E402

# fixed salt and text-as-text keep the SVG byte-stable between runs
matplotlib.rcParams["svg.hashsalt"] = "caflow"
matplotlib.rcParams["svg.fonttype"] = "none"

_FALLBACK_COLOR = "#7f7f7f"


def h_color(h: Optional[float]) -> str:
    if h is None:
        return _FALLBACK_COLOR
    return H_COLORS.get(round(float(h), 6), _FALLBACK_COLOR)


def plot_trajectories(
    logs: Sequence[TrajectoryLog],
    coupling: Optional[Coupling],
    path: Union[str, Path],
    title: Optional[str] = None,
) -> Path:
    """
    Render source/target scatter, pair chords and sampled paths to SVG.

    Paths are colored by their meta['h']. Only 2-D data can be drawn.

    Raises:
        ShapeError: a log or the coupling is not 2-dimensional.
    """
    if coupling is not None and coupling.dim != 2:
        raise ShapeError(f"plots are 2-D only, coupling has d={coupling.dim}")
    for log in logs:
        if log.points.shape[1] != 2:
            raise ShapeError(f"plots are 2-D only, trajectory has d={log.points.shape[1]}")

    fig, ax = plt.subplots(figsize=(6, 6))
    try:
        if coupling is not None and len(coupling):
            chords = np.stack([coupling.x0, coupling.x1], axis=1)
            ax.add_collection(LineCollection(chords, colors="#bbbbbb", linewidths=0.5, linestyles="dashed", zorder=1))
            ax.scatter(coupling.x0[:, 0], coupling.x0[:, 1], s=6, c="#444444", label="source", zorder=3)
            ax.scatter(coupling.x1[:, 0], coupling.x1[:, 1], s=6, c="#9467bd", label="target", zorder=3)

        by_h = {}
        for log in logs:
            by_h.setdefault(log.meta.get("h"), []).append(log.points)
        for h in sorted(by_h, key=lambda v: (v is None, v)):
            label = "h=?" if h is None else f"h={h:g}"
            ax.add_collection(LineCollection(by_h[h], colors=h_color(h), linewidths=0.8, label=label, zorder=2))

        ax.autoscale()
        ax.set_aspect("equal", adjustable="datalim")
        if title:
            ax.set_title(title)
        if ax.get_legend_handles_labels()[0]:
            ax.legend(loc="upper right", fontsize="small")

        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(path, format="svg", metadata={"Date": None})
    finally:
        plt.close(fig)
    return path
