"""Matplotlib figures for pipeline reports.

Everything renders through the Agg canvas and is saved without metadata, so
the same inputs give byte-identical PNG files.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.patches import Rectangle  # noqa: E402

from .superatom import DetectionReport, PartitionGrid  # noqa: E402
from .wavefield import GridSpec  # noqa: E402

_PNG_META = {"Software": None}


def _field_image(ax, field, grid: GridSpec, cmap="viridis", symmetric=False):
    img = np.asarray(field, dtype=np.float64).reshape(grid.ny, grid.nx)
    extent = (grid.origin_x, grid.origin_x + grid.extent_x,
              grid.origin_y, grid.origin_y + grid.extent_y)
    kw = {}
    if symmetric:
        v = float(np.abs(img).max()) or 1.0
        kw = {"vmin": -v, "vmax": v}
    return ax.imshow(img, origin="lower", extent=extent, cmap=cmap, interpolation="nearest", **kw)


def _save(fig, path):
    fig.savefig(path, dpi=120, metadata=_PNG_META)
    plt.close(fig)


def plot_superatom(scores, grid: GridSpec, partition: PartitionGrid, path,
                   report: DetectionReport | None = None, title: str = "super-atom"):
    """Super-atom map with the partition tiling and flagged boxes outlined."""
    fig, ax = plt.subplots(figsize=(7.5, 4.2))
    im = _field_image(ax, scores, grid, cmap="magma")
    fig.colorbar(im, ax=ax, label="active atoms")
    for k in range(partition.n_partitions):
        x0, x1, y0, y1 = partition.bbox(k)
        ax.add_patch(Rectangle((x0, y0), x1 - x0, y1 - y0, fill=False, lw=0.4, ec="0.6"))
    if report is not None:
        for rank, det in enumerate(report.detections, start=1):
            x0, x1, y0, y1 = det.bbox
            ax.add_patch(Rectangle((x0, y0), x1 - x0, y1 - y0, fill=False, lw=2.0, ec="cyan"))
            ax.annotate(f"#{rank}", (x0, y1), color="cyan", fontsize=8,
                        xytext=(2, -10), textcoords="offset points")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    verdict = report.verdict if report is not None else ""
    ax.set_title(f"{title} ({verdict})" if verdict else title)
    fig.tight_layout()
    _save(fig, path)


def plot_atoms(atoms_full: np.ndarray, grid: GridSpec, path, n: int = 9, seed: int = 0,
               title: str = "atoms"):
    """A 3x3 sample of atoms drawn as spatial fields (picked with a fixed seed)."""
    k = atoms_full.shape[1]
    rng = np.random.default_rng(seed)
    pick = np.sort(rng.choice(k, size=min(n, k), replace=False))
    rows = int(np.ceil(len(pick) / 3))
    fig, axes = plt.subplots(rows, 3, figsize=(9, 1.9 * rows + 0.4), squeeze=False)
    for ax in axes.flat:
        ax.set_axis_off()
    for ax, j in zip(axes.flat, pick):
        _field_image(ax, atoms_full[:, j], grid, cmap="RdBu_r", symmetric=True)
        ax.set_title(f"atom {j}", fontsize=8)
    fig.suptitle(title)
    fig.tight_layout()
    _save(fig, path)


def plot_history(history, path):
    """One panel per loop quantity, plotted against the outer iteration."""
    it = [h["iter"] for h in history]
    fig, axes = plt.subplots(1, 3, figsize=(10, 3))
    for ax, key, label in zip(axes, ("gamma", "sparsity", "rel_error"),
                              ("Gamma", "mean nonzeros per sparse atom", "relative error")):
        ax.plot(it, [h[key] for h in history], marker="o", ms=3)
        ax.set_xlabel("outer iteration")
        ax.set_title(label, fontsize=9)
        ax.grid(alpha=0.3)
    axes[1].set_yscale("symlog")
    fig.tight_layout()
    _save(fig, path)
