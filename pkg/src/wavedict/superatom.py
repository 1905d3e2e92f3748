"""Persistence-gated aggregation of sparse atoms and automatic partition flagging."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .sparse import NNZ_THRESHOLD
from .wavefield import GridSpec


@dataclass(frozen=True)
class SuperAtomParams:
    m1: int = 10
    m2: int = 5
    persistence_min: int = 32
    amplitude_min: float = 2.0
    top_q: int = 1

    def __post_init__(self):
        if self.m1 < 1 or self.m2 < 1:
            raise ValueError("partition counts must be >= 1")
        if self.persistence_min < 1:
            raise ValueError("persistence_min must be >= 1")
        if self.amplitude_min < 0:
            raise ValueError("amplitude_min must be >= 0")
        if not 1 <= self.top_q <= self.m1 * self.m2:
            raise ValueError(f"top_q must lie in [1, {self.m1 * self.m2}]")


def _split(n: int, m: int) -> np.ndarray:
    """Block index of each of ``n`` positions; the last block absorbs the remainder."""
    if m > n:
        raise ValueError(f"cannot split {n} grid lines into {m} partitions")
    return np.minimum(np.arange(n) // (n // m), m - 1)


@dataclass(frozen=True, eq=False)
class PartitionGrid:
    m1: int
    m2: int
    grid: GridSpec
    cell_assignment: np.ndarray = field(init=False, repr=False)
    col_block: np.ndarray = field(init=False, repr=False)
    row_block: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        cb = _split(self.grid.nx, self.m1)
        rb = _split(self.grid.ny, self.m2)
        assign = (rb[:, None] * self.m1 + cb[None, :]).ravel()
        for name, arr in (("col_block", cb), ("row_block", rb), ("cell_assignment", assign)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n_partitions(self) -> int:
        return self.m1 * self.m2

    def block_of(self, k: int) -> tuple[int, int]:
        """(column block, row block) of partition ``k``."""
        return k % self.m1, k // self.m1

    def index_ranges(self, k: int) -> tuple[tuple[int, int], tuple[int, int]]:
        """Inclusive grid-column and grid-row ranges of partition ``k``."""
        cx, cy = self.block_of(k)
        cols = np.flatnonzero(self.col_block == cx)
        rows = np.flatnonzero(self.row_block == cy)
        return (int(cols[0]), int(cols[-1])), (int(rows[0]), int(rows[-1]))

    def bbox(self, k: int) -> tuple[float, float, float, float]:
        """Physical box (x0, x1, y0, y1); boxes of neighbouring partitions share edges."""
        g = self.grid
        (i0, i1), (j0, j1) = self.index_ranges(k)

        def edge(lo, hi, n, h, origin):
            a = origin if lo == 0 else origin + (lo - 0.5) * h
            b = origin + (n - 1) * h if hi == n - 1 else origin + (hi + 0.5) * h
            return a, b

        x0, x1 = edge(i0, i1, g.nx, g.dx, g.origin_x)
        y0, y1 = edge(j0, j1, g.ny, g.dy, g.origin_y)
        return x0, x1, y0, y1

    def partition_at(self, x: float, y: float) -> int:
        return int(self.cell_assignment[self.grid.nearest_index(x, y)])


@dataclass(frozen=True, eq=False)
class SuperAtom:
    scores: np.ndarray
    partition_scores: np.ndarray
    flagged: frozenset
    persistence: np.ndarray
    skipped: tuple = ()


def _expand(d1: np.ndarray, mask: np.ndarray) -> np.ndarray:
    d1 = np.asarray(d1, dtype=np.float64)
    if d1.ndim == 1:
        d1 = d1[:, None]
    if d1.shape[0] == mask.size:
        return np.where(mask[:, None], d1, 0.0)
    if d1.shape[0] == mask.sum():
        full = np.zeros((mask.size, d1.shape[1]))
        full[mask] = d1
        return full
    raise ValueError(
        f"dictionary has {d1.shape[0]} rows; expected {mask.sum()} active or {mask.size} total")


def build_superatom(d1, grid: GridSpec, mask, params: SuperAtomParams) -> SuperAtom:
    """Aggregate atom supports into a per-point persistence map.

    A partition contributes only if at least ``persistence_min`` atoms are
    nonzero somewhere inside it; each surviving point then scores the number
    of atoms nonzero there, and scores ``<= amplitude_min`` are cleared.
    """
    atoms = getattr(d1, "atoms", d1)
    mask = np.ones(grid.n_points, bool) if mask is None else np.asarray(mask, bool)
    full = _expand(atoms, mask)
    part = PartitionGrid(params.m1, params.m2, grid)
    m = part.n_partitions
    nz = np.abs(full) > NNZ_THRESHOLD
    point_count = nz.sum(axis=1)

    # atoms active in each partition: any nonzero among the partition's rows
    hits = np.zeros((m, nz.shape[1]), dtype=bool)
    np.logical_or.at(hits, part.cell_assignment, nz)
    persistence = hits.sum(axis=1)

    has_active = np.bincount(part.cell_assignment, weights=mask, minlength=m) > 0
    skipped = tuple(int(k) for k in np.flatnonzero(~has_active))
    gate = (persistence >= params.persistence_min) & has_active
    scores = np.where(gate[part.cell_assignment], point_count, 0)
    scores = np.where(scores <= params.amplitude_min, 0, scores)
    partition_scores = np.bincount(part.cell_assignment, weights=scores, minlength=m)
    flagged = frozenset(int(k) for k in np.flatnonzero(partition_scores > 0))
    return SuperAtom(scores.astype(np.int64), partition_scores, flagged, persistence, skipped)


def superatom_naive(d1: np.ndarray, grid: GridSpec, m1: int, m2: int,
                    persistence_min: int, amplitude_min: float) -> np.ndarray:
    """Loop-for-loop evaluation of the aggregation, for cross-checking."""
    nx, ny = grid.nx, grid.ny
    s = np.zeros(nx * ny)
    col_of = _split(nx, m1)
    row_of = _split(ny, m2)
    for k in range(m1 * m2):
        cx, cy = k % m1, k // m1
        members = [j * nx + i for j in range(ny) for i in range(nx)
                   if col_of[i] == cx and row_of[j] == cy]
        count = 0
        for a in range(d1.shape[1]):
            if any(abs(d1[p, a]) > NNZ_THRESHOLD for p in members):
                count += 1
        if count >= persistence_min:
            for p in members:
                s[p] = sum(1 for a in range(d1.shape[1]) if abs(d1[p, a]) > NNZ_THRESHOLD)
        for p in members:
            if abs(s[p]) <= amplitude_min:
                s[p] = 0
    return s


@dataclass(frozen=True)
class Detection:
    partition: int
    col_range: tuple
    row_range: tuple
    bbox: tuple
    centroid: tuple
    score: float


@dataclass(frozen=True)
class DetectionReport:
    detections: tuple
    params: dict = field(default_factory=dict)
    skipped: tuple = ()
    version: str = __version__

    @property
    def verdict(self) -> str:
        return "anomalous" if self.detections else "pristine"

    @property
    def partitions(self) -> list:
        return [d.partition for d in self.detections]

    def to_dict(self) -> dict:
        return {
            "verdict": self.verdict,
            "detections": [
                {"partition": d.partition, "col_range": list(d.col_range),
                 "row_range": list(d.row_range), "bbox": list(d.bbox),
                 "centroid": list(d.centroid), "score": d.score}
                for d in self.detections
            ],
            "skipped_partitions": list(self.skipped),
            "params": self.params,
            "version": self.version,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def from_dict(cls, data: dict) -> "DetectionReport":
        dets = tuple(Detection(d["partition"], tuple(d["col_range"]), tuple(d["row_range"]),
                               tuple(d["bbox"]), tuple(d["centroid"]), d["score"])
                     for d in data["detections"])
        return cls(dets, data.get("params", {}), tuple(data.get("skipped_partitions", ())),
                   data.get("version", __version__))

    @classmethod
    def load(cls, path) -> "DetectionReport":
        return cls.from_dict(json.loads(Path(path).read_text()))


def detect(superatom: SuperAtom, partition: PartitionGrid, grid: GridSpec, top_q: int = 1,
           params: dict | None = None) -> DetectionReport:
    """Rank flagged partitions by summed score and report the ``top_q`` best."""
    if superatom.scores.size != grid.n_points:
        raise ValueError("super-atom does not match the grid")
    flagged = sorted(superatom.flagged, key=lambda k: (-superatom.partition_scores[k], k))
    x, y = grid.coords()
    dets = []
    for k in flagged[:top_q]:
        members = partition.cell_assignment == k
        w = superatom.scores[members].astype(np.float64)
        cx = float(np.sum(w * x[members]) / w.sum())
        cy = float(np.sum(w * y[members]) / w.sum())
        cols, rows = partition.index_ranges(k)
        dets.append(Detection(int(k), cols, rows, partition.bbox(k), (cx, cy),
                              float(superatom.partition_scores[k])))
    return DetectionReport(tuple(dets), dict(params or {}), tuple(superatom.skipped))


# -- images --------------------------------------------------------------------------

def heatmap_pixels(field: np.ndarray, grid: GridSpec, report: DetectionReport | None = None,
                   partition: PartitionGrid | None = None) -> np.ndarray:
    """8-bit image (ny rows, y increasing upward) of a min-max normalised field."""
    f = np.asarray(field, dtype=np.float64)
    if f.size != grid.n_points or not np.isfinite(f).all():
        raise ValueError("field must be finite with one value per grid point")
    lo, hi = f.min(), f.max()
    if hi > lo:
        img = np.rint(255.0 * (f - lo) / (hi - lo))
    else:
        img = np.full(f.shape, 128.0)
    img = img.astype(np.uint8).reshape(grid.ny, grid.nx)
    if report is not None and report.detections:
        if partition is None:
            raise ValueError("drawing flagged borders needs the partition grid")
        for det in report.detections:
            (i0, i1), (j0, j1) = det.col_range, det.row_range
            img[j0:j1 + 1, [i0, i1]] = 255
            img[[j0, j1], i0:i1 + 1] = 255
    return img[::-1]


def render_heatmap(field: np.ndarray, grid: GridSpec, path, report: DetectionReport | None = None,
                   partition: PartitionGrid | None = None, png: bool = False) -> None:
    """Write a binary greyscale PGM, one pixel per grid point; optionally a PNG twin."""
    img = heatmap_pixels(field, grid, report, partition)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{grid.nx} {grid.ny}\n255\n".encode("ascii"))
        fh.write(img.tobytes())
    if png:
        import matplotlib.pyplot as plt

        plt.imsave(Path(path).with_suffix(".png"), img, cmap="gray", vmin=0, vmax=255)


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)
