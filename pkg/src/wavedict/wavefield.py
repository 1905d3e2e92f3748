"""Wavefield data model, binary cube I/O and the preprocessing applied before learning.

A cube stores an ``N x T`` matrix: one row per grid point, flattened row-major
with y as the slow axis (``flat = j * nx + i``), one column per snapshot.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage, signal

CUBE_MAGIC = b"WFC1"
_HEADER = struct.Struct("<4s3I5d")

SIDES = ("left", "right", "bottom", "top")


class CubeFormatError(ValueError):
    """Malformed cube file header."""


class CubeTruncatedError(CubeFormatError):
    """Payload length disagrees with the header dimensions."""


class InvariantError(ValueError):
    """A value violates the invariants of its type."""


@dataclass(frozen=True)
class GridSpec:
    nx: int
    ny: int
    dx: float
    dy: float
    origin_x: float = 0.0
    origin_y: float = 0.0

    def __post_init__(self):
        if self.nx < 2 or self.ny < 2:
            raise InvariantError(f"grid needs nx >= 2 and ny >= 2, got nx={self.nx}, ny={self.ny}")
        if not (self.dx > 0 and self.dy > 0):
            raise InvariantError(f"grid spacing must be positive, got dx={self.dx}, dy={self.dy}")

    @classmethod
    def spanning(cls, lx: float, ly: float, nx: int, ny: int) -> "GridSpec":
        """Grid whose nodes run from 0 to ``lx`` / ``ly`` inclusive."""
        return cls(nx, ny, lx / (nx - 1), ly / (ny - 1))

    @property
    def n_points(self) -> int:
        return self.nx * self.ny

    @property
    def extent_x(self) -> float:
        return (self.nx - 1) * self.dx

    @property
    def extent_y(self) -> float:
        return (self.ny - 1) * self.dy

    def xs(self) -> np.ndarray:
        return self.origin_x + self.dx * np.arange(self.nx)

    def ys(self) -> np.ndarray:
        return self.origin_y + self.dy * np.arange(self.ny)

    def coords(self) -> tuple[np.ndarray, np.ndarray]:
        """Physical (x, y) of every grid point in flat order."""
        xx, yy = np.meshgrid(self.xs(), self.ys())
        return xx.ravel(), yy.ravel()

    def flat_index(self, i: int, j: int) -> int:
        return j * self.nx + i

    def nearest_index(self, x: float, y: float) -> int:
        i = int(np.clip(np.rint((x - self.origin_x) / self.dx), 0, self.nx - 1))
        j = int(np.clip(np.rint((y - self.origin_y) / self.dy), 0, self.ny - 1))
        return self.flat_index(i, j)

    def contains(self, x: float, y: float) -> bool:
        return (self.origin_x <= x <= self.origin_x + self.extent_x
                and self.origin_y <= y <= self.origin_y + self.extent_y)


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class WavefieldCube:
    grid: GridSpec
    dt: float
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 2:
            raise InvariantError(f"cube data must be 2-D (N x T), got shape {data.shape}")
        if data.shape[0] != self.grid.n_points:
            raise InvariantError(
                f"cube has {data.shape[0]} rows but grid has {self.grid.n_points} points")
        if data.shape[1] < 1:
            raise InvariantError("cube needs at least one snapshot")
        if not self.dt > 0:
            raise InvariantError(f"dt must be positive, got {self.dt}")
        if not np.isfinite(data).all():
            raise InvariantError("cube data contains NaN or Inf")
        object.__setattr__(self, "data", _frozen(data))

    @property
    def n_snapshots(self) -> int:
        return self.data.shape[1]

    def __eq__(self, other):
        if not isinstance(other, WavefieldCube):
            return NotImplemented
        return (self.grid == other.grid and self.dt == other.dt
                and self.data.shape == other.data.shape
                and np.array_equal(self.data, other.data))

    def frame(self, t: int) -> np.ndarray:
        """Snapshot ``t`` as an (ny, nx) image."""
        return self.data[:, t].reshape(self.grid.ny, self.grid.nx)


@dataclass(frozen=True, eq=False)
class MaskedCube:
    cube: WavefieldCube
    active: np.ndarray
    t_start: int = 0

    def __post_init__(self):
        active = np.asarray(self.active, dtype=bool)
        if active.shape != (self.cube.grid.n_points,):
            raise InvariantError(
                f"mask length {active.shape} does not match {self.cube.grid.n_points} grid points")
        if not active.any():
            raise InvariantError("mask leaves no active rows")
        if not 0 <= self.t_start < self.cube.n_snapshots:
            raise InvariantError(
                f"t_start={self.t_start} outside [0, {self.cube.n_snapshots})")
        object.__setattr__(self, "active", _frozen(active))

    @classmethod
    def unmasked(cls, cube: WavefieldCube) -> "MaskedCube":
        return cls(cube, np.ones(cube.grid.n_points, dtype=bool), 0)

    @property
    def grid(self) -> GridSpec:
        return self.cube.grid

    @property
    def n_active(self) -> int:
        return int(self.active.sum())

    @property
    def n_retained(self) -> int:
        return self.cube.n_snapshots - self.t_start

    def x_block(self) -> np.ndarray:
        """The learning matrix: active rows, retained snapshots."""
        return np.array(self.cube.data[self.active, self.t_start:])

    def __eq__(self, other):
        if not isinstance(other, MaskedCube):
            return NotImplemented
        return (self.cube == other.cube and self.t_start == other.t_start
                and np.array_equal(self.active, other.active))


def _as_masked(value) -> MaskedCube:
    if isinstance(value, MaskedCube):
        return value
    if isinstance(value, WavefieldCube):
        return MaskedCube.unmasked(value)
    raise TypeError(f"expected WavefieldCube or MaskedCube, got {type(value).__name__}")


# -- file I/O ----------------------------------------------------------------

def save_cube(cube: WavefieldCube, path) -> None:
    data = np.asarray(cube.data, dtype=np.float64)
    if data.shape[0] != cube.grid.n_points or not np.isfinite(data).all():
        raise InvariantError("refusing to save a cube that violates its invariants")
    g = cube.grid
    header = _HEADER.pack(CUBE_MAGIC, g.nx, g.ny, data.shape[1],
                          g.dx, g.dy, g.origin_x, g.origin_y, cube.dt)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(data).astype("<f8", copy=False).tobytes())


def load_cube(path) -> WavefieldCube:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise CubeTruncatedError(f"{path}: file shorter than the {_HEADER.size}-byte header")
    magic, nx, ny, nt, dx, dy, ox, oy, dt = _HEADER.unpack_from(raw)
    if magic != CUBE_MAGIC:
        raise CubeFormatError(f"{path}: bad magic {magic!r}, expected {CUBE_MAGIC!r}")
    for name, value in (("nx", nx), ("ny", ny)):
        if value < 2:
            raise CubeFormatError(f"{path}: header field {name}={value} must be >= 2")
    if nt < 1:
        raise CubeFormatError(f"{path}: header field T={nt} must be >= 1")
    for name, value in (("dx", dx), ("dy", dy), ("dt", dt)):
        if not (np.isfinite(value) and value > 0):
            raise CubeFormatError(f"{path}: header field {name}={value} must be positive")
    for name, value in (("origin_x", ox), ("origin_y", oy)):
        if not np.isfinite(value):
            raise CubeFormatError(f"{path}: header field {name} is not finite")
    expected = nx * ny * nt * 8
    payload = raw[_HEADER.size:]
    if len(payload) != expected:
        raise CubeTruncatedError(
            f"{path}: payload is {len(payload)} bytes, header implies {expected}")
    data = np.frombuffer(payload, dtype="<f8").reshape(nx * ny, nt)
    return WavefieldCube(GridSpec(nx, ny, dx, dy, ox, oy), dt, data)


def mask_path(path) -> Path:
    return Path(path).with_suffix(".mask")


def save_mask(active: np.ndarray, path) -> None:
    Path(path).write_bytes(np.asarray(active, dtype=np.uint8).tobytes())


def load_mask(path, n_points: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) != n_points:
        raise CubeTruncatedError(f"{path}: mask has {len(raw)} bytes, expected {n_points}")
    return np.frombuffer(raw, dtype=np.uint8).astype(bool)


def save_masked(masked: MaskedCube, path) -> None:
    """Write the retained snapshots as a cube plus a ``.mask`` sidecar."""
    c = masked.cube
    save_cube(WavefieldCube(c.grid, c.dt, c.data[:, masked.t_start:]), path)
    save_mask(masked.active, mask_path(path))


def load_masked(path, mask_file=None) -> MaskedCube:
    cube = load_cube(path)
    mf = Path(mask_file) if mask_file is not None else mask_path(path)
    if mf.exists():
        return MaskedCube(cube, load_mask(mf, cube.grid.n_points), 0)
    if mask_file is not None:
        raise FileNotFoundError(mf)
    return MaskedCube.unmasked(cube)


def export_csv(cube: WavefieldCube, path) -> None:
    x, y = cube.grid.coords()
    table = np.column_stack([x, y, cube.data])
    header = ",".join(["x", "y"] + [f"t{k}" for k in range(cube.n_snapshots)])
    np.savetxt(path, table, delimiter=",", header=header, comments="", fmt="%.17g")


# -- preprocessing -------------------------------------------------------------

def truncate_early(cube, fraction: float) -> MaskedCube:
    """Drop the first ``floor(fraction * T)`` snapshots."""
    masked = _as_masked(cube)
    if not 0.0 <= fraction < 1.0:
        raise ValueError(f"fraction must lie in [0, 1), got {fraction}")
    t_start = int(np.floor(fraction * masked.cube.n_snapshots))
    if t_start >= masked.cube.n_snapshots:
        raise ValueError("truncation would leave no snapshots")
    return MaskedCube(masked.cube, masked.active, t_start)


def exclude_boundary_layer(masked, side: str, thickness: float) -> MaskedCube:
    """Deactivate points closer than ``thickness`` (meters) to one edge of the grid."""
    masked = _as_masked(masked)
    g = masked.grid
    if side not in SIDES:
        raise ValueError(f"side must be one of {SIDES}, got {side!r}")
    extent = g.extent_x if side in ("left", "right") else g.extent_y
    if thickness < 0 or thickness >= extent:
        raise ValueError(f"thickness {thickness} must lie in [0, {extent})")
    x, y = g.coords()
    dist = {
        "left": x - g.origin_x,
        "right": g.origin_x + g.extent_x - x,
        "bottom": y - g.origin_y,
        "top": g.origin_y + g.extent_y - y,
    }[side]
    return MaskedCube(masked.cube, masked.active & ~(dist < thickness), masked.t_start)


def bandpass_kernel(f_center: float, bandwidth: float, taps: int, dt: float) -> np.ndarray:
    nyq = 0.5 / dt
    lo, hi = f_center - bandwidth / 2, f_center + bandwidth / 2
    if not (0 < lo and hi < nyq):
        raise ValueError(f"pass band [{lo}, {hi}] Hz must lie strictly inside (0, {nyq}) Hz")
    if taps < 3 or taps % 2 == 0:
        raise ValueError(f"taps must be odd and >= 3, got {taps}")
    return signal.firwin(taps, [lo, hi], pass_zero=False, window="hamming", fs=1.0 / dt)


def bandpass_time(cube: WavefieldCube, f_center: float, bandwidth: float,
                  taps: int = 101) -> WavefieldCube:
    """Zero-phase FIR band-pass of every time history.

    The kernel is symmetric, so centring it on each sample removes the
    ``(taps - 1) / 2`` group delay of the causal filter.
    """
    h = bandpass_kernel(f_center, bandwidth, taps, cube.dt)
    out = ndimage.convolve1d(cube.data, h, axis=1, mode="constant", cval=0.0)
    return WavefieldCube(cube.grid, cube.dt, out)


def normalize(masked: MaskedCube) -> tuple[MaskedCube, float]:
    """Rescale so the retained snapshots have unit mean column norm over active rows.

    Returns the rescaled cube and the factor applied.
    """
    x = masked.x_block()
    scale = float(np.mean(np.linalg.norm(x, axis=0)))
    if scale == 0.0:
        return masked, 1.0
    c = masked.cube
    cube = WavefieldCube(c.grid, c.dt, c.data / scale)
    return MaskedCube(cube, masked.active, masked.t_start), 1.0 / scale
