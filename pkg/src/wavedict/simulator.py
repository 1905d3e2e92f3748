"""Transient flexural waves on a thin rectangular plate with embedded soft anomalies.

Kirchhoff plate, explicit central differences in time. The stiffness matrix is
assembled from a discrete bending energy,

    U = 1/2 sum_nodes  D (kxx^2 + kyy^2 + 2 nu kxx kyy) dA
      + 1/2 sum_cells  2 (1 - nu) D kxy^2 dA,

with curvatures taken by second differences where they exist. Edge nodes carry
no bending energy along the edge normal, which gives free (traction-less) edges
as the natural boundary condition and makes ``K`` symmetric positive
semi-definite, so the leapfrog scheme conserves a discrete energy.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.sparse import linalg as splinalg

from .wavefield import GridSpec, WavefieldCube

# default point-defect radius as a fraction of the plate length; small
# enough to be local, large enough to hold a few grid nodes at desk scale
DEFAULT_RADIUS_FRACTION = 0.02

POINT = "point"
LINE = "line"


class StabilityError(ValueError):
    def __init__(self, dt, dt_max):
        super().__init__(f"dt={dt:.6g} s exceeds the stability limit {dt_max:.6g} s")
        self.dt = dt
        self.dt_max = dt_max


@dataclass(frozen=True)
class PlateSpec:
    lx: float
    ly: float
    h: float
    youngs: float
    poisson: float
    density: float
    grid: GridSpec

    def __post_init__(self):
        for name in ("lx", "ly", "h", "youngs", "density"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.poisson < 0.5:
            raise ValueError(f"poisson ratio must lie in (0, 0.5), got {self.poisson}")

    @classmethod
    def reference(cls, nx: int = 100, ny: int = 50) -> "PlateSpec":
        """1.0 x 0.5 m aluminium sheet, 2 mm thick."""
        return cls(1.0, 0.5, 0.002, 71e9, 0.33, 2700.0, GridSpec.spanning(1.0, 0.5, nx, ny))

    @property
    def bending_stiffness(self) -> float:
        return self.youngs * self.h ** 3 / (12.0 * (1.0 - self.poisson ** 2))

    def wavelength(self, freq: float) -> float:
        """Flexural wavelength at ``freq`` (Hz) for the pristine material."""
        omega = 2 * math.pi * freq
        k = (self.density * self.h * omega ** 2 / self.bending_stiffness) ** 0.25
        return 2 * math.pi / k

    def frequency_for_wavelength(self, wavelength: float) -> float:
        k = 2 * math.pi / wavelength
        omega = k * k * math.sqrt(self.bending_stiffness / (self.density * self.h))
        return omega / (2 * math.pi)


@dataclass(frozen=True)
class AnomalySpec:
    kind: str
    position: tuple
    radius_or_halfwidth: float
    stiffness_factor: float = 0.01
    density_factor: float = 1.0

    def __post_init__(self):
        if self.kind not in (POINT, LINE):
            raise ValueError(f"anomaly kind must be 'point' or 'line', got {self.kind!r}")
        pos = tuple(tuple(float(c) for c in p) for p in self.position) if self.kind == LINE \
            else tuple(float(c) for c in self.position)
        if self.kind == LINE and len(pos) != 2:
            raise ValueError("a line anomaly needs two endpoints")
        object.__setattr__(self, "position", pos)
        for name in ("stiffness_factor", "density_factor"):
            f = getattr(self, name)
            if not 0 < f <= 1:
                raise ValueError(f"{name} must lie in (0, 1], got {f}")
        if self.radius_or_halfwidth < 0:
            raise ValueError("radius must be >= 0")

    def points(self) -> list:
        return list(self.position) if self.kind == LINE else [self.position]

    def footprint(self, grid: GridSpec) -> np.ndarray:
        """Boolean mask of grid points whose centres fall inside the anomaly."""
        x, y = grid.coords()
        if self.kind == POINT:
            px, py = self.position
            dist = np.hypot(x - px, y - py)
        else:
            (x0, y0), (x1, y1) = self.position
            ex, ey = x1 - x0, y1 - y0
            seg2 = ex * ex + ey * ey
            s = np.zeros_like(x) if seg2 == 0 else np.clip(((x - x0) * ex + (y - y0) * ey) / seg2, 0, 1)
            dist = np.hypot(x - (x0 + s * ex), y - (y0 + s * ey))
        inside = dist <= self.radius_or_halfwidth + 1e-12
        if not inside.any():
            inside[np.argmin(dist)] = True
        return inside


def point_anomaly(x: float, y: float, radius: float, stiffness_factor: float = 0.01,
                  density_factor: float = 1.0) -> AnomalySpec:
    return AnomalySpec(POINT, (x, y), radius, stiffness_factor, density_factor)


def crack_spec(x0: float, x1: float, y: float, factor: float, plate: PlateSpec) -> AnomalySpec:
    """Horizontal line defect scaling stiffness and density by ``factor``, one cell half-width."""
    if x0 > x1:
        raise ValueError(f"need x0 <= x1, got {x0} > {x1}")
    g = plate.grid
    for px in (x0, x1):
        if not g.contains(px, y):
            raise ValueError(f"crack endpoint ({px}, {y}) lies outside the plate")
    return AnomalySpec(LINE, ((x0, y), (x1, y)), min(g.dx, g.dy), factor, factor)


@dataclass(frozen=True)
class ExcitationSpec:
    position: tuple
    carrier_f: float
    cycles: int = 5
    amplitude: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "position", tuple(float(c) for c in self.position))
        if self.cycles < 1:
            raise ValueError("cycles must be >= 1")
        if not self.carrier_f > 0:
            raise ValueError("carrier frequency must be positive")

    @property
    def duration(self) -> float:
        return self.cycles / self.carrier_f


def tone_burst(t, spec: ExcitationSpec):
    """Hann-windowed sine burst, zero outside ``[0, cycles / f_c]``."""
    t = np.asarray(t, dtype=np.float64)
    tb = spec.duration
    window = 0.5 * (1.0 - np.cos(2 * np.pi * t / tb))
    value = spec.amplitude * np.sin(2 * np.pi * spec.carrier_f * t) * window
    out = np.where((t >= 0) & (t <= tb), value, 0.0)
    return out if out.ndim else float(out)


# -- discretisation ------------------------------------------------------------------

def _second_difference(n_fast, n_slow, h, fast_axis):
    """Sparse operator giving the second difference along one grid axis.

    Rows for points on the two bounding lines of that axis are empty.
    """
    n = n_fast * n_slow
    idx = np.arange(n).reshape(n_slow, n_fast) if fast_axis else np.arange(n).reshape(n_fast, n_slow).T
    # idx[s, f]: flat index with f along the differenced axis
    centre = idx[:, 1:-1].ravel()
    minus = idx[:, :-2].ravel()
    plus = idx[:, 2:].ravel()
    rows = np.concatenate([centre, centre, centre])
    cols = np.concatenate([minus, centre, plus])
    vals = np.concatenate([np.ones(centre.size), -2 * np.ones(centre.size), np.ones(centre.size)])
    return sparse.csr_matrix((vals / h ** 2, (rows, cols)), shape=(n, n))


def _mixed_difference(nx, ny, dx, dy):
    """Cell-centred d2/dxdy, one row per cell."""
    idx = np.arange(nx * ny).reshape(ny, nx)
    a = idx[:-1, :-1].ravel()
    b = idx[:-1, 1:].ravel()
    c = idx[1:, :-1].ravel()
    d = idx[1:, 1:].ravel()
    m = a.size
    rows = np.tile(np.arange(m), 4)
    cols = np.concatenate([a, b, c, d])
    vals = np.concatenate([np.ones(m), -np.ones(m), -np.ones(m), np.ones(m)]) / (dx * dy)
    return sparse.csr_matrix((vals, (rows, cols)), shape=(m, nx * ny))


def material_fields(plate: PlateSpec, anomalies) -> tuple[np.ndarray, np.ndarray]:
    """Per-node bending stiffness and density after applying every anomaly."""
    g = plate.grid
    stiff = np.full(g.n_points, plate.bending_stiffness)
    rho = np.full(g.n_points, plate.density)
    for an in anomalies:
        for px, py in an.points():
            if not g.contains(px, py):
                raise ValueError(f"anomaly point ({px}, {py}) lies outside the plate")
        fp = an.footprint(g)
        stiff[fp] *= an.stiffness_factor
        rho[fp] *= an.density_factor
    return stiff, rho


@dataclass
class PlateModel:
    """Assembled mass and stiffness for one plate/anomaly configuration."""

    plate: PlateSpec
    anomalies: tuple = ()
    stiffness: sparse.csr_matrix = field(init=False, repr=False)
    mass: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.anomalies = tuple(self.anomalies)
        p, g = self.plate, self.plate.grid
        stiff, rho = material_fields(p, self.anomalies)
        area = g.dx * g.dy
        lxx = _second_difference(g.nx, g.ny, g.dx, fast_axis=True)
        lyy = _second_difference(g.ny, g.nx, g.dy, fast_axis=False)
        lxy = _mixed_difference(g.nx, g.ny, g.dx, g.dy)
        sn = sparse.diags(stiff)
        nu = p.poisson
        cell = stiff.reshape(g.ny, g.nx)
        cell = 0.25 * (cell[:-1, :-1] + cell[:-1, 1:] + cell[1:, :-1] + cell[1:, 1:]).ravel()
        k = (lxx.T @ sn @ lxx + lyy.T @ sn @ lyy
             + nu * (lxx.T @ sn @ lyy + lyy.T @ sn @ lxx)
             + 2 * (1 - nu) * (lxy.T @ sparse.diags(cell) @ lxy))
        k = area * k
        self.stiffness = ((k + k.T) * 0.5).tocsr()
        self.stiffness.sort_indices()
        self.mass = rho * p.h * area

    def max_stable_dt(self) -> float:
        """``2 / omega_max`` for the leapfrog scheme."""
        s = sparse.diags(1.0 / np.sqrt(self.mass))
        op = (s @ self.stiffness @ s).tocsr()
        v0 = np.ones(op.shape[0])
        lam = splinalg.eigsh(op, k=1, which="LA", v0=v0, tol=1e-6,
                             return_eigenvectors=False)[0]
        # eigsh converges from below; pad so the bound stays conservative
        return 2.0 / math.sqrt(lam * (1 + 1e-4))

    def energy(self, w_prev, w_next, dt) -> float:
        """Conserved leapfrog energy between two consecutive steps."""
        v = (w_next - w_prev) / dt
        return 0.5 * float(v @ (self.mass * v)) + 0.5 * float(w_next @ (self.stiffness @ w_prev))

    def run(self, excitation: ExcitationSpec, duration: float, dt: float,
            record_every: int = 1, track_energy: bool = False):
        """March ``duration`` seconds; return (snapshots N x T, energies or None)."""
        g = self.plate.grid
        ex, ey = excitation.position
        if not g.contains(ex, ey):
            raise ValueError(f"excitation point ({ex}, {ey}) lies outside the plate")
        src = g.nearest_index(ex, ey)
        n_steps = int(round(duration / dt))
        if n_steps < 1:
            raise ValueError("duration shorter than one time step")
        inv_m = 1.0 / self.mass
        k = self.stiffness
        w_prev = np.zeros(g.n_points)
        w = np.zeros(g.n_points)
        force = tone_burst(dt * np.arange(n_steps + 1), excitation)
        dt2 = dt * dt
        frames = []
        energies = [] if track_energy else None
        for n in range(1, n_steps + 1):
            acc = -(k @ w)
            acc[src] += force[n - 1]
            w_next = 2.0 * w - w_prev + dt2 * (inv_m * acc)
            if track_energy:
                energies.append(self.energy(w, w_next, dt))
            w_prev, w = w, w_next
            if n % record_every == 0:
                frames.append(w.copy())
        if not frames:
            raise ValueError("record_every exceeds the number of steps")
        return np.column_stack(frames), (np.asarray(energies) if track_energy else None)


def auto_dt(model: PlateModel) -> float:
    """0.9 x the stability limit, rounded down to three significant digits."""
    raw = 0.9 * model.max_stable_dt()
    scale = 10.0 ** (math.floor(math.log10(raw)) - 2)
    return math.floor(raw / scale) * scale


def check_resolution(plate: PlateSpec, excitation: ExcitationSpec, min_ppw: float = 10.0) -> None:
    g = plate.grid
    ppw = plate.wavelength(excitation.carrier_f) / max(g.dx, g.dy)
    if ppw < min_ppw:
        raise ValueError(
            f"grid resolves the carrier wavelength with {ppw:.1f} points; need >= {min_ppw}")


def simulate(plate: PlateSpec, anomalies, excitation: ExcitationSpec, duration: float,
             dt: float = 0.0, record_every: int = 1) -> WavefieldCube:
    """Out-of-plane displacement history sampled every ``record_every`` steps.

    ``dt = 0`` picks a step automatically; an explicit ``dt`` above the
    stability limit raises :class:`StabilityError`.
    """
    if not duration > 0:
        raise ValueError("duration must be positive")
    check_resolution(plate, excitation)
    model = PlateModel(plate, tuple(anomalies))
    if dt == 0:
        dt = auto_dt(model)
    else:
        dt_max = model.max_stable_dt()
        if dt >= dt_max:
            raise StabilityError(dt, dt_max)
    frames, _ = model.run(excitation, duration, dt, record_every)
    return WavefieldCube(plate.grid, dt * record_every, frames)


# -- scenario files ------------------------------------------------------------------

@dataclass(frozen=True)
class Scenario:
    plate: PlateSpec
    anomalies: tuple
    excitation: ExcitationSpec
    duration: float
    dt: float = 0.0
    record_every: int = 1

    def run(self) -> WavefieldCube:
        return simulate(self.plate, self.anomalies, self.excitation, self.duration,
                        self.dt, self.record_every)


def _anomaly_from_dict(block: dict, plate: PlateSpec) -> AnomalySpec:
    kind = block.get("kind", POINT)
    if kind == "crack":
        return crack_spec(block["x0"], block["x1"], block["y"], block.get("factor", 0.01), plate)
    if kind == LINE:
        return AnomalySpec(LINE, (tuple(block["start"]), tuple(block["end"])),
                           block.get("halfwidth", min(plate.grid.dx, plate.grid.dy)),
                           block.get("stiffness_factor", 0.01), block.get("density_factor", 1.0))
    if kind == POINT:
        radius = block.get("radius", DEFAULT_RADIUS_FRACTION * plate.lx)
        return point_anomaly(block["x"], block["y"], radius,
                             block.get("stiffness_factor", 0.01), block.get("density_factor", 1.0))
    raise ValueError(f"unknown anomaly kind {kind!r}")


_SCENARIO_KEYS = {"plate", "excitation", "anomalies", "duration", "dt", "record_every"}
_PLATE_KEYS = {"lx", "ly", "nx", "ny", "h", "youngs", "poisson", "density"}
_EXCITATION_KEYS = {"position", "carrier_f", "lx_over_wavelength", "cycles", "amplitude",
                    "relative"}
_ANOMALY_KEYS = {
    POINT: {"kind", "x", "y", "radius", "stiffness_factor", "density_factor", "relative"},
    LINE: {"kind", "start", "end", "halfwidth", "stiffness_factor", "density_factor", "relative"},
    "crack": {"kind", "x0", "x1", "y", "factor", "relative"},
}
_ANOMALY_REQUIRED = {POINT: {"x", "y"}, LINE: {"start", "end"}, "crack": {"x0", "x1", "y"}}


def scenario_key_errors(cfg) -> list[str]:
    """Unknown or missing keys in a scenario description, one message each."""
    if not isinstance(cfg, dict):
        return ["scenario must be a JSON object"]
    errors = [f"unknown scenario key {k!r}" for k in sorted(set(cfg) - _SCENARIO_KEYS)]
    for name, allowed in (("plate", _PLATE_KEYS), ("excitation", _EXCITATION_KEYS)):
        block = cfg.get(name, {})
        if not isinstance(block, dict):
            errors.append(f"scenario.{name} must be an object")
            continue
        errors += [f"unknown scenario.{name} key {k!r}" for k in sorted(set(block) - allowed)]
    anomalies = cfg.get("anomalies", [])
    if not isinstance(anomalies, list):
        return errors + ["scenario.anomalies must be a list"]
    for i, block in enumerate(anomalies):
        if not isinstance(block, dict):
            errors.append(f"scenario.anomalies[{i}] must be an object")
            continue
        kind = block.get("kind", POINT)
        if kind not in _ANOMALY_KEYS:
            errors.append(f"scenario.anomalies[{i}]: unknown kind {kind!r}")
            continue
        errors += [f"unknown scenario.anomalies[{i}] key {k!r}"
                   for k in sorted(set(block) - _ANOMALY_KEYS[kind])]
        errors += [f"scenario.anomalies[{i}] is missing {k!r}"
                   for k in sorted(_ANOMALY_REQUIRED[kind] - set(block))]
    return errors


def scenario_from_dict(cfg: dict) -> Scenario:
    """Build a scenario; lengths in anomaly/excitation blocks may be given as
    fractions of the plate size via ``"relative": true``."""
    errors = scenario_key_errors(cfg)
    if errors:
        raise ValueError("; ".join(errors))
    pb = dict(cfg.get("plate", {}))
    lx, ly = pb.get("lx", 1.0), pb.get("ly", 0.5)
    nx, ny = pb.get("nx", 100), pb.get("ny", 50)
    plate = PlateSpec(lx, ly, pb.get("h", 0.002), pb.get("youngs", 71e9), pb.get("poisson", 0.33),
                      pb.get("density", 2700.0), GridSpec.spanning(lx, ly, nx, ny))

    def scaled(block):
        block = dict(block)
        if block.pop("relative", False):
            for key in ("x", "x0", "x1"):
                if key in block:
                    block[key] *= lx
            if "y" in block:
                block["y"] *= ly
            for key in ("start", "end", "position"):
                if key in block:
                    block[key] = (block[key][0] * lx, block[key][1] * ly)
        return block

    eb = scaled(cfg.get("excitation", {}))
    carrier = eb.get("carrier_f")
    if carrier is None:
        carrier = plate.frequency_for_wavelength(lx / eb.get("lx_over_wavelength", 9.5))
    excitation = ExcitationSpec(tuple(eb.get("position", (0.0, ly / 2))), carrier,
                                eb.get("cycles", 5), eb.get("amplitude", 1.0))
    anomalies = tuple(_anomaly_from_dict(scaled(b), plate) for b in cfg.get("anomalies", []))
    return Scenario(plate, anomalies, excitation, cfg.get("duration", 12e-3),
                    cfg.get("dt", 0.0), cfg.get("record_every", 5))


def load_scenario(path) -> Scenario:
    return scenario_from_dict(json.loads(Path(path).read_text()))
