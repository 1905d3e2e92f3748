"""Sparse coding and constrained dictionary updates.

Objective throughout (no 1/2 on the quadratic term)::

    F(D, A) = sum_t ||x_t - D a_t||_2^2 + lam * ||a_t||_1

so every soft threshold below uses ``lam / 2``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numba
import numpy as np

# skip the TBB layer: an outdated system TBB only produces a warning before
# numba falls back anyway
numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]

NNZ_THRESHOLD = 1e-8

L2 = "l2"
ELASTIC_NET = "elastic_net"


@dataclass(frozen=True)
class Constraint:
    """Column constraint set: ``||d||_2^2 + gamma * ||d||_1 <= 1`` (gamma = 0 for the l2 ball)."""

    kind: str = L2
    gamma: float = 0.0

    def __post_init__(self):
        if self.kind not in (L2, ELASTIC_NET):
            raise ValueError(f"unknown constraint kind {self.kind!r}")
        if self.gamma < 0 or (self.kind == L2 and self.gamma != 0):
            raise ValueError(f"invalid gamma {self.gamma} for {self.kind} ball")

    @classmethod
    def elastic_net(cls, gamma: float) -> "Constraint":
        return cls(ELASTIC_NET, float(gamma))

    def value(self, d: np.ndarray) -> np.ndarray:
        """Constraint function per column (or for a single vector)."""
        return np.sum(d * d, axis=0) + self.gamma * np.sum(np.abs(d), axis=0)

    def project(self, v: np.ndarray) -> np.ndarray:
        if self.kind == L2:
            return project_l2_ball(v)
        return project_elastic_net_ball(v, self.gamma)


def project_l2_ball(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(v)
    if norm <= 1.0:
        return v.copy()
    return v / norm


def _enet_shrink(mags: np.ndarray, mu: float, half_gamma: float) -> np.ndarray:
    return np.maximum(mags - mu * half_gamma, 0.0) / (1.0 + mu)


def _enet_mu_bisect(mags: np.ndarray, gamma: float, tol: float) -> float:
    c = 0.5 * gamma

    def g(mu):
        d = _enet_shrink(mags, mu, c)
        return np.dot(d, d) + gamma * d.sum() - 1.0

    lo, hi = 0.0, 1.0
    while g(hi) > 0:
        lo, hi = hi, 2.0 * hi
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        if g(mid) > 0:
            lo = mid
        else:
            hi = mid
        if -tol <= g(hi) <= 0:
            break
    return hi


def _enet_mu_exact(mags: np.ndarray, gamma: float) -> float | None:
    """Multiplier from the breakpoint interval that holds the root.

    With the top-``s`` magnitudes active the constraint is quadratic in
    ``1 + mu``: ``(s c^2 + 1)((1 + mu)^2 - 1) = S2 + gamma S1 - 1``.
    The constraint value is monotone in ``mu``, so exactly one support size
    is self-consistent; ``None`` if rounding leaves none.
    """
    c = 0.5 * gamma
    u = np.sort(mags[mags > 0])[::-1]
    s = np.arange(1, u.size + 1)
    s1 = np.cumsum(u)
    s2 = np.cumsum(u * u)
    mu = np.sqrt(1.0 + (s2 + gamma * s1 - 1.0) / (s * c * c + 1.0)) - 1.0
    nxt = np.append(u[1:], 0.0)
    ok = (mu >= 0) & (mu * c < u) & (mu * c >= nxt)
    hit = np.flatnonzero(ok)
    return float(mu[hit[0]]) if hit.size else None


def project_elastic_net_ball(v: np.ndarray, gamma: float, tol: float = 1e-10) -> np.ndarray:
    """Euclidean projection onto ``{d : ||d||_2^2 + gamma ||d||_1 <= 1}``.

    The minimiser is ``sign(v) * max(|v| - mu*gamma/2, 0) / (1 + mu)`` for a
    multiplier ``mu >= 0`` at which the constraint is tight. ``mu`` is read off
    the breakpoint interval containing the root; bisection on the constraint
    value is the fallback.
    """
    v = np.asarray(v, dtype=np.float64)
    if gamma < 0:
        raise ValueError(f"gamma must be >= 0, got {gamma}")
    mags = np.abs(v)
    if np.dot(v, v) + gamma * mags.sum() <= 1.0:
        return v.copy()
    if gamma == 0:
        return project_l2_ball(v)
    mu = _enet_mu_exact(mags, gamma)
    if mu is None:
        mu = _enet_mu_bisect(mags, gamma, tol)
    d = np.sign(v) * _enet_shrink(mags, mu, 0.5 * gamma)
    excess = np.dot(d, d) + gamma * np.abs(d).sum()
    if excess > 1.0 + 1e-12:
        # rounding put us outside; shrink onto the set
        d = np.sign(v) * _enet_shrink(mags, _enet_mu_bisect(mags, gamma, tol), 0.5 * gamma)
    return d


# -- dictionaries ----------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Dictionary:
    atoms: np.ndarray
    constraint: Constraint = field(default_factory=Constraint)
    retired: np.ndarray | None = None
    reseeded: np.ndarray | None = None

    def __post_init__(self):
        atoms = np.array(self.atoms, dtype=np.float64)
        if atoms.ndim != 2:
            raise ValueError(f"atoms must be a 2-D array, got shape {atoms.shape}")
        k = atoms.shape[1]
        retired = np.zeros(k, bool) if self.retired is None else np.array(self.retired, bool)
        reseeded = np.zeros(k, bool) if self.reseeded is None else np.array(self.reseeded, bool)
        for a in (atoms, retired, reseeded):
            a.setflags(write=False)
        object.__setattr__(self, "atoms", atoms)
        object.__setattr__(self, "retired", retired)
        object.__setattr__(self, "reseeded", reseeded)

    @property
    def n_rows(self) -> int:
        return self.atoms.shape[0]

    @property
    def k(self) -> int:
        return self.atoms.shape[1]

    def feasibility_residual(self) -> float:
        """Largest constraint violation over the atoms (0 when feasible)."""
        if self.k == 0:
            return 0.0
        return float(max(0.0, np.max(self.constraint.value(self.atoms)) - 1.0))

    def nnz(self) -> int:
        return int(np.count_nonzero(np.abs(self.atoms) > NNZ_THRESHOLD))

    def with_constraint(self, constraint: Constraint) -> "Dictionary":
        """Re-project every atom onto a new constraint set."""
        atoms = np.column_stack([constraint.project(self.atoms[:, j]) for j in range(self.k)]) \
            if self.k else self.atoms
        return Dictionary(atoms, constraint, self.retired, self.reseeded)


def objective(x: np.ndarray, d: np.ndarray, a: np.ndarray, lam: float) -> float:
    r = x - d @ a
    return float(np.sum(r * r) + lam * np.sum(np.abs(a)))


@numba.njit(cache=True)
def _cd_column(gram, q, a, half, tol, max_sweeps):
    k = a.shape[0]
    for _ in range(max_sweeps):
        max_step = 0.0
        for j in range(k):
            gjj = gram[j, j]
            if gjj <= 0.0:
                continue
            z = q[j] + gjj * a[j]
            if z > half:
                new = (z - half) / gjj
            elif z < -half:
                new = (z + half) / gjj
            else:
                new = 0.0
            delta = new - a[j]
            if delta == 0.0:
                continue
            a[j] = new
            for i in range(k):
                q[i] -= gram[i, j] * delta
            step = abs(delta) * np.sqrt(gjj)
            if step > max_step:
                max_step = step
        if max_step <= tol:
            break


@numba.njit(parallel=True, cache=True)
def _cd_block(gram, corr, a, half, tol, max_sweeps):
    """Cyclic coordinate descent, one independent problem per column of ``a``.

    Each column keeps ``q = D^T x - G a`` current after every coordinate step.
    """
    for t in numba.prange(a.shape[1]):
        col = a[:, t].copy()
        q = corr[:, t].copy()
        for j in range(col.shape[0]):
            if col[j] != 0.0:
                for i in range(col.shape[0]):
                    q[i] -= gram[i, j] * col[j]
        _cd_column(gram, q, col, half, tol, max_sweeps)
        a[:, t] = col


def lasso_solve_block(d: np.ndarray, x: np.ndarray, lam: float, a0: np.ndarray | None = None,
                      tol: float = 1e-12, max_sweeps: int = 1000,
                      threads: int | None = None) -> np.ndarray:
    """Solve the per-column lasso for every column of ``x`` (shape N x T).

    Columns are solved independently, so the result does not depend on
    ``threads`` (the numba worker count).
    """
    d = np.asarray(d, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if d.shape[0] != x.shape[0]:
        raise ValueError(f"dictionary has {d.shape[0]} rows but data has {x.shape[0]}")
    if not lam > 0:
        raise ValueError(f"lambda must be > 0, got {lam}")
    k, t = d.shape[1], x.shape[1]
    a = np.zeros((k, t)) if a0 is None else np.array(a0, dtype=np.float64).reshape(k, t)
    gram = np.ascontiguousarray(d.T @ d)
    corr = np.ascontiguousarray(d.T @ x)
    a = np.ascontiguousarray(a)
    if threads:
        previous = numba.get_num_threads()
        numba.set_num_threads(min(threads, numba.config.NUMBA_NUM_THREADS))
    try:
        _cd_block(gram, corr, a, 0.5 * lam, tol, max_sweeps)
    finally:
        if threads:
            numba.set_num_threads(previous)
    return a


def lasso_solve(d, x: np.ndarray, lam: float, **kwargs) -> np.ndarray:
    """Minimise ``||x - D a||^2 + lam ||a||_1`` for one column by cyclic coordinate descent."""
    atoms = d.atoms if isinstance(d, Dictionary) else np.asarray(d, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("x must be a single column")
    return lasso_solve_block(atoms, x, lam, **kwargs)[:, 0]


# -- dictionary update ---------------------------------------------------------------

def dict_update(d: Dictionary, x_block: np.ndarray, a: np.ndarray) -> Dictionary:
    """One block-coordinate sweep over the atoms with ``A`` fixed.

    For atom j the fit term is an isotropic quadratic in ``d_j`` centred on
    ``d_j + (X a_j^T - D A a_j^T) / ||a_j||^2``, so projecting that centre
    onto the constraint set is the exact block minimiser.
    """
    x_block = np.asarray(x_block, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    if x_block.shape[0] != d.n_rows or a.shape != (d.k, x_block.shape[1]):
        raise ValueError(
            f"shape mismatch: D {d.atoms.shape}, X {x_block.shape}, A {a.shape}")
    atoms = np.array(d.atoms)
    retired = np.array(d.retired)
    b = x_block @ a.T
    c = a @ a.T
    for j in range(d.k):
        cjj = c[j, j]
        if cjj <= 0.0:
            retired[j] = True
            continue
        u = atoms[:, j] + (b[:, j] - atoms @ c[:, j]) / cjj
        atoms[:, j] = d.constraint.project(u)
    return Dictionary(atoms, d.constraint, retired, d.reseeded)


# -- alternating minimisation ---------------------------------------------------------

@dataclass(frozen=True)
class LearnParams:
    lam: float
    max_alt_iters: int = 30
    tol: float = 1e-4
    seed: int = 0
    lasso_tol: float = 1e-9
    lasso_max_sweeps: int = 500
    threads: int | None = None

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError(f"lambda must be > 0, got {self.lam}")
        if not self.tol > 0:
            raise ValueError(f"tol must be > 0, got {self.tol}")
        if self.max_alt_iters < 1:
            raise ValueError("max_alt_iters must be >= 1")


@dataclass
class LearnTrace:
    """Objective after every half-step: ``[F0, F_A1, F_D1, F_A2, F_D2, ...]``."""

    objectives: list = field(default_factory=list)
    iterations: int = 0

    def monotone(self, slack: float = 1e-10) -> bool:
        f = np.asarray(self.objectives)
        return bool(np.all(f[1:] <= f[:-1] + slack * np.maximum(1.0, np.abs(f[:-1]))))


def seed_atom(column: np.ndarray, constraint: Constraint) -> np.ndarray:
    """Unit-norm copy of a data column projected onto the constraint set."""
    norm = np.linalg.norm(column)
    return constraint.project(column / norm) if norm > 0 else np.zeros_like(column)


def init_dictionary(x_block: np.ndarray, k: int, constraint: Constraint,
                    rng: np.random.Generator) -> Dictionary:
    """Atoms drawn from distinct data columns, normalised, then projected."""
    n, t = x_block.shape
    cols = rng.choice(t, size=min(k, t), replace=False)
    atoms = np.zeros((n, k))
    atoms[:, :len(cols)] = x_block[:, cols]
    if k > t:
        atoms[:, t:] = rng.standard_normal((n, k - t))
    for j in range(k):
        atoms[:, j] = seed_atom(atoms[:, j], constraint)
    return Dictionary(atoms, constraint)


def _alternate(x, d, a, lam, params, trace):
    f_prev = objective(x, d.atoms, a, lam)
    if not trace.objectives:
        trace.objectives.append(f_prev)
    for _ in range(params.max_alt_iters):
        a = lasso_solve_block(d.atoms, x, lam, a0=a, tol=params.lasso_tol,
                              max_sweeps=params.lasso_max_sweeps, threads=params.threads)
        trace.objectives.append(objective(x, d.atoms, a, lam))
        d = dict_update(d, x, a)
        f = objective(x, d.atoms, a, lam)
        trace.objectives.append(f)
        trace.iterations += 1
        if abs(f_prev - f) <= params.tol * max(f_prev, np.finfo(float).tiny):
            break
        f_prev = f
    return d, a


def learn_dictionary(x_block: np.ndarray, k: int, constraint: Constraint, params: LearnParams,
                     init: Dictionary | None = None, a0: np.ndarray | None = None,
                     ) -> tuple[Dictionary, np.ndarray, LearnTrace]:
    """Alternate lasso coding and dictionary sweeps until the objective settles.

    Atoms whose coefficient row is identically zero at the end are re-seeded
    once from the worst-fit data column; if they die again they are zeroed
    and flagged retired.
    """
    x = np.asarray(x_block, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("x_block must be 2-D")
    if not np.isfinite(x).all():
        raise ValueError("x_block contains NaN or Inf")
    if k < 1:
        raise ValueError(f"atom count must be >= 1, got {k}")
    lam = params.lam
    trace = LearnTrace()

    if not x.any():
        d = Dictionary(np.zeros((x.shape[0], k)), constraint, np.ones(k, bool), np.ones(k, bool))
        trace.objectives.append(0.0)
        return d, np.zeros((k, x.shape[1])), trace

    rng = np.random.default_rng(params.seed)
    if init is None:
        d = init_dictionary(x, k, constraint, rng)
    else:
        if init.k != k or init.n_rows != x.shape[0]:
            raise ValueError("warm-start dictionary has the wrong shape")
        d = init.with_constraint(constraint) if init.constraint != constraint else init
    a = np.zeros((k, x.shape[1])) if a0 is None else np.array(a0, dtype=np.float64)

    d, a = _alternate(x, d, a, lam, params, trace)

    dead = ~a.any(axis=1) & ~d.retired
    fresh = dead & ~d.reseeded
    if fresh.any():
        atoms = np.array(d.atoms)
        reseeded = np.array(d.reseeded)
        resid = np.sum((x - d.atoms @ a) ** 2, axis=0)
        order = np.argsort(-resid, kind="stable")
        for n, j in enumerate(np.flatnonzero(fresh)):
            atoms[:, j] = seed_atom(x[:, order[n % len(order)]], constraint)
            reseeded[j] = True
        d = Dictionary(atoms, constraint, d.retired, reseeded)
        # a_j = 0 for every re-seeded atom, so the objective is unchanged here
        d, a = _alternate(x, d, a, lam, params, trace)

    dead = ~a.any(axis=1)
    if dead.any():
        atoms = np.array(d.atoms)
        atoms[:, dead] = 0.0
        d = Dictionary(atoms, constraint, d.retired | dead, d.reseeded)
    return d, a, trace


def relative_error(x: np.ndarray, approx: np.ndarray) -> float:
    nx = np.linalg.norm(x)
    return float(np.linalg.norm(x - approx) / nx) if nx > 0 else 0.0


def bisect_lambda(evaluate: Callable[[float], float], target: float, lo: float, hi: float,
                  rtol: float = 0.02, max_iter: int = 20) -> tuple[float, float]:
    """Geometric bisection for the lambda whose relative error hits ``target``.

    ``evaluate(lam)`` returns the relative reconstruction error and is assumed
    to grow with ``lam``. Returns ``(lam, error)`` of the best evaluation.
    """
    if not 0 < lo < hi:
        raise ValueError("need 0 < lo < hi")
    best = None
    for _ in range(max_iter):
        mid = float(np.sqrt(lo * hi))
        err = evaluate(mid)
        if best is None or abs(err - target) < abs(best[1] - target):
            best = (mid, err)
        if abs(err - target) <= rtol * target:
            break
        if err > target:
            hi = mid
        else:
            lo = mid
    return best


def tune_lambda(x_block: np.ndarray, k: int, constraint: Constraint, params: LearnParams,
                target: float = 0.10, lo: float = 1e-4, hi: float = 10.0, **kwargs):
    """Pick lambda so a single learned dictionary reconstructs ``x_block`` to ``target``."""

    def evaluate(lam):
        p = LearnParams(**{**params.__dict__, "lam": lam})
        d, a, _ = learn_dictionary(x_block, k, constraint, p)
        return relative_error(x_block, d.atoms @ a)

    return bisect_lambda(evaluate, target, lo, hi, **kwargs)


# -- serialization ------------------------------------------------------------------

DICT_MAGIC = b"DIC1"
COEF_MAGIC = b"COF1"
_MAT_HEADER = struct.Struct("<4s2IBd")
_KIND_CODES = {L2: 0, ELASTIC_NET: 1}
_CODE_KINDS = {v: k for k, v in _KIND_CODES.items()}


def _write_matrix(path, magic, mat, kind_code=0, gamma=0.0, extra=b""):
    mat = np.ascontiguousarray(mat, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(_MAT_HEADER.pack(magic, mat.shape[0], mat.shape[1], kind_code, gamma))
        fh.write(mat.tobytes())
        fh.write(extra)


def _read_matrix(path, magic):
    from .wavefield import CubeFormatError, CubeTruncatedError

    raw = Path(path).read_bytes()
    if len(raw) < _MAT_HEADER.size:
        raise CubeTruncatedError(f"{path}: shorter than header")
    m, rows, cols, kind, gamma = _MAT_HEADER.unpack_from(raw)
    if m != magic:
        raise CubeFormatError(f"{path}: bad magic {m!r}, expected {magic!r}")
    n = rows * cols * 8
    body = raw[_MAT_HEADER.size:]
    if len(body) < n:
        raise CubeTruncatedError(f"{path}: payload shorter than {rows}x{cols} matrix")
    mat = np.frombuffer(body[:n], dtype="<f8").reshape(rows, cols).copy()
    return mat, kind, gamma, body[n:]


def save_dictionary(d: Dictionary, path) -> None:
    flags = (d.retired.astype(np.uint8) | (d.reseeded.astype(np.uint8) << 1)).tobytes()
    _write_matrix(path, DICT_MAGIC, d.atoms, _KIND_CODES[d.constraint.kind],
                  d.constraint.gamma, flags)


def load_dictionary(path) -> Dictionary:
    atoms, kind, gamma, extra = _read_matrix(path, DICT_MAGIC)
    if kind not in _CODE_KINDS:
        from .wavefield import CubeFormatError
        raise CubeFormatError(f"{path}: unknown constraint code {kind}")
    flags = np.frombuffer(extra, dtype=np.uint8) if extra else np.zeros(atoms.shape[1], np.uint8)
    return Dictionary(atoms, Constraint(_CODE_KINDS[kind], gamma),
                      (flags & 1).astype(bool), (flags & 2).astype(bool))


def save_coefficients(a: np.ndarray, path) -> None:
    _write_matrix(path, COEF_MAGIC, a)


def load_coefficients(path) -> np.ndarray:
    return _read_matrix(path, COEF_MAGIC)[0]
