"""Sparse + diffuse two-dictionary decomposition with escalating atom sparsity."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from . import sparse as sp
from .wavefield import MaskedCube

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TwoDictParams:
    k1: int = 100
    k2: int = 16
    lam: float = 0.05
    gamma0: float = 0.1
    delta: float = 0.01
    epsilon_nnz: float = 20.0
    max_outer_iters: int = 60
    seed: int = 0
    max_alt_iters: int = 20
    tol: float = 1e-3
    threads: int | None = None

    def __post_init__(self):
        if self.k1 < 1 or self.k2 < 1:
            raise ValueError("k1 and k2 must be >= 1")
        if not self.lam > 0:
            raise ValueError("lambda must be > 0")
        if self.gamma0 < 0:
            raise ValueError("gamma0 must be >= 0")
        if not self.delta > 0:
            raise ValueError("delta must be > 0")
        if self.epsilon_nnz < 1:
            raise ValueError("epsilon_nnz must be >= 1")
        if self.max_outer_iters < 0:
            raise ValueError("max_outer_iters must be >= 0")

    def inner(self, seed_offset: int) -> sp.LearnParams:
        return sp.LearnParams(lam=self.lam, max_alt_iters=self.max_alt_iters, tol=self.tol,
                              seed=self.seed + seed_offset, threads=self.threads)


@dataclass(frozen=True, eq=False)
class TwoDictResult:
    d1: sp.Dictionary
    a1: np.ndarray
    d2: sp.Dictionary
    a2: np.ndarray
    gamma_final: float
    outer_iters: int
    rel_error: float
    truncated: bool
    active: np.ndarray
    history: tuple = ()

    def full_atoms(self, which: int = 1) -> np.ndarray:
        """Atoms expanded back to every grid point (zeros on masked rows)."""
        d = self.d1 if which == 1 else self.d2
        out = np.zeros((self.active.size, d.k))
        out[self.active] = d.atoms
        return out


def sparsity_metric(d1) -> float:
    """Mean count of entries above the nonzero threshold per atom."""
    atoms = d1.atoms if isinstance(d1, sp.Dictionary) else np.asarray(d1)
    if atoms.shape[1] == 0:
        raise ValueError("empty dictionary")
    return np.count_nonzero(np.abs(atoms) > sp.NNZ_THRESHOLD) / atoms.shape[1]


def learn_two_dict(masked: MaskedCube, params: TwoDictParams) -> TwoDictResult:
    """Alternate sparse (elastic-net ball) and diffuse (l2 ball) fits.

    Gamma grows by ``delta`` per outer pass until the sparse atoms hold at
    most ``epsilon_nnz`` nonzeros on average, or the pass cap is hit (the
    result is then flagged ``truncated``).
    """
    x = masked.x_block()
    n_active, t = x.shape
    if params.epsilon_nnz >= n_active:
        raise ValueError(
            f"epsilon_nnz={params.epsilon_nnz} is not below the {n_active} active rows")
    if t < params.k1 + params.k2:
        raise ValueError(
            f"{t} retained snapshots cannot seed {params.k1} + {params.k2} atoms")
    if not np.isfinite(x).all():
        raise ValueError("wavefield contains NaN or Inf")

    gamma = params.gamma0
    enet = sp.Constraint.elastic_net(gamma)
    d1, a1, _ = sp.learn_dictionary(x, params.k1, enet, params.inner(0))
    d2 = a2 = None
    history = []

    def record(it):
        approx = d1.atoms @ a1 + (d2.atoms @ a2 if d2 is not None else 0.0)
        entry = {"iter": it, "gamma": gamma, "sparsity": sparsity_metric(d1),
                 "rel_error": sp.relative_error(x, approx)}
        history.append(entry)
        log.info("outer %d  gamma=%.4g  nnz/atom=%.2f  rel_error=%.4f",
                 it, gamma, entry["sparsity"], entry["rel_error"])

    record(0)
    it = 0
    while sparsity_metric(d1) > params.epsilon_nnz and it < params.max_outer_iters:
        it += 1
        gamma = params.gamma0 + it * params.delta
        d2, a2, _ = sp.learn_dictionary(x - d1.atoms @ a1, params.k2, sp.Constraint(),
                                        params.inner(1), init=d2, a0=a2)
        d1, a1, _ = sp.learn_dictionary(x - d2.atoms @ a2, params.k1,
                                        sp.Constraint.elastic_net(gamma), params.inner(0),
                                        init=d1, a0=a1)
        record(it)

    if d2 is None:
        # the sparse fit met the target straight away; still give the bulk a dictionary
        d2, a2, _ = sp.learn_dictionary(x - d1.atoms @ a1, params.k2, sp.Constraint(),
                                        params.inner(1))
    truncated = sparsity_metric(d1) > params.epsilon_nnz
    rel = sp.relative_error(x, d1.atoms @ a1 + d2.atoms @ a2)
    return TwoDictResult(d1, a1, d2, a2, gamma, it, rel, truncated,
                         np.array(masked.active), tuple(history))


def tune_lambda_two_dict(masked: MaskedCube, params: TwoDictParams, target: float = 0.10,
                         lo: float = 1e-3, hi: float = 0.5, rtol: float = 0.1,
                         max_iter: int = 12) -> tuple[float, TwoDictResult]:
    """Bisect lambda until the full decomposition's relative error is near ``target``.

    Returns the chosen lambda and the result learned with it.
    """
    runs = {}

    def evaluate(lam):
        runs[lam] = learn_two_dict(masked, replace(params, lam=lam))
        log.info("lambda=%.4g -> rel_error=%.4f", lam, runs[lam].rel_error)
        return runs[lam].rel_error

    lam, _ = sp.bisect_lambda(evaluate, target, lo, hi, rtol=rtol, max_iter=max_iter)
    return lam, runs[lam]


# -- result bundle -----------------------------------------------------------------

MANIFEST = "manifest.json"


def save_result(result: TwoDictResult, params: TwoDictParams, out_dir, extra: dict | None = None):
    """Write D1/D2/A1/A2 plus a JSON manifest into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sp.save_dictionary(result.d1, out / "D1.dic")
    sp.save_dictionary(result.d2, out / "D2.dic")
    sp.save_coefficients(result.a1, out / "A1.cof")
    sp.save_coefficients(result.a2, out / "A2.cof")
    (out / "active.mask").write_bytes(result.active.astype(np.uint8).tobytes())
    manifest = {
        "params": {k: v for k, v in asdict(params).items() if k != "threads"},
        "gamma_final": result.gamma_final,
        "outer_iters": result.outer_iters,
        "rel_error": result.rel_error,
        "truncated": result.truncated,
        "sparsity": sparsity_metric(result.d1),
        "history": list(result.history),
    }
    if extra:
        manifest.update(extra)
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_result(out_dir) -> TwoDictResult:
    out = Path(out_dir)
    manifest = json.loads((out / MANIFEST).read_text())
    active = np.frombuffer((out / "active.mask").read_bytes(), dtype=np.uint8).astype(bool)
    return TwoDictResult(
        sp.load_dictionary(out / "D1.dic"), sp.load_coefficients(out / "A1.cof"),
        sp.load_dictionary(out / "D2.dic"), sp.load_coefficients(out / "A2.cof"),
        manifest["gamma_final"], manifest["outer_iters"], manifest["rel_error"],
        manifest["truncated"], active, tuple(manifest["history"]))
