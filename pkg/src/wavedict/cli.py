"""Command-line pipeline: simulate -> preprocess -> learn -> detect -> render.

Each stage reads and writes the documented file formats, so any stage can be
rerun on its own.  ``run`` chains all of them from one JSON config.

Exit codes: 0 on success (either verdict), 2 for configuration errors,
3 for failures while running a stage.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from . import sparse as sp
from .learner import TwoDictParams, learn_two_dict, load_result, save_result
from .simulator import load_scenario, scenario_from_dict, scenario_key_errors
from .superatom import (DetectionReport, PartitionGrid, SuperAtomParams, build_superatom,
                        detect, render_heatmap)
from .wavefield import (CUBE_MAGIC, SIDES, MaskedCube, bandpass_time, exclude_boundary_layer,
                        export_csv, load_cube, load_mask, load_masked, normalize, save_cube,
                        save_masked, truncate_early)

log = logging.getLogger("wavedict")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


class ConfigError(ValueError):
    """Invalid configuration; ``violations`` lists every problem found."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class StageError(RuntimeError):
    def __init__(self, stage: str, exc: BaseException):
        self.stage = stage
        super().__init__(f"{stage} stage failed: {exc}")


# -- configuration -------------------------------------------------------------------

@dataclass(frozen=True)
class Preprocess:
    """Preprocessing recipe applied to a raw cube before learning.

    The default exclusions suit the desk-scale reference plate excited on its
    left edge: a 0.1 m layer at the source edge and 0.05 m on the free edges.
    ``f_center``/``bandwidth`` of ``None`` mean "the excitation carrier".
    """
    truncate: float = 0.25
    exclude: tuple = (("left", 0.1), ("right", 0.05), ("bottom", 0.05), ("top", 0.05))
    bandpass: bool = True
    f_center: float | None = None
    bandwidth: float | None = None
    taps: int = 31
    normalize: bool = True

    def apply(self, cube, carrier: float | None = None,
              active: np.ndarray | None = None) -> tuple[MaskedCube, float]:
        if self.bandpass:
            fc = self.f_center if self.f_center is not None else carrier
            if fc is None:
                raise ValueError("band-pass needs f_center when the carrier is unknown")
            bw = self.bandwidth if self.bandwidth is not None else fc
            cube = bandpass_time(cube, fc, bw, self.taps)
        masked = MaskedCube(cube, active if active is not None
                            else np.ones(cube.grid.n_points, bool), 0)
        masked = truncate_early(masked, self.truncate)
        for side, thickness in self.exclude:
            masked = exclude_boundary_layer(masked, side, thickness)
        if not self.normalize:
            return masked, 1.0
        return normalize(masked)

    def to_dict(self) -> dict:
        bp = None
        if self.bandpass:
            bp = {"f_center": self.f_center, "bandwidth": self.bandwidth, "taps": self.taps}
        return {"truncate": self.truncate, "exclude": dict(self.exclude), "bandpass": bp,
                "normalize": self.normalize}


@dataclass(frozen=True)
class PipelineConfig:
    scenario: dict | None
    cube: str | None
    mask: str | None
    preprocess: Preprocess = field(default_factory=Preprocess)
    learn: TwoDictParams = field(default_factory=TwoDictParams)
    detect: SuperAtomParams = field(default_factory=SuperAtomParams)
    out_dir: str = "out"
    png: bool = True
    figures: bool = True

    def to_dict(self) -> dict:
        """Effective parameters (defaults included); the thread count is left out
        because it never changes results."""
        learn = {_LEARN_NAMES.get(k, k): v for k, v in asdict(self.learn).items()
                 if k not in ("threads", "seed")}
        return {
            "scenario": self.scenario,
            "cube": self.cube,
            "mask": self.mask,
            "preprocess": self.preprocess.to_dict(),
            "learn": learn,
            "detect": asdict(self.detect),
            "seed": self.learn.seed,
            "render": {"png": self.png, "figures": self.figures},
        }


_TOP_KEYS = {"scenario", "cube", "mask", "preprocess", "learn", "detect", "seed", "threads",
             "out_dir", "render"}
_PRE_KEYS = {"truncate", "exclude", "bandpass", "normalize"}
_BP_KEYS = {"f_center", "bandwidth", "taps"}
_RENDER_KEYS = {"png", "figures"}
# config key -> TwoDictParams field
_LEARN_FIELDS = {"k1": "k1", "k2": "k2", "lambda": "lam", "gamma0": "gamma0", "delta": "delta",
                 "eps_nnz": "epsilon_nnz", "max_outer_iters": "max_outer_iters",
                 "max_alt_iters": "max_alt_iters", "tol": "tol"}
_LEARN_NAMES = {v: k for k, v in _LEARN_FIELDS.items()}

_INT, _NUM, _BOOL = "an integer", "a number", "true or false"


def _is(kind: str, v) -> bool:
    if isinstance(v, bool):
        return kind == _BOOL
    if kind == _INT:
        return isinstance(v, int)
    if kind == _NUM:
        return isinstance(v, (int, float)) and np.isfinite(v)
    return False


_LEARN_RULES = {
    "k1": (_INT, lambda v: v >= 1, "k1 must be >= 1"),
    "k2": (_INT, lambda v: v >= 1, "k2 must be >= 1"),
    "lambda": (_NUM, lambda v: v > 0, "lambda must be > 0"),
    "gamma0": (_NUM, lambda v: v >= 0, "gamma0 must be >= 0"),
    "delta": (_NUM, lambda v: v > 0, "delta must be > 0"),
    "eps_nnz": (_NUM, lambda v: v >= 1, "eps_nnz must be >= 1"),
    "max_outer_iters": (_INT, lambda v: v >= 0, "max_outer_iters must be >= 0"),
    "max_alt_iters": (_INT, lambda v: v >= 1, "max_alt_iters must be >= 1"),
    "tol": (_NUM, lambda v: v > 0, "tol must be > 0"),
}
_DETECT_RULES = {
    "m1": (_INT, lambda v: v >= 1, "m1 must be >= 1"),
    "m2": (_INT, lambda v: v >= 1, "m2 must be >= 1"),
    "persistence_min": (_INT, lambda v: v >= 1, "persistence_min must be >= 1"),
    "amplitude_min": (_NUM, lambda v: v >= 0, "amplitude_min must be >= 0"),
    "top_q": (_INT, lambda v: v >= 1, "top_q must be >= 1"),
}


def _checked(block, rules: dict, where: str, errors: list) -> dict:
    if not isinstance(block, dict):
        errors.append(f"{where} must be an object")
        return {}
    errors += [f"unknown {where} key {k!r}" for k in sorted(set(block) - set(rules))]
    out = {}
    for key, (kind, ok, msg) in rules.items():
        if key not in block:
            continue
        v = block[key]
        if not _is(kind, v):
            errors.append(f"{where}.{key} must be {kind}")
        elif not ok(v):
            errors.append(msg)
        else:
            out[key] = v
    return out


def _preprocess_from(block, errors: list, have_carrier: bool) -> Preprocess:
    if not isinstance(block, dict):
        errors.append("preprocess must be an object")
        return Preprocess()
    errors += [f"unknown preprocess key {k!r}" for k in sorted(set(block) - _PRE_KEYS)]
    kw = {}
    if "truncate" in block:
        v = block["truncate"]
        if not _is(_NUM, v) or not 0 <= v < 1:
            errors.append("truncate must lie in [0, 1)")
        else:
            kw["truncate"] = float(v)
    if "exclude" in block:
        ex = block["exclude"]
        if not isinstance(ex, dict):
            errors.append("preprocess.exclude must map edge names to thicknesses")
        else:
            pairs = []
            for side, th in ex.items():
                if side not in SIDES:
                    errors.append(f"unknown edge {side!r} in preprocess.exclude (use {SIDES})")
                elif not _is(_NUM, th) or th < 0:
                    errors.append(f"exclusion thickness for {side} must be >= 0")
                else:
                    pairs.append((side, float(th)))
            kw["exclude"] = tuple(pairs)
    if "normalize" in block:
        if not _is(_BOOL, block["normalize"]):
            errors.append(f"preprocess.normalize must be {_BOOL}")
        else:
            kw["normalize"] = block["normalize"]
    bp = block.get("bandpass", {})
    if bp is None:
        kw["bandpass"] = False
    elif not isinstance(bp, dict):
        errors.append("preprocess.bandpass must be an object or null")
    else:
        errors += [f"unknown preprocess.bandpass key {k!r}" for k in sorted(set(bp) - _BP_KEYS)]
        for key in ("f_center", "bandwidth"):
            v = bp.get(key)
            if v is not None and (not _is(_NUM, v) or v <= 0):
                errors.append(f"bandpass {key} must be > 0")
            elif v is not None:
                kw[key] = float(v)
        if "taps" in bp:
            t = bp["taps"]
            if not _is(_INT, t) or t < 3 or t % 2 == 0:
                errors.append("bandpass taps must be an odd integer >= 3")
            else:
                kw["taps"] = t
        if bp.get("f_center") is None and not have_carrier:
            errors.append("bandpass needs f_center when the input is a cube "
                          "(set preprocess.bandpass to null to skip filtering)")
    return Preprocess(**kw)


def _resolve(path_value, base: Path) -> Path:
    p = Path(path_value)
    return p if p.is_absolute() else base / p


def validate_config(source, base_dir=None) -> PipelineConfig:
    """Parse and check a pipeline config (file path or already-loaded dict).

    Collects every violation before raising :class:`ConfigError`.  Relative
    paths inside the config are taken relative to the config file.
    """
    if isinstance(source, dict):
        cfg = source
        base = Path(base_dir) if base_dir is not None else Path.cwd()
    else:
        path = Path(source)
        try:
            cfg = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError([f"config file {path} does not exist"]) from None
        except json.JSONDecodeError as exc:
            raise ConfigError([f"{path}: invalid JSON ({exc})"]) from None
        base = Path(base_dir) if base_dir is not None else path.parent
    if not isinstance(cfg, dict):
        raise ConfigError(["config must be a JSON object"])
    # a null top-level entry means "not given", so printed effective configs load back
    cfg = {k: v for k, v in cfg.items() if v is not None}

    errors = [f"unknown config key {k!r}" for k in sorted(set(cfg) - _TOP_KEYS)]

    scenario = cube = mask = None
    has_scn, has_cube = "scenario" in cfg, "cube" in cfg
    if has_scn == has_cube:
        errors.append("exactly one of 'scenario' or 'cube' is required")
    if has_scn:
        raw = cfg["scenario"]
        if isinstance(raw, str):
            sp_path = _resolve(raw, base)
            if not sp_path.exists():
                errors.append(f"scenario file {sp_path} does not exist")
                raw = None
            else:
                try:
                    raw = json.loads(sp_path.read_text())
                except json.JSONDecodeError as exc:
                    errors.append(f"scenario file {sp_path}: invalid JSON ({exc})")
                    raw = None
        if raw is not None:
            key_errors = scenario_key_errors(raw)
            errors += key_errors
            if not key_errors:
                try:
                    scenario_from_dict(raw)
                    scenario = raw
                except (ValueError, TypeError, KeyError) as exc:
                    errors.append(f"scenario: {exc}")
    if has_cube:
        cube_path = _resolve(cfg["cube"], base)
        if not cube_path.exists():
            errors.append(f"cube file {cube_path} does not exist")
        cube = str(cube_path)
    if "mask" in cfg:
        if not has_cube:
            errors.append("'mask' is only valid together with 'cube'")
        mask_file = _resolve(cfg["mask"], base)
        if not mask_file.exists():
            errors.append(f"mask file {mask_file} does not exist")
        mask = str(mask_file)

    pre = _preprocess_from(cfg.get("preprocess", {}), errors, have_carrier=has_scn)
    learn = _checked(cfg.get("learn", {}), _LEARN_RULES, "learn", errors)
    det = _checked(cfg.get("detect", {}), _DETECT_RULES, "detect", errors)
    m = det.get("m1", SuperAtomParams.m1) * det.get("m2", SuperAtomParams.m2)
    if det.get("top_q", 1) > m:
        errors.append(f"top_q must be <= m1*m2 = {m}")
        det.pop("top_q")

    seed = cfg.get("seed", 0)
    if not _is(_INT, seed) or seed < 0:
        errors.append("seed must be a non-negative integer")
        seed = 0
    threads = cfg.get("threads")
    if threads is not None and (not _is(_INT, threads) or threads < 1):
        errors.append("threads must be a positive integer or null")
        threads = None
    out_dir = cfg.get("out_dir", "out")
    if not isinstance(out_dir, str):
        errors.append("out_dir must be a string")
    render = cfg.get("render", {})
    if not isinstance(render, dict):
        errors.append("render must be an object")
        render = {}
    errors += [f"unknown render key {k!r}" for k in sorted(set(render) - _RENDER_KEYS)]
    for key in _RENDER_KEYS & set(render):
        if not _is(_BOOL, render[key]):
            errors.append(f"render.{key} must be {_BOOL}")

    if errors:
        raise ConfigError(errors)
    params = TwoDictParams(**{_LEARN_FIELDS[k]: v for k, v in learn.items()},
                           seed=seed, threads=threads)
    return PipelineConfig(scenario, cube, mask, pre, params, SuperAtomParams(**det),
                          str(_resolve(out_dir, base)), render.get("png", True),
                          render.get("figures", True))


# -- pipeline ------------------------------------------------------------------------

class _stage:
    """Context manager tagging any failure with the stage name."""

    def __init__(self, name: str):
        self.name = name

    def __enter__(self):
        log.info("stage %s", self.name)

    def __exit__(self, kind, exc, tb):
        if exc is not None and not isinstance(exc, (StageError, ConfigError)):
            log.error("%s stage failed: %s", self.name, exc)
            raise StageError(self.name, exc) from exc
        return False


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_partition_csv(path, superatom, partition: PartitionGrid, report: DetectionReport):
    ranks = {k: r for r, k in enumerate(report.partitions, start=1)}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["partition", "col_block", "row_block", "x0", "x1", "y0", "y1",
                    "persistence", "score", "flagged", "reported_rank"])
        for k in range(partition.n_partitions):
            cx, cy = partition.block_of(k)
            x0, x1, y0, y1 = partition.bbox(k)
            w.writerow([k, cx, cy, f"{x0:.6g}", f"{x1:.6g}", f"{y0:.6g}", f"{y1:.6g}",
                        int(superatom.persistence[k]), f"{superatom.partition_scores[k]:.6g}",
                        int(k in superatom.flagged), ranks.get(k, "")])


def render_outputs(out: Path, result, superatom, partition, report, grid, *, png=True,
                   figures=True, seed=0) -> list:
    """Heatmap (PGM, optional PNG twin) plus matplotlib figures; returns file names."""
    written = ["superatom.pgm"]
    render_heatmap(superatom.scores, grid, out / "superatom.pgm", report, partition, png=png)
    if png:
        written.append("superatom.png")
    if figures:
        from . import plotting

        plotting.plot_superatom(superatom.scores, grid, partition, out / "fig_superatom.png",
                                report)
        plotting.plot_atoms(result.full_atoms(1), grid, out / "fig_sparse_atoms.png", seed=seed,
                            title="sparse atoms (sample)")
        plotting.plot_atoms(result.full_atoms(2), grid, out / "fig_diffuse_atoms.png",
                            seed=seed, title="diffuse atoms (sample)")
        written += ["fig_superatom.png", "fig_sparse_atoms.png", "fig_diffuse_atoms.png"]
        if result.history:
            plotting.plot_history(result.history, out / "fig_history.png")
            written.append("fig_history.png")
    return written


def run_pipeline(config: PipelineConfig) -> DetectionReport:
    """Run every stage and write all artifacts into ``config.out_dir``."""
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []

    with _stage("simulate"):
        if config.scenario is not None:
            scenario = scenario_from_dict(config.scenario)
            cube = scenario.run()
            carrier = scenario.excitation.carrier_f
            save_cube(cube, out / "cube.wfc")
            files.append("cube.wfc")
            active = None
        else:
            cube = load_cube(config.cube)
            carrier = None
            active = load_mask(config.mask, cube.grid.n_points) if config.mask else None
    grid = cube.grid

    with _stage("preprocess"):
        masked, scale = config.preprocess.apply(cube, carrier, active)
        save_masked(masked, out / "preprocessed.wfc")
        files += ["preprocessed.wfc", "preprocessed.mask"]

    with _stage("learn"):
        result = learn_two_dict(masked, config.learn)
        save_result(result, config.learn, out / "bundle")
        files += [f"bundle/{n}" for n in ("D1.dic", "D2.dic", "A1.cof", "A2.cof",
                                           "active.mask", "manifest.json")]

    with _stage("detect"):
        sa_params = config.detect
        superatom = build_superatom(result.d1, grid, masked.active, sa_params)
        partition = PartitionGrid(sa_params.m1, sa_params.m2, grid)
        report = detect(superatom, partition, grid, sa_params.top_q, asdict(sa_params))
        report.save(out / "report.json")
        write_partition_csv(out / "partition_scores.csv", superatom, partition, report)
        files += ["report.json", "partition_scores.csv"]

    with _stage("render"):
        files += render_outputs(out, result, superatom, partition, report, grid,
                                png=config.png, figures=config.figures, seed=config.learn.seed)

    manifest = {
        "version": __version__,
        "config": config.to_dict(),
        "carrier_f": carrier,
        "normalization": scale,
        "gamma_final": result.gamma_final,
        "outer_iters": result.outer_iters,
        "truncated": result.truncated,
        "rel_error": result.rel_error,
        "verdict": report.verdict,
        "reported_partitions": report.partitions,
        "artifacts": {name: _sha256(out / name) for name in files},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    log.info("verdict: %s %s", report.verdict, report.partitions)
    return report


# -- argument parsing ----------------------------------------------------------------

def _grid_from(path):
    """Grid of a cube file or of a scenario description."""
    p = Path(path)
    with open(p, "rb") as fh:
        head = fh.read(4)
    if head == CUBE_MAGIC:
        return load_cube(p).grid
    return load_scenario(p).plate.grid


def _learn_flags(p, defaults: bool):
    d = TwoDictParams()
    default = (lambda v: v) if defaults else (lambda v: argparse.SUPPRESS)
    p.add_argument("--k1", type=int, default=default(d.k1), help="sparse atom count")
    p.add_argument("--k2", type=int, default=default(d.k2), help="diffuse atom count")
    p.add_argument("--lambda", dest="lam", type=float, default=default(d.lam),
                   help="l1 weight on the coefficients")
    p.add_argument("--gamma0", type=float, default=default(d.gamma0))
    p.add_argument("--delta", type=float, default=default(d.delta), help="Gamma increment")
    p.add_argument("--eps-nnz", type=float, default=default(d.epsilon_nnz),
                   help="target mean nonzeros per sparse atom")
    p.add_argument("--max-outer-iters", type=int, default=default(d.max_outer_iters))


def _detect_flags(p, defaults: bool):
    d = SuperAtomParams()
    default = (lambda v: v) if defaults else (lambda v: argparse.SUPPRESS)
    p.add_argument("--m1", type=int, default=default(d.m1), help="partitions along x")
    p.add_argument("--m2", type=int, default=default(d.m2), help="partitions along y")
    p.add_argument("--persistence-min", type=int, default=default(d.persistence_min))
    p.add_argument("--amplitude-min", type=float, default=default(d.amplitude_min))
    p.add_argument("--top-q", type=int, default=default(d.top_q))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wavedict", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--log-level", default="INFO",
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    parser.add_argument("--threads", type=int, default=None,
                        help="worker threads for the sparse coder (results do not depend on it)")
    # the same two flags may also follow the subcommand name
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--log-level", default=argparse.SUPPRESS,
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS)
    sub = parser.add_subparsers(dest="command", required=True)
    _add = sub.add_parser

    def add_parser(name, **kw):
        return _add(name, parents=[common], **kw)

    sub.add_parser = add_parser

    p = sub.add_parser("simulate", help="simulate a scenario into a cube file")
    p.add_argument("--scenario", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--csv", help="also export the cube as CSV")

    p = sub.add_parser("preprocess", help="truncate, mask, filter and scale a cube")
    p.add_argument("--cube", required=True)
    p.add_argument("--mask")
    p.add_argument("--truncate", type=float, default=0.25)
    p.add_argument("--exclude", action="append", default=[], metavar="EDGE=METERS",
                   help="exclude a boundary layer; repeatable (e.g. left=0.1)")
    p.add_argument("--bandpass-center", type=float, help="band-pass centre in Hz (off if unset)")
    p.add_argument("--bandwidth", type=float, help="pass-band width in Hz (default: centre)")
    p.add_argument("--taps", type=int, default=31)
    p.add_argument("--no-normalize", action="store_true")
    p.add_argument("--out", required=True)

    p = sub.add_parser("learn", help="learn the sparse and diffuse dictionaries")
    p.add_argument("--cube", required=True)
    p.add_argument("--mask")
    _learn_flags(p, defaults=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="result bundle directory")

    p = sub.add_parser("detect", help="build the super-atom and report anomalous partitions")
    p.add_argument("--dict", required=True, help="sparse dictionary file (D1.dic)")
    p.add_argument("--grid", required=True, help="cube file or scenario file")
    p.add_argument("--mask", help="active mask (default: active.mask next to the dictionary)")
    _detect_flags(p, defaults=True)
    p.add_argument("--out", required=True, help="report JSON path")
    p.add_argument("--heatmap", help="write the super-atom as a PGM image")
    p.add_argument("--csv", help="write per-partition scores as CSV")

    p = sub.add_parser("render", help="draw heatmaps and figures for a result bundle")
    p.add_argument("--bundle", required=True)
    p.add_argument("--grid", required=True, help="cube file or scenario file")
    _detect_flags(p, defaults=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--no-png", action="store_true")

    p = sub.add_parser("run", help="full pipeline from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    p.add_argument("--out-dir", default=argparse.SUPPRESS)
    _learn_flags(p, defaults=False)
    _detect_flags(p, defaults=False)

    p = sub.add_parser("validate", help="check a config and print its effective values")
    p.add_argument("--config", required=True)
    return parser


_RUN_OVERRIDES = {
    "lam": ("learn", "lambda"), "k1": ("learn", "k1"), "k2": ("learn", "k2"),
    "gamma0": ("learn", "gamma0"), "delta": ("learn", "delta"), "eps_nnz": ("learn", "eps_nnz"),
    "max_outer_iters": ("learn", "max_outer_iters"), "m1": ("detect", "m1"),
    "m2": ("detect", "m2"), "persistence_min": ("detect", "persistence_min"),
    "amplitude_min": ("detect", "amplitude_min"), "top_q": ("detect", "top_q"),
}


def _load_with_overrides(args) -> PipelineConfig:
    path = Path(args.config)
    try:
        cfg = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError([f"config file {path} does not exist"]) from None
    except json.JSONDecodeError as exc:
        raise ConfigError([f"{path}: invalid JSON ({exc})"]) from None
    if not isinstance(cfg, dict):
        raise ConfigError(["config must be a JSON object"])
    cfg = json.loads(json.dumps(cfg))
    given = vars(args)
    for attr, (section, key) in _RUN_OVERRIDES.items():
        if attr in given:
            block = cfg.setdefault(section, {})
            if isinstance(block, dict):
                block[key] = given[attr]
    if "seed" in given:
        cfg["seed"] = given["seed"]
    if args.threads is not None:
        cfg["threads"] = args.threads
    config = validate_config(cfg, base_dir=path.parent)
    if "out_dir" in given:
        config = replace(config, out_dir=str(Path(given["out_dir"])))
    return config


def _cmd_simulate(args):
    with _stage("simulate"):
        try:
            scenario = load_scenario(args.scenario)
        except FileNotFoundError:
            raise ConfigError([f"scenario file {args.scenario} does not exist"]) from None
        except ValueError as exc:
            raise ConfigError([str(exc)]) from None
        cube = scenario.run()
        save_cube(cube, args.out)
        if args.csv:
            export_csv(cube, args.csv)
    log.info("wrote %s (%d points x %d snapshots, dt=%.4g s)", args.out, cube.grid.n_points,
             cube.n_snapshots, cube.dt)


def _cmd_preprocess(args):
    exclude = []
    errors = []
    for item in args.exclude:
        side, _, value = item.partition("=")
        try:
            exclude.append((side, float(value)))
        except ValueError:
            errors.append(f"--exclude expects EDGE=METERS, got {item!r}")
        if side not in SIDES:
            errors.append(f"unknown edge {side!r}")
    if errors:
        raise ConfigError(errors)
    pre = Preprocess(args.truncate, tuple(exclude), args.bandpass_center is not None,
                     args.bandpass_center, args.bandwidth, args.taps, not args.no_normalize)
    with _stage("preprocess"):
        cube = load_cube(args.cube)
        active = load_mask(args.mask, cube.grid.n_points) if args.mask else None
        masked, scale = pre.apply(cube, None, active)
        save_masked(masked, args.out)
    log.info("kept %d of %d points and %d snapshots; scale factor %.6g", masked.n_active,
             cube.grid.n_points, masked.n_retained, scale)


def _cmd_learn(args):
    try:
        params = TwoDictParams(args.k1, args.k2, args.lam, args.gamma0, args.delta, args.eps_nnz,
                               args.max_outer_iters, seed=args.seed, threads=args.threads)
    except ValueError as exc:
        raise ConfigError([str(exc)]) from None
    with _stage("learn"):
        masked = load_masked(args.cube, args.mask)
        result = learn_two_dict(masked, params)
        save_result(result, params, args.out)
    log.info("gamma_final=%.4g rel_error=%.4f truncated=%s", result.gamma_final,
             result.rel_error, result.truncated)


def _superatom_params(args) -> SuperAtomParams:
    try:
        return SuperAtomParams(args.m1, args.m2, args.persistence_min, args.amplitude_min,
                               args.top_q)
    except ValueError as exc:
        raise ConfigError([str(exc)]) from None


def _cmd_detect(args):
    params = _superatom_params(args)
    with _stage("detect"):
        grid = _grid_from(args.grid)
        d1 = sp.load_dictionary(args.dict)
        mask_file = Path(args.mask) if args.mask else Path(args.dict).with_name("active.mask")
        if mask_file.exists():
            mask = load_mask(mask_file, grid.n_points)
        elif args.mask:
            raise FileNotFoundError(mask_file)
        else:
            mask = None
        superatom = build_superatom(d1, grid, mask, params)
        partition = PartitionGrid(params.m1, params.m2, grid)
        report = detect(superatom, partition, grid, params.top_q, asdict(params))
        report.save(args.out)
        if args.csv:
            write_partition_csv(args.csv, superatom, partition, report)
        if args.heatmap:
            render_heatmap(superatom.scores, grid, args.heatmap, report, partition)
    print(json.dumps({"verdict": report.verdict, "partitions": report.partitions}))


def _cmd_render(args):
    params = _superatom_params(args)
    with _stage("render"):
        grid = _grid_from(args.grid)
        result = load_result(args.bundle)
        superatom = build_superatom(result.d1, grid, result.active, params)
        partition = PartitionGrid(params.m1, params.m2, grid)
        report = detect(superatom, partition, grid, params.top_q, asdict(params))
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        render_outputs(out, result, superatom, partition, report, grid, png=not args.no_png)
        write_partition_csv(out / "partition_scores.csv", superatom, partition, report)


def _cmd_run(args):
    config = _load_with_overrides(args)
    report = run_pipeline(config)
    print(json.dumps({"verdict": report.verdict, "partitions": report.partitions,
                      "out_dir": config.out_dir}))


def _cmd_validate(args):
    config = _load_with_overrides(args)
    print(json.dumps(config.to_dict(), indent=2, sort_keys=True))


_COMMANDS = {"simulate": _cmd_simulate, "preprocess": _cmd_preprocess, "learn": _cmd_learn,
             "detect": _cmd_detect, "render": _cmd_render, "run": _cmd_run,
             "validate": _cmd_validate}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    if args.threads is not None and args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        _COMMANDS[args.command](args)
    except ConfigError as exc:
        for v in exc.violations:
            print(f"config error: {v}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
