"""Experiment definitions, configuration files and output writers."""
from __future__ import annotations

import csv
import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import fields as F
from . import mesh as M
from . import multigrid as MG
from . import stencil as S
from .levelset import SHAPES_2D, LevelSetSpec, RootSearchConfig

log = logging.getLogger(__name__)

CASES = ("sphere_uniform", "sphere_refined", "shape2d", "shape3d_cyl",
         "two_electrodes", "manufactured")

# per-case defaults for keys left unset
_CASE_DEFAULTS = {
    "sphere_uniform": dict(dim=2, max_level=5, radius=0.25, w_min=0.0),
    "sphere_refined": dict(dim=3, max_level=9, radius=5e-3, w_min=1e-3),
    "shape2d": dict(dim=2, max_level=8, shape="spheroid", w_min=4e-3),
    "shape3d_cyl": dict(dim=3, max_level=5, shape="spheroid", w_min=8e-3),
    "two_electrodes": dict(dim=3, max_level=7, w_min=8e-3),
    "manufactured": dict(dim=2, max_level=5, w_min=0.0),
}

# two-electrode geometry
ROD = ((0.5, 0.5, 1.0), (0.5, 0.5, 0.8))
ROD_RADIUS = 0.05
HEMISPHERE = ((0.5, 0.5, 0.0), 0.25)
ELECTRODE_BASE_LEVEL = 5     # dx = 1/128
ELECTRODE_TIP_RANGE = 0.1


class ConfigError(ValueError):
    pass


@dataclass
class CaseConfig:
    """Settings of one run; ``None`` entries take the case default."""

    case: str = "sphere_uniform"
    dim: Optional[int] = None
    block_size: int = 8
    max_level: Optional[int] = None
    cycles: int = 8
    cycle: str = "fmg"
    n_up: int = 2
    n_down: int = 2
    coarse_rel_tol: float = 1e-6
    target_resid: float = 0.0
    w_min: Optional[float] = None
    safety_factor: float = 1.5
    eps_tol: float = 1e-8
    max_bracket_iters: int = 45
    d_min: float = 1e-4
    resolve_thin: bool = True
    radius: Optional[float] = None
    shape: Optional[str] = None
    offset: tuple = (0.0, 0.0)
    threads: int = 1
    out: str = ""

    def resolved(self) -> "CaseConfig":
        """Copy with case defaults filled in, validated."""
        if self.case not in CASES:
            raise ConfigError(f"unknown case {self.case!r}; choose from {', '.join(CASES)}")
        c = dataclasses.replace(self)
        for k, v in _CASE_DEFAULTS[self.case].items():
            if getattr(c, k) is None:
                setattr(c, k, v)
        if c.shape is None:
            c.shape = ""
        if c.radius is None:
            c.radius = 0.0
        c.validate()
        return c

    def validate(self):
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(self.dim in (2, 3), "dim must be 2 or 3")
        need(self.block_size >= 4 and not self.block_size & (self.block_size - 1),
             "block_size must be a power of two >= 4")
        need(self.max_level is not None and 1 <= self.max_level <= 20,
             "max_level must lie in 1..20")
        need(self.cycles >= 0, "cycles must be non-negative")
        need(self.cycle in ("fmg", "v"), "cycle must be fmg or v")
        need(self.n_up >= 1 and self.n_down >= 1, "n_up and n_down must be >= 1")
        need(0.0 < self.coarse_rel_tol < 1.0, "coarse_rel_tol must lie in (0, 1)")
        need(self.target_resid >= 0.0, "target_resid must be non-negative")
        need(self.w_min is not None and self.w_min >= 0.0, "w_min must be non-negative")
        need(self.safety_factor > 0.0, "safety_factor must be positive")
        need(self.threads >= 1, "threads must be >= 1")
        need(len(self.offset) == 2 and all(math.isfinite(v) for v in self.offset),
             "offset needs two finite numbers")
        try:
            RootSearchConfig(self.eps_tol, self.max_bracket_iters, self.d_min)
        except ValueError as e:
            raise ConfigError(str(e)) from None
        if self.case in ("shape2d", "shape3d_cyl"):
            need(self.shape in SHAPES_2D, f"shape must be one of {', '.join(SHAPES_2D)}")
        if self.case == "shape2d":
            need(self.dim == 2, "shape2d is two-dimensional")
        if self.case in ("shape3d_cyl", "two_electrodes", "sphere_refined"):
            need(self.dim == 3, f"{self.case} is three-dimensional")
        if self.case.startswith("sphere"):
            need(0.0 < self.radius < 0.5, "radius must lie in (0, 0.5)")
        if self.case == "two_electrodes":
            need(self.max_level >= ELECTRODE_BASE_LEVEL,
                 f"two_electrodes needs max_level >= {ELECTRODE_BASE_LEVEL}")

    def mg_config(self) -> MG.MgConfig:
        return MG.MgConfig(n_up=self.n_up, n_down=self.n_down, cycle=self.cycle,
                           coarse_rel_tol=self.coarse_rel_tol, max_cycles=self.cycles,
                           target_resid=self.target_resid)

    def stencil_options(self) -> S.StencilOptions:
        return S.StencilOptions(root=RootSearchConfig(self.eps_tol, self.max_bracket_iters,
                                                      self.d_min),
                                w_min=self.w_min, safety_factor=self.safety_factor,
                                resolve_thin=self.resolve_thin)


# --------------------------------------------------------------------------
# key = value files

def _convert(name, text):
    ftype = {f.name: f for f in dataclasses.fields(CaseConfig)}[name]
    default = ftype.default
    t = str(ftype.type)
    text = text.strip()
    if name == "offset":
        parts = [p for p in text.replace(",", " ").split() if p]
        return tuple(float(p) for p in parts)
    if "bool" in t:
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if "Optional" in t and text.lower() in ("", "none", "default"):
        return None
    if "int" in t:
        return int(text)
    if "float" in t:
        return float(text)
    return text


def apply_settings(cfg: CaseConfig, pairs) -> CaseConfig:
    """Apply ``(key, value)`` string pairs; unknown keys are errors."""
    names = {f.name for f in dataclasses.fields(CaseConfig)}
    cfg = dataclasses.replace(cfg)
    for key, value in pairs:
        key = key.strip()
        if key not in names:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            setattr(cfg, key, _convert(key, value))
        except ValueError as e:
            raise ConfigError(f"bad value for {key}: {e}") from None
    return cfg


def parse_pairs(lines, source="<config>"):
    pairs = []
    for no, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{no}: expected 'key = value'")
        k, v = line.split("=", 1)
        pairs.append((k.strip(), v.strip()))
    return pairs


def load_config(path=None, overrides=(), case=None) -> CaseConfig:
    cfg = CaseConfig()
    if path is not None:
        p = Path(path)
        cfg = apply_settings(cfg, parse_pairs(p.read_text().splitlines(), str(p)))
    if case is not None:
        cfg.case = case
    pairs = []
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        pairs.append((k, v))
    return apply_settings(cfg, pairs)


def format_config(cfg: CaseConfig) -> str:
    lines = []
    for f in dataclasses.fields(CaseConfig):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ", ".join(repr(float(x)) for x in v)
        elif isinstance(v, bool):
            v = "true" if v else "false"
        elif isinstance(v, float):
            v = repr(v)
        elif v is None:
            v = "none"
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# cases

@dataclass
class Problem:
    mesh: M.TreeMesh
    lsf: Optional[LevelSetSpec]
    rhs: Optional[callable]
    exact: Optional[callable]


def _dirichlet(dim, value):
    return [M.FaceBC("dirichlet", value)] * (2 * dim)


def _sphere_refine(cfg):
    dx_min = 1.0 / (cfg.block_size * 2 ** (cfg.max_level - 1))

    def crit(mesh, l, ids):
        if l >= cfg.max_level:
            return np.zeros(ids.size, bool)
        lo = mesh.origins(l, ids)
        hi = lo + mesh.n * mesh.dx(l)
        nearest = np.clip(0.0, lo, hi)
        r = np.linalg.norm(nearest, axis=1)
        return mesh.dx(l) > dx_min * np.maximum(1.0, r / cfg.radius)
    return crit


def _electrode_refine(cfg):
    tip = np.array(ROD[1]) - np.array([0.0, 0.0, ROD_RADIUS])

    def crit(mesh, l, ids):
        if l >= cfg.max_level:
            return np.zeros(ids.size, bool)
        if l < ELECTRODE_BASE_LEVEL:
            return np.ones(ids.size, bool)
        lo = mesh.origins(l, ids)
        hi = lo + mesh.n * mesh.dx(l)
        r = np.linalg.norm(np.clip(tip, lo, hi) - tip, axis=1)
        return r < ELECTRODE_TIP_RANGE
    return crit


def build_problem(cfg: CaseConfig) -> Problem:
    dim, n = cfg.dim, cfg.block_size
    unit = ([0.0] * dim, [1.0] * dim)
    centered = ([-0.5] * dim, [0.5] * dim)
    if cfg.case in ("sphere_uniform", "sphere_refined"):
        sol = F.AnalyticSolution(dim, cfg.radius)

        def exact(x):
            return F.analytic_eval(sol, x, strict=False)

        lsf = LevelSetSpec.sphere([0.0] * dim, cfg.radius, sol.phi_b)
        if cfg.case == "sphere_uniform":
            mesh = M.build_uniform(centered, n, cfg.max_level, bc=_dirichlet(dim, exact))
        else:
            mesh = M.build_uniform(centered, n, 1, bc=_dirichlet(dim, exact),
                                   max_level=cfg.max_level)
            mesh = M.refine_until(mesh, _sphere_refine(cfg))
        return Problem(mesh, lsf, None, exact)
    if cfg.case in ("shape2d", "shape3d_cyl"):
        shift = (0.5 + cfg.offset[0], 0.5 + cfg.offset[1])
        lsf = LevelSetSpec.shape(cfg.shape, value=1.0, shift=shift,
                                 cylindrical=cfg.case == "shape3d_cyl")
        mesh = M.build_uniform(unit, n, cfg.max_level, bc=_dirichlet(dim, 0.0))
        return Problem(mesh, lsf, None, None)
    if cfg.case == "two_electrodes":
        lsf = LevelSetSpec.composite([
            LevelSetSpec.rod(ROD[0], ROD[1], ROD_RADIUS, value=1.0),
            LevelSetSpec.sphere(HEMISPHERE[0], HEMISPHERE[1], value=0.0)])
        bc = [M.FaceBC("neumann")] * 4 + [M.FaceBC("dirichlet", 0.0),
                                          M.FaceBC("dirichlet", 1.0)]
        mesh = M.build_uniform(unit, n, 1, bc=bc, max_level=cfg.max_level)
        mesh = M.refine_until(mesh, _electrode_refine(cfg))
        return Problem(mesh, lsf, None, None)
    # manufactured: smooth solution with a source term and no objects
    k = np.pi

    def exact(x):
        return np.prod(np.sin(k * x[..., :]), axis=-1) + 0.25 * x[..., 0]

    def rhs(x):
        return -dim * k * k * np.prod(np.sin(k * x[..., :]), axis=-1)

    mesh = M.build_uniform(unit, n, cfg.max_level, bc=_dirichlet(dim, exact))
    return Problem(mesh, None, rhs, exact)


# --------------------------------------------------------------------------
# running

@dataclass
class CaseReport:
    config: CaseConfig
    history: list = field(default_factory=list)
    errors: list = field(default_factory=list)
    mesh_stats: dict = field(default_factory=dict)
    setup_seconds: float = 0.0
    converged: bool = False
    message: str = ""


@dataclass
class CaseRun:
    report: CaseReport
    state: Optional[MG.MgState]
    problem: Optional[Problem]


def mesh_statistics(mesh: M.TreeMesh, stencils) -> dict:
    stats = {
        "dim": mesh.dim,
        "block_size": mesh.n,
        "levels": mesh.n_levels,
        "dx_min": min(lev.dx for lev in mesh.levels if lev.leaf.any()),
        "blocks": sum(lev.n_blocks for lev in mesh.levels),
        "leaf_blocks": int(sum(lev.leaf.sum() for lev in mesh.levels)),
        "leaf_cells": mesh.n_cells(),
        "boundary_blocks": sum(st.n_boundary for st in stencils),
        "thin_resolved_cells": sum(st.n_thin for st in stencils),
    }
    for lev, st in zip(mesh.levels, stencils):
        stats[f"level_{lev.lvl}"] = (f"blocks={lev.n_blocks} leaves={int(lev.leaf.sum())} "
                                     f"boundary={st.n_boundary} thin={st.n_thin} dx={lev.dx!r}")
    return stats


def _set_threads(n):
    try:
        import numba
        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
    except (ImportError, ValueError):
        pass


def run_case(cfg: CaseConfig, callback=None) -> CaseRun:
    """Build and solve one case; solver failures end up in the report."""
    cfg = cfg.resolved()
    _set_threads(cfg.threads)
    report = CaseReport(config=cfg)
    t0 = time.perf_counter()
    prob = build_problem(cfg)
    stencils = S.build_stencils(prob.mesh, prob.lsf, cfg.stencil_options())
    state = MG.MgState(prob.mesh, stencils, cfg.mg_config())
    if prob.rhs is not None:
        state.set_rhs(prob.rhs)
    report.setup_seconds = time.perf_counter() - t0
    report.mesh_stats = mesh_statistics(prob.mesh, stencils)
    log.info("setup %.2fs, %d leaf cells", report.setup_seconds, report.mesh_stats["leaf_cells"])

    def record(st, rec):
        report.history.append(rec)
        if prob.exact is not None:
            e = F.error_norms(prob.mesh, st.phi, prob.exact, st.st)
            report.errors.append((rec.cycle, e.linf, e.l2, e.l2_volume))
        if callback is not None:
            callback(st, rec)

    try:
        MG.run_cycles(state, cfg.cycles, record)
        report.converged = _converged(report.history, cfg)
        report.message = "converged" if report.converged else "residual did not decrease"
    except (MG.CoarseSolveError, FloatingPointError) as e:
        report.converged = False
        report.message = str(e)
        log.error("solver failed: %s", e)
    return CaseRun(report, state, prob)


def _converged(history, cfg) -> bool:
    if not history:
        return True
    r = np.array([h.max_resid for h in history])
    if not np.all(np.isfinite(r)):
        return False
    if cfg.target_resid > 0:
        return bool(r[-1] <= cfg.target_resid)
    return bool(r.size == 1 or r[-1] < r[0])


def write_outputs(run: CaseRun, directory) -> Path:
    """Write residuals, errors, mesh statistics, the solution dump and the
    resolved configuration into ``directory``."""
    out = Path(directory)
    try:
        out.mkdir(parents=True, exist_ok=True)
        rep = run.report
        with open(out / "residuals.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["cycle", "max_resid", "l2_resid", "seconds"])
            for h in rep.history:
                w.writerow([h.cycle, repr(h.max_resid), repr(h.l2_resid), f"{h.seconds:.6f}"])
        if run.problem is not None and run.problem.exact is not None:
            with open(out / "errors.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["cycle", "linf", "l2", "l2_volume"])
                for row in rep.errors:
                    w.writerow([row[0]] + [repr(v) for v in row[1:]])
        lines = [f"{k} = {v}" for k, v in rep.mesh_stats.items()]
        lines += [f"setup_seconds = {rep.setup_seconds:.3f}",
                  f"converged = {str(rep.converged).lower()}",
                  f"message = {rep.message}"]
        (out / "mesh_stats.txt").write_text("\n".join(lines) + "\n")
        (out / "config.txt").write_text(format_config(rep.config))
        if run.state is not None:
            M.write_dump(run.state.mesh, run.state.phi, out / "solution")
    except OSError as e:
        raise OSError(f"cannot write outputs to {out}: {e}") from e
    return out


# --------------------------------------------------------------------------
# cost scaling

@dataclass
class ScalingRow:
    size: int
    block_size: int
    cells: int
    seconds_per_cycle: float
    time_ratio: float
    cell_ratio: float


def size_to_level(size, block_size) -> int:
    q = size // block_size
    if size % block_size or q < 1 or q & (q - 1):
        raise ConfigError(f"size {size} is not block_size {block_size} times a power of two")
    return int(math.log2(q)) + 1


def scaling_probe(cfg: CaseConfig, sizes, blocks=None, cycles=10) -> list:
    """Average per-cycle time of the uniform sphere case over grid and block
    sizes.  Ratios compare each row with the previous size at the same
    block size."""
    rows = []
    blocks = [cfg.block_size] if not blocks else list(blocks)
    for nb in blocks:
        prev = None
        for size in sizes:
            c = dataclasses.replace(cfg, case="sphere_uniform", block_size=nb,
                                    max_level=size_to_level(size, nb), cycles=cycles,
                                    target_resid=0.0)
            run = run_case(c)
            if not run.report.converged and run.report.message != "converged":
                log.warning("scaling run %d/%d: %s", size, nb, run.report.message)
            hist = run.report.history
            # skip the first cycle (compilation and the zero-guess pass)
            sec = float(np.mean([h.seconds for h in hist[1:]])) if len(hist) > 1 \
                else float(hist[0].seconds) if hist else float("nan")
            cells = run.report.mesh_stats["leaf_cells"]
            tr = sec / prev[0] if prev else float("nan")
            cr = cells / prev[1] if prev else float("nan")
            rows.append(ScalingRow(size, nb, cells, sec, tr, cr))
            prev = (sec, cells)
            del run
    return rows


def write_scaling(rows, directory) -> Path:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "scaling.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["size", "block_size", "cells", "seconds_per_cycle", "time_ratio",
                    "cell_ratio"])
        for r in rows:
            w.writerow([r.size, r.block_size, r.cells, f"{r.seconds_per_cycle:.6f}",
                        f"{r.time_ratio:.4f}", f"{r.cell_ratio:.4f}"])
    return out / "scaling.csv"
