"""End-to-end orchestration: stages, artifact writing, studies.

The pipeline runs density optimization, geometry extraction and shape
optimization back to back, records a combined convergence history
normalized by the initial design's compliance, and writes a deterministic
artifact set with a hash-chained manifest. Stages can be run standalone
against artifacts of a previous run.
"""

import hashlib
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import fcm, outputs
from .errors import ConfigError, TristageError
from .extract import marching_cubes, marching_squares
from .fem import assemble_stiffness, compute_compliance, regular_rule_group, \
    solve_displacement
from .grid import ElementBasis, build_grid
from .levelset import (RbfLevelSet, find_threshold, fit_weights, heaviside,
                       load_levelset, save_levelset, save_levelset_csv,
                       slope_constants, solve_kappa)
from .presets import get_preset, make_loadcase
from .shape_opt import ShapeOptConfig, analyze, run_stage3
from .simp import DensityField, SimpConfig, run_stage1


@dataclass
class RunConfig:
    preset: str = "mbb2d"
    paper_scale: bool = False
    dims: tuple | None = None
    volume_fraction: float | None = None
    E0: float | None = None
    nu: float | None = None
    rho0: float | None = None
    penal: float | None = None
    w_max: float | None = None
    filter_radius: float = 1.5
    stage1_iterations: int = 100
    stage1_gauss: int = 2
    order: int = 2
    qt_levels: int = 1
    stage3_gauss: int = 3
    iterations_per_phase: int = 10
    phases: int = 2
    dmin: float = 0.5
    kappa: float | None = None
    move_stage1: float = 0.2
    move_stage3: float = 0.1
    solver: str = "auto"
    seed: int = 0  # reserved for future stochastic features; unused
    plots: bool = True
    contour_samples: int = 2
    surface_margin: float = 2.0
    study_qt: int = 2

    def resolved(self):
        case = get_preset(self.preset, self.paper_scale)
        cfg = replace(
            self,
            dims=tuple(self.dims) if self.dims else case.dims,
            volume_fraction=self.volume_fraction
            if self.volume_fraction is not None else case.volume_fraction,
            E0=self.E0 if self.E0 is not None else case.E0,
            nu=self.nu if self.nu is not None else case.nu,
            rho0=self.rho0 if self.rho0 is not None else case.rho0,
            penal=self.penal if self.penal is not None else case.penal,
            w_max=self.w_max if self.w_max is not None else case.w_max,
        )
        cfg.validate()
        return cfg

    def validate(self):
        checks = [
            ("volume_fraction", 0.0 < self.volume_fraction < 1.0
             or self.volume_fraction == 1.0),
            ("stage1_iterations", self.stage1_iterations >= 1),
            ("stage1_gauss", self.stage1_gauss >= 1),
            ("order", 1 <= self.order <= 4),
            ("qt_levels", self.qt_levels >= 0),
            ("stage3_gauss", self.stage3_gauss >= 1),
            ("iterations_per_phase", self.iterations_per_phase >= 0),
            ("phases", self.phases >= 1),
            ("dmin", self.dmin > 0.0),
            ("w_max", self.w_max > 0.0),
            ("rho0", 0.0 < self.rho0 < 1.0),
            ("penal", self.penal >= 1.0),
            ("filter_radius", self.filter_radius >= 0.0),
            ("contour_samples", self.contour_samples >= 1),
            ("surface_margin", self.surface_margin >= 0.0),
            ("solver", self.solver in ("auto", "direct", "cg")),
        ]
        for name, ok in checks:
            if not ok:
                raise ConfigError(name, f"invalid value {getattr(self, name)!r}")
        if len(self.dims) not in (2, 3) or any(d < 2 for d in self.dims):
            raise ConfigError("dims", f"need 2 or 3 axes of >= 2 elements, got {self.dims}")

    def simp_config(self):
        return SimpConfig(volume_fraction=self.volume_fraction, penal=self.penal,
                          filter_radius=self.filter_radius,
                          max_iterations=self.stage1_iterations, E0=self.E0,
                          nu=self.nu, rho_min=self.rho0,
                          gauss_points=self.stage1_gauss, move=self.move_stage1,
                          solver=self.solver)

    def shape_config(self):
        return ShapeOptConfig(volume_fraction=self.volume_fraction,
                              w_max=self.w_max, order=self.order,
                              qt_levels=self.qt_levels,
                              gauss_points=self.stage3_gauss,
                              iterations_per_phase=self.iterations_per_phase,
                              phases=self.phases, kappa=self.kappa,
                              dmin=self.dmin, penal=self.penal, E0=self.E0,
                              nu=self.nu, rho0=self.rho0,
                              move=self.move_stage3, solver=self.solver)


@dataclass
class RunResult:
    config: RunConfig
    out_dir: object
    history: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    density: DensityField | None = None
    levelset_stage2: RbfLevelSet | None = None
    levelset_stage3: RbfLevelSet | None = None
    timings: dict = field(default_factory=dict)


def _sha256(path):
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def run_stage2(field_values, cfg: RunConfig):
    """Fit weights, pick kappa from the slope bounds, shift to the volume."""
    D = len(cfg.dims)
    bounds = slope_constants(D, cfg.w_max, cfg.order, cfg.qt_levels, cfg.dmin)
    kappa = cfg.kappa if cfg.kappa is not None else solve_kappa(bounds, cfg.rho0)
    weights = fit_weights(field_values, cfg.dims)
    lsf0 = RbfLevelSet(cfg.dims, weights, theta=0.0, kappa=kappa,
                       w_max=cfg.w_max)

    grid1 = build_grid(cfg.dims, order=1)
    group = regular_rule_group(grid1, cfg.stage1_gauss)
    pts = group.physical_points(grid1)
    wts = np.tile(group.physical_weights(grid1.h, grid1.ndim),
                  grid1.num_elements)
    phi0 = lsf0.eval(pts)
    theta = find_threshold(phi0, wts, cfg.volume_fraction, kappa)
    lsf = lsf0.copy_with(theta=theta)
    vol_quad = float(wts @ heaviside(phi0 - theta, kappa) / wts.sum())
    return lsf, vol_quad


def evaluate_levelset_design(lsf, loadcase_name, cfg: RunConfig, order=None,
                             qt_levels=None, gauss_points=None):
    """FCM compliance/volume of a fixed level-set design."""
    shape_cfg = cfg.shape_config()
    if order is not None:
        shape_cfg.order = order
    if qt_levels is not None:
        shape_cfg.qt_levels = qt_levels
    if gauss_points is not None:
        shape_cfg.gauss_points = gauss_points
    shape_cfg.kappa = lsf.kappa
    grid = build_grid(cfg.dims, order=shape_cfg.order)
    loadcase = make_loadcase(loadcase_name, grid)
    basis = ElementBasis(shape_cfg.order, grid.ndim)
    domain = fcm.build_cells(grid, fcm.classify_elements(lsf.eval, grid),
                             shape_cfg.qt_levels, shape_cfg.gauss_points)
    res = analyze(lsf, domain, grid, basis, loadcase, shape_cfg,
                  check_band=False)
    v_max = cfg.volume_fraction * grid.domain_volume
    return res.compliance, res.volume / v_max, res


def evaluate_density_design(values, loadcase_name, cfg: RunConfig, order,
                            gauss_points):
    """Compliance of a fixed element-density design under a richer basis.

    Densities are element-constant, so any integration cell layout gives the
    same stiffness once the rule is exact for the basis; a plain g^D rule is
    used.
    """
    grid = build_grid(cfg.dims, order=order)
    loadcase = make_loadcase(loadcase_name, grid)
    basis = ElementBasis(order, grid.ndim)
    group = regular_rule_group(grid, gauss_points)
    dens = np.repeat(np.clip(values, cfg.rho0, 1.0)[:, None],
                     group.ref_points.shape[0], axis=1)
    system = assemble_stiffness(grid, basis, [group], [dens], cfg.E0, cfg.nu,
                                cfg.penal, loadcase.fixed_dofs(grid),
                                loadcase.load_vector(grid))
    solve_displacement(system, method=cfg.solver)
    return compute_compliance(system)


def export_geometry(lsf, cfg: RunConfig, out_dir, stem="geometry"):
    """Zero-contour artifacts: SVG polylines in 2D, a binary STL in 3D."""
    paths = {}
    D = len(cfg.dims)
    n_per = cfg.contour_samples
    if D == 2:
        axes = [np.linspace(0.0, d, n_per * d + 1) for d in cfg.dims]
        contours = marching_squares(lsf.eval, axes)
        path = out_dir / f"{stem}.svg"
        outputs.write_svg(contours, cfg.dims, path)
        paths["svg"] = path
    else:
        margin = cfg.surface_margin
        axes = [np.linspace(-margin, d + margin,
                            int(n_per * (d + 2 * margin)) + 1)
                for d in cfg.dims]
        mesh = marching_cubes(lsf.eval, axes)
        path = out_dir / f"{stem}.stl"
        outputs.write_stl(mesh, path)
        paths["stl"] = path
    return paths


def run_pipeline(config: RunConfig, out_dir, stages=(1, 2, 3)):
    """Execute the requested stages, writing artifacts into out_dir."""
    import pathlib

    cfg = config.resolved()
    out_dir = pathlib.Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stages = set(stages)
    result = RunResult(config=cfg, out_dir=out_dir)
    manifest = {"config": _config_dict(cfg), "artifacts": {}, "chain": {},
                "summary": {}}
    history = []

    dens_bin = out_dir / "stage1_density.bin"
    lsf2_bin = out_dir / "stage2_levelset.bin"
    lsf3_bin = out_dir / "stage3_levelset.bin"

    # ---- stage 1 -----------------------------------------------------------
    if 1 in stages:
        t0 = time.perf_counter()
        grid1 = build_grid(cfg.dims, order=1)
        lc1 = make_loadcase(cfg.preset, grid1)
        fld, hist1 = run_stage1(cfg.simp_config(), grid1, lc1)
        result.timings["stage1"] = time.perf_counter() - t0
        result.density = fld
        c_ref = hist1[0][1]
        history += [(1, it, c, c / c_ref, v) for it, c, v in hist1]
        outputs.save_density(fld.values, cfg.dims, dens_bin)
        outputs.save_density_csv(fld.values, cfg.dims,
                                 out_dir / "stage1_density.csv")
        manifest["summary"]["stage1"] = {
            "C_ref": c_ref,
            "C_last_logged": hist1[-1][1],
            "volume_fraction": float(np.mean(fld.values)),
        }
    elif stages & {2, 3}:
        values, dims, _ = outputs.load_density(dens_bin)
        if tuple(dims) != tuple(cfg.dims):
            raise ConfigError("dims", f"stored density grid {dims} does not "
                              f"match configured {cfg.dims}")
        result.density = DensityField(values=values, dims=tuple(dims),
                                      rho_min=cfg.rho0)

    c_ref = manifest["summary"].get("stage1", {}).get("C_ref")

    # ---- stage 2 -----------------------------------------------------------
    if 2 in stages:
        t0 = time.perf_counter()
        lsf2, vol_quad = run_stage2(result.density.values, cfg)
        result.timings["stage2"] = time.perf_counter() - t0
        result.levelset_stage2 = lsf2
        save_levelset(lsf2, lsf2_bin)
        save_levelset_csv(lsf2, out_dir / "stage2_levelset.csv")
        manifest["chain"]["stage2_input_sha256"] = _sha256(dens_bin)
        manifest["summary"]["stage2"] = {
            "theta": lsf2.theta, "kappa": lsf2.kappa,
            "volume_fraction_quadrature": vol_quad,
        }
    elif 3 in stages:
        result.levelset_stage2 = load_levelset(lsf2_bin)

    # ---- stage 3 -----------------------------------------------------------
    if 3 in stages:
        t0 = time.perf_counter()
        grid3 = build_grid(cfg.dims, order=cfg.order)
        lc3 = make_loadcase(cfg.preset, grid3)
        lsf3, hist3, initial = run_stage3(result.levelset_stage2,
                                          cfg.shape_config(), grid3, lc3)
        result.timings["stage3"] = time.perf_counter() - t0
        result.levelset_stage3 = lsf3
        v_max = cfg.volume_fraction * grid3.domain_volume
        if c_ref is None:
            c_ref = initial.compliance
        history.append((2, 1, initial.compliance, initial.compliance / c_ref,
                        initial.volume / v_max))
        history += [(3, it, c, c / c_ref, v) for it, c, v in hist3]
        save_levelset(lsf3, lsf3_bin)
        save_levelset_csv(lsf3, out_dir / "stage3_levelset.csv")
        manifest["chain"]["stage3_input_sha256"] = _sha256(lsf2_bin)
        stage2_summary = manifest["summary"].setdefault("stage2", {})
        stage2_summary["C_fcm"] = initial.compliance
        stage2_summary["volume_fraction_fcm"] = initial.volume / v_max
        manifest["summary"]["stage3"] = {
            "C_final": hist3[-1][1] if hist3 else initial.compliance,
            "V_over_Vmax_final": hist3[-1][2] if hist3 else
            initial.volume / v_max,
        }
        result.summary["stage3_final_C"] = manifest["summary"]["stage3"]["C_final"]

        geom = export_geometry(lsf3, cfg, out_dir)
        for kind, path in geom.items():
            manifest["artifacts"][path.name] = _sha256(path)

    # ---- shared artifacts ---------------------------------------------------
    result.history = history
    if history:
        outputs.write_history_csv(history, out_dir / "history.csv")
        if cfg.plots:
            outputs.plot_history(history, out_dir / "convergence.png")
    if result.density is not None and cfg.plots and len(cfg.dims) == 2:
        outputs.plot_density(result.density.values, cfg.dims,
                             out_dir / "stage1_density.png")
    for name in ("stage1_density.bin", "stage2_levelset.bin",
                 "stage3_levelset.bin", "history.csv"):
        p = out_dir / name
        if p.exists():
            manifest["artifacts"][name] = _sha256(p)
    outputs.write_manifest(manifest, out_dir / "manifest.json")
    result.summary.update(manifest["summary"])
    return result


def run_study(config: RunConfig, which, out_dir, from_dir=None):
    """Accuracy studies over basis order or refinement depth.

    p-order: evaluates the stage-1 and stage-3 designs for P in 1..4 with
    8x8(x8)-point cells. quadtree: evaluates the stage-3 design at P=2,
    g=3 for qt in 1..4. Emits a normalized compliance CSV.
    """
    import pathlib

    cfg = config.resolved()
    out_dir = pathlib.Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    src = pathlib.Path(from_dir) if from_dir else out_dir
    dens_bin = src / "stage1_density.bin"
    lsf3_bin = src / "stage3_levelset.bin"
    if not (dens_bin.exists() and lsf3_bin.exists()):
        run_pipeline(config, src)
    values, dims, _ = outputs.load_density(dens_bin)
    lsf3 = load_levelset(lsf3_bin)

    rows = []
    if which == "p-order":
        for order in (1, 2, 3, 4):
            c1 = evaluate_density_design(values, cfg.preset, cfg, order, 8)
            c3, _, _ = evaluate_levelset_design(lsf3, cfg.preset, cfg,
                                                order=order,
                                                qt_levels=cfg.study_qt,
                                                gauss_points=8)
            rows.append(("stage1", order, c1))
            rows.append(("stage3", order, c3))
    elif which == "quadtree":
        for qt in (1, 2, 3, 4):
            c3, _, _ = evaluate_levelset_design(lsf3, cfg.preset, cfg, order=2,
                                                qt_levels=qt, gauss_points=3)
            rows.append(("stage3", qt, c3))
    else:
        raise ConfigError("study", f"unknown study '{which}'")

    ref = rows[0][2]
    path = out_dir / f"study_{which.replace('-', '_')}.csv"
    with open(path, "w") as fh:
        param = "P" if which == "p-order" else "qt"
        fh.write(f"design,{param},C,C_normalized\n")
        for design, val, c in rows:
            fh.write(f"{design},{val},{c:.12g},{c / ref:.12g}\n")
    return rows, path


def _config_dict(cfg):
    d = asdict(cfg)
    d["dims"] = list(cfg.dims)
    return d
