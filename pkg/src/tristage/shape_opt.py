"""Stage 3: shape optimization of the implicit geometry over RBF weights.

Analyses run on the embedded-boundary integration fabric: the level set is
projected to densities at every integration point and the stiffness is
assembled with the same power-law interpolation as the density stage. The
compliance/volume gradients with respect to the weights chain through the
projected density derivative and the sparse point-to-weight basis operator,
whose pattern is fixed until the band is rebuilt.
"""

import logging
from dataclasses import dataclass

import numpy as np

from .errors import BandEscapeError, ConfigError, SolverFailure
from .fcm import (FcmDomain, band_escape, build_cells, classify_elements,
                  rebuild_band, removed_dofs)
from .fem import (LoadCase, assemble_stiffness, compute_compliance,
                  point_strain_energies, solve_displacement)
from .grid import ElementBasis, StructuredGrid
from .levelset import (RbfLevelSet, density_derivative_phi, density_from_lsf,
                       pattern_basis_matrix, slope_constants, solve_kappa)

log = logging.getLogger(__name__)


@dataclass
class ShapeOptConfig:
    volume_fraction: float
    w_max: float
    order: int = 2
    qt_levels: int = 1
    gauss_points: int = 3
    iterations_per_phase: int = 10
    phases: int = 2
    kappa: float | None = None  # None: computed from the slope bounds
    dmin: float = 0.5
    penal: float = 3.0
    E0: float = 1.0
    nu: float = 0.0
    rho0: float = 1e-8
    move: float = 0.1
    solver: str = "auto"

    def validate(self):
        if self.iterations_per_phase < 0 or self.phases < 1:
            raise ConfigError("iterations", "schedule must be non-negative")
        if self.w_max <= 0:
            raise ConfigError("w_max", "must be positive")
        if self.kappa is not None and self.kappa <= 0:
            raise ConfigError("kappa", "must be positive")
        if not 0.0 < self.rho0 < 1.0:
            raise ConfigError("rho0", "must be in (0, 1)")


class SensitivityMap:
    """Cached sparse point-to-weight operator for one integration fabric."""

    def __init__(self, lsf: RbfLevelSet, domain: FcmDomain, grid: StructuredGrid):
        self.domain = domain
        self.basis_by_group = []
        self.weights_by_group = []
        for g in domain.groups:
            self.basis_by_group.append(
                pattern_basis_matrix(lsf, g.element_ids, g.ref_points))
            w = np.tile(g.physical_weights(grid.h, grid.ndim), len(g.element_ids))
            self.weights_by_group.append(w)

    def phi_by_group(self, lsf):
        out = []
        for g, N in zip(self.domain.groups, self.basis_by_group):
            vals = N @ lsf.weights - lsf.theta
            out.append(vals.reshape(len(g.element_ids), g.ref_points.shape[0]))
        return out


@dataclass
class AnalysisResult:
    system: object
    compliance: float
    phi_by_group: list
    rho_by_group: list
    volume: float


def analyze(lsf: RbfLevelSet, domain: FcmDomain, grid: StructuredGrid,
            basis: ElementBasis, loadcase: LoadCase, cfg: ShapeOptConfig,
            smap: SensitivityMap | None = None, check_band=True,
            warm_start=None):
    """FCM analysis of the level-set geometry: solve and return compliance.

    Raises BandEscapeError when the zero contour shows up in an unrefined
    active element, which means the integration fabric is stale.
    """
    smap = smap or SensitivityMap(lsf, domain, grid)
    phi_groups = smap.phi_by_group(lsf)
    if check_band and band_escape(domain, phi_groups):
        raise BandEscapeError("zero contour inside an unrefined active element")

    rho_groups = [density_from_lsf(p, lsf.kappa, cfg.rho0) for p in phi_groups]
    f = loadcase.load_vector(grid)
    fixed = np.union1d(loadcase.fixed_dofs(grid),
                       removed_dofs(grid, domain.classification))
    if np.any(f[fixed] != 0.0):
        raise SolverFailure("a loaded DOF lies in the discarded region")
    system = assemble_stiffness(grid, basis, domain.groups, rho_groups,
                                cfg.E0, cfg.nu, cfg.penal, fixed, f)
    u = solve_displacement(system, method=cfg.solver, warm_start=warm_start)
    C = compute_compliance(system)
    volume = sum(float(wts @ rho.ravel())
                 for wts, rho in zip(smap.weights_by_group, rho_groups))
    return AnalysisResult(system=system, compliance=C, phi_by_group=phi_groups,
                          rho_by_group=rho_groups, volume=volume)


def sensitivities_w(lsf, domain, grid, basis, cfg, smap, analysis):
    """(dC/dw, dV/dw) through the projection chain, on the sparse pattern."""
    u = analysis.system.displacement
    dC = np.zeros(lsf.weights.size)
    dV = np.zeros(lsf.weights.size)
    for g, N, wts, phi, rho in zip(domain.groups, smap.basis_by_group,
                                   smap.weights_by_group, analysis.phi_by_group,
                                   analysis.rho_by_group):
        if len(g.element_ids) == 0:
            continue
        energies = point_strain_energies(grid, basis, g, u, cfg.E0, cfg.nu)
        dC_drho = -cfg.penal * rho ** (cfg.penal - 1.0) * energies
        drho_dphi = density_derivative_phi(phi, lsf.kappa, cfg.rho0)
        dC += N.T @ (dC_drho * drho_dphi).ravel()
        dV += N.T @ (wts * drho_dphi.ravel())
    return dC, dV


def run_stage3(lsf: RbfLevelSet, cfg: ShapeOptConfig, grid: StructuredGrid,
               loadcase: LoadCase, callback=None):
    """Phased MMA optimization with a band rebuild between phases.

    Returns (lsf_final, history, initial_analysis) where history rows are
    (iteration, compliance, V/V_max) of post-update analyses; the last row
    is the final design. initial_analysis is the FCM analysis of the input
    level set before any weight clamping (Stage-2 performance record).
    """
    from .mma import MmaState, mma_update

    cfg.validate()
    basis = ElementBasis(cfg.order, grid.ndim)
    bounds = slope_constants(grid.ndim, cfg.w_max, cfg.order, cfg.qt_levels,
                             cfg.dmin)
    kappa = cfg.kappa if cfg.kappa is not None else solve_kappa(bounds, cfg.rho0)
    lsf = lsf.copy_with(kappa=kappa)
    lsf.w_max = cfg.w_max
    v_max = cfg.volume_fraction * grid.domain_volume

    domain = build_cells(grid, classify_elements(lsf.eval, grid),
                         cfg.qt_levels, cfg.gauss_points)
    smap = SensitivityMap(lsf, domain, grid)
    initial = analyze(lsf, domain, grid, basis, loadcase, cfg, smap,
                      check_band=False)

    # |w| <= w_max holds from here on; the fit can exceed it near corners
    lsf.weights = np.clip(lsf.weights, -cfg.w_max, cfg.w_max)
    state = MmaState(move=cfg.move)
    history = []
    it = 0
    domain, smap, current = _analyze_rebuilding(
        lsf, domain, smap, grid, basis, loadcase, cfg,
        initial.system.displacement)
    for phase in range(cfg.phases):
        if phase > 0:
            domain = rebuild_band(domain, lsf.eval, grid)
            smap = SensitivityMap(lsf, domain, grid)
            domain, smap, current = _analyze_rebuilding(
                lsf, domain, smap, grid, basis, loadcase, cfg,
                current.system.displacement)
        for _ in range(cfg.iterations_per_phase):
            dC, dV = sensitivities_w(lsf, domain, grid, basis, cfg, smap,
                                     current)
            gval = current.volume / v_max - 1.0
            w_new, state = mma_update(state, lsf.weights, current.compliance,
                                      dC, gval, dV / v_max,
                                      -cfg.w_max, cfg.w_max)
            lsf.weights = w_new
            it += 1
            domain, smap, current = _analyze_rebuilding(
                lsf, domain, smap, grid, basis, loadcase, cfg,
                current.system.displacement)
            history.append((it, current.compliance, current.volume / v_max))
            if callback is not None:
                callback(it, lsf, current)
    return lsf, history, initial


def _analyze_rebuilding(lsf, domain, smap, grid, basis, loadcase, cfg, warm):
    """Analyze, rebuilding the band once if the boundary escaped it."""
    try:
        res = analyze(lsf, domain, grid, basis, loadcase, cfg, smap,
                      warm_start=warm)
    except BandEscapeError:
        log.warning("boundary escaped the integration band; rebuilding early")
        domain = rebuild_band(domain, lsf.eval, grid)
        smap = SensitivityMap(lsf, domain, grid)
        res = analyze(lsf, domain, grid, basis, loadcase, cfg, smap,
                      warm_start=warm)
    return domain, smap, res
