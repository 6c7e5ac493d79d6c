"""Stage 1: density-based compliance minimization with a volume constraint.

Element densities drive the material law E = rho^p E0. Sensitivities are
smoothed with the classic mesh-independency filter (weights r_min - dist,
density-weighted average) and the update is done by MMA. The iteration
count is fixed; there is no early exit.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sparse
from scipy.spatial import cKDTree

from .errors import ConfigError, SolverFailure
from .fem import (LoadCase, assemble_stiffness, compute_compliance,
                  regular_rule_group, solid_element_energies,
                  solve_displacement)
from .grid import ElementBasis, StructuredGrid


@dataclass
class DensityField:
    values: np.ndarray
    dims: tuple
    rho_min: float = 1e-8

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.size != int(np.prod(self.dims)):
            raise ConfigError("density", "value count does not match dims")

    def clipped(self):
        return np.clip(self.values, self.rho_min, 1.0)


@dataclass
class SimpConfig:
    volume_fraction: float
    penal: float = 3.0
    filter_radius: float = 1.5
    max_iterations: int = 100
    E0: float = 1.0
    nu: float = 0.0
    rho_min: float = 1e-8
    gauss_points: int = 2
    move: float = 0.2
    solver: str = "auto"

    def validate(self):
        if not 0.0 < self.volume_fraction <= 1.0:
            raise ConfigError("volume_fraction", "must be in (0, 1]")
        if self.penal < 1.0:
            raise ConfigError("penal", "must be >= 1")
        if self.filter_radius < 0.0:
            raise ConfigError("filter_radius", "must be non-negative")
        if self.rho_min <= 0.0:
            raise ConfigError("rho_min", "must be positive")


def compliance_sensitivity_rho(densities, energies_solid, penal):
    """dC/drho_i = -p rho^(p-1) u_e^T K_e0 u_e, elementwise (<= 0)."""
    rho = np.asarray(densities, dtype=float)
    return -penal * rho ** (penal - 1.0) * np.asarray(energies_solid)


def build_filter(grid: StructuredGrid, r_min):
    """Sparse weight matrix H_ij = max(0, r_min - dist(i, j)) and row sums."""
    centers = grid.element_centers() / grid.h
    tree = cKDTree(centers)
    pairs = tree.query_ball_point(centers, r_min, return_sorted=True)
    rows, cols, vals = [], [], []
    for i, nbrs in enumerate(pairs):
        nbrs = np.asarray(nbrs, dtype=np.int64)
        d = np.linalg.norm(centers[nbrs] - centers[i], axis=1)
        keep = d < r_min
        rows.append(np.full(keep.sum(), i, dtype=np.int64))
        cols.append(nbrs[keep])
        vals.append(r_min - d[keep])
    H = sparse.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(grid.num_elements, grid.num_elements))
    return H, np.asarray(H.sum(axis=1)).ravel()


def sensitivity_filter(H, Hsum, densities, sensitivities):
    """Density-weighted smoothing: (H @ (rho*dc)) / Hsum / max(rho, 1e-3).

    The max() guard replaces the raw density in the denominator because the
    lower bound here is 1e-8, far below the classic 1e-3 floor.
    """
    rho = np.asarray(densities, dtype=float)
    dc = np.asarray(sensitivities, dtype=float)
    return (H @ (rho * dc)) / Hsum / np.maximum(rho, 1e-3)


def volume_value_and_gradient(densities, volume_fraction, element_volume=1.0):
    """Normalized constraint V/V_max - 1 and its (constant) gradient."""
    rho = np.asarray(densities, dtype=float)
    n = rho.size
    vmax = n * element_volume * volume_fraction
    value = float(rho.sum() * element_volume / vmax - 1.0)
    grad = np.full(n, element_volume / vmax)
    return value, grad


def run_stage1(config: SimpConfig, grid: StructuredGrid, loadcase: LoadCase,
               mma_state=None, callback=None):
    """Run the fixed-iteration density optimization.

    Returns (DensityField, history) where history rows are
    (iteration, compliance, V/V_max) for the pre-update iterate of each
    iteration; row 1 is the uniform initial design, which later serves as
    the normalization reference for the convergence log.
    """
    from .mma import MmaState, mma_update

    config.validate()
    basis = ElementBasis(grid.order, grid.ndim)
    group = regular_rule_group(grid, config.gauss_points)
    f = loadcase.load_vector(grid)
    fixed = loadcase.fixed_dofs(grid)
    H, Hsum = build_filter(grid, config.filter_radius)

    n = grid.num_elements
    rho = np.full(n, config.volume_fraction)
    state = mma_state or MmaState(move=config.move)
    history = []
    elem_vol = grid.h**grid.ndim
    npts = group.ref_points.shape[0]

    for it in range(1, config.max_iterations + 1):
        dens_pts = np.repeat(rho[:, None], npts, axis=1)
        try:
            system = assemble_stiffness(grid, basis, [group], [dens_pts],
                                        config.E0, config.nu, config.penal,
                                        fixed, f)
            u = solve_displacement(system, method=config.solver)
        except SolverFailure as exc:
            raise SolverFailure(f"stage 1 iteration {it}: {exc}") from exc
        C = compute_compliance(system)
        energies = solid_element_energies(grid, basis, group, u, config.E0, config.nu)
        gval, ggrad = volume_value_and_gradient(rho, config.volume_fraction, elem_vol)
        history.append((it, C, gval + 1.0))
        if callback is not None:
            callback(it, rho, C, gval + 1.0)

        dc = compliance_sensitivity_rho(rho, energies, config.penal)
        dc = sensitivity_filter(H, Hsum, rho, dc)
        rho, state = mma_update(state, rho, C, dc, gval, ggrad,
                                config.rho_min, 1.0)

    field = DensityField(values=rho, dims=grid.dims, rho_min=config.rho_min)
    return field, history
