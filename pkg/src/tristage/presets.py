"""Benchmark case definitions: grids, loads, supports, material constants.

Four cases ship with the toolkit: the half MBB beam and a cantilever, each
in 2D and 3D. Loads and supports are placed geometrically so the same case
realizes consistently on grids of any basis order. The 3D cases default to
desk-scale grids; full-scale grids are opt-in (long runtimes).
"""

from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError
from .fem import LoadCase
from .grid import StructuredGrid


@dataclass(frozen=True)
class CaseDefinition:
    name: str
    dims: tuple
    dims_paper: tuple
    volume_fraction: float
    volume_fraction_paper: float
    w_max: float
    E0: float = 1.0
    nu: float = 0.0
    rho0: float = 1e-8
    penal: float = 3.0


PRESETS = {
    "mbb2d": CaseDefinition("mbb2d", (64, 32), (64, 32), 0.40, 0.40, 0.5),
    "canti2d": CaseDefinition("canti2d", (180, 120), (180, 120), 0.35, 0.35, 0.5),
    # desk-scale grids; full grids via paper_scale
    "mbb3d": CaseDefinition("mbb3d", (32, 6, 16), (64, 10, 32), 0.10, 0.10, 0.3),
    # at 16^3 the full-scale 5% volume leaves too little material to resolve
    # the four-point-supported topology, hence 10% at desk scale
    "canti3d": CaseDefinition("canti3d", (16, 16, 16), (30, 30, 30), 0.10, 0.05, 0.3),
}


def get_preset(name, paper_scale=False):
    if name not in PRESETS:
        raise ConfigError("preset", f"unknown preset '{name}'; "
                          f"choose from {sorted(PRESETS)}")
    case = PRESETS[name]
    if paper_scale:
        case = replace(case, dims=case.dims_paper,
                       volume_fraction=case.volume_fraction_paper)
    return case


def _nodes_on(grid: StructuredGrid, **planes):
    """Node ids lying on the intersection of coordinate planes (x=..., y=...)."""
    coords = grid.node_coords()
    mask = np.ones(grid.num_nodes, dtype=bool)
    axis_of = {"x": 0, "y": 1, "z": 2}
    for axis, value in planes.items():
        mask &= np.isclose(coords[:, axis_of[axis]], value, atol=1e-9)
    ids = np.flatnonzero(mask)
    if ids.size == 0:
        raise ConfigError("loadcase", f"no nodes found on {planes}")
    return ids


def _node_at(grid, point):
    """The node nearest to the given point (unique by lowest id)."""
    coords = grid.node_coords()
    d2 = ((coords - np.asarray(point, dtype=float)) ** 2).sum(axis=1)
    return int(np.argmin(d2))


def make_loadcase(name, grid: StructuredGrid):
    """Realize the case's loads/supports on a concrete grid."""
    L = grid.domain_size[0]
    if name == "mbb2d":
        # symmetry half-model: vertical load on the top-left corner, left
        # edge on rollers, bottom-right corner held vertically
        H = grid.domain_size[1]
        forces = [(_node_at(grid, (0.0, H)), 1, -1.0)]
        fixed = [(n, 0) for n in _nodes_on(grid, x=0.0)]
        fixed.append((_node_at(grid, (L, 0.0)), 1))
        return LoadCase(forces=forces, fixed=fixed)
    if name == "canti2d":
        H = grid.domain_size[1]
        forces = [(_node_at(grid, (L, H / 2)), 1, -1.0)]
        fixed = [(n, c) for n in _nodes_on(grid, x=0.0) for c in (0, 1)]
        return LoadCase(forces=forces, fixed=fixed)
    if name == "mbb3d":
        W, H = grid.domain_size[1], grid.domain_size[2]
        forces = [(_node_at(grid, (0.0, W / 2, H)), 2, -1.0)]
        fixed = [(n, 0) for n in _nodes_on(grid, x=0.0)]
        fixed += [(n, c) for n in _nodes_on(grid, x=L, z=0.0) for c in (1, 2)]
        return LoadCase(forces=forces, fixed=fixed)
    if name == "canti3d":
        W, H = grid.domain_size[1], grid.domain_size[2]
        y1, y2 = round(W / 4), W - round(W / 4)
        z_mid = round(H / 2)
        n1 = _node_at(grid, (L, y1, z_mid))
        n2 = _node_at(grid, (L, y2, z_mid))
        forces = [(n1, 1, 0.5), (n1, 2, -1.0), (n2, 1, -0.5), (n2, 2, -1.0)]
        corners = [(0.0, 0.0, 0.0), (0.0, W, 0.0), (0.0, 0.0, H), (0.0, W, H)]
        fixed = [(_node_at(grid, pt), c) for pt in corners for c in (0, 1, 2)]
        return LoadCase(forces=forces, fixed=fixed)
    raise ConfigError("preset", f"unknown preset '{name}'")
