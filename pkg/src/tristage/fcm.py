"""Embedded-boundary integration fabric for the implicit geometry.

Elements are classified by sampling the level set at corners, center and
edge/face midpoints. Elements with a sign change ("cut") plus their
Chebyshev-1 neighbors form a refined band tiled with dyadic integration
cells; all-negative elements outside the band are discarded entirely and
contribute nothing to analysis. The band gives the boundary room to move
between rebuilds.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateDesignError
from .fem import IntegrationGroup
from .grid import StructuredGrid, gauss_rule


@dataclass
class ElementClassification:
    cut: np.ndarray  # boolean masks over elements
    band: np.ndarray  # Chebyshev-1 halo of cut, excluding cut itself
    interior: np.ndarray  # active and unrefined
    far_void: np.ndarray  # discarded

    @property
    def active(self):
        return self.cut | self.band | self.interior

    @property
    def refined(self):
        return self.cut | self.band


def _sample_offsets(ndim):
    """Reference coordinates of corners + center + edge/face midpoints."""
    if ndim == 2:
        ticks = np.array([-1.0, 0.0, 1.0])
        mesh = np.meshgrid(ticks, ticks, indexing="ij")
        return np.column_stack([m.ravel(order="F") for m in mesh])
    if ndim == 3:
        corners = np.array([[sx, sy, sz] for sz in (-1, 1) for sy in (-1, 1)
                            for sx in (-1, 1)], dtype=float)
        center = np.zeros((1, 3))
        faces = np.vstack([np.eye(3), -np.eye(3)])
        return np.vstack([corners, center, faces])
    ticks = np.array([[-1.0], [0.0], [1.0]])
    return ticks


def classify_elements(phi, grid: StructuredGrid):
    """Classify elements from level-set samples.

    phi: callable mapping (m, D) points to values.
    """
    offsets = _sample_offsets(grid.ndim)
    centers = grid.element_centers()
    pts = (centers[:, None, :] + offsets[None, :, :] * (grid.h / 2.0))
    vals = np.asarray(phi(pts.reshape(-1, grid.ndim)), dtype=float)
    vals = vals.reshape(grid.num_elements, -1)
    vmin, vmax = vals.min(axis=1), vals.max(axis=1)

    cut = (vmin <= 0.0) & (vmax > 0.0)
    all_neg = vmax < 0.0
    band = _chebyshev_halo(cut, grid.dims) & ~cut
    far_void = all_neg & ~band
    interior = ~cut & ~band & ~far_void
    return ElementClassification(cut=cut, band=band, interior=interior,
                                 far_void=far_void)


def _chebyshev_halo(mask, dims):
    """Elements within Chebyshev distance 1 of the mask (including it)."""
    field = mask.reshape(dims, order="F")
    out = np.zeros_like(field)
    D = field.ndim
    for shift in np.ndindex(*([3] * D)):
        sl_src, sl_dst = [], []
        ok = True
        for a, s in enumerate(shift):
            d = s - 1
            if d == 0:
                sl_src.append(slice(None))
                sl_dst.append(slice(None))
            elif d == 1:
                sl_src.append(slice(None, -1))
                sl_dst.append(slice(1, None))
            else:
                sl_src.append(slice(1, None))
                sl_dst.append(slice(None, -1))
        out[tuple(sl_dst)] |= field[tuple(sl_src)]
    return out.ravel(order="F")


def _dyadic_rule(qt_levels, gauss_points, ndim):
    """Reference points/weights of a full dyadic tiling at the given level.

    2^(qt*D) cells, each carrying a g^D Gauss rule scaled to its box; the
    reference weights sum to 2^D exactly.
    """
    base = gauss_rule(gauss_points, ndim)
    ncell = 2**qt_levels
    hw = 1.0 / ncell  # cell half-width in reference units
    axes = [(-1.0 + (2 * np.arange(ncell) + 1) * hw) for _ in range(ndim)]
    mesh = np.meshgrid(*axes, indexing="ij")
    centers = np.column_stack([m.ravel(order="F") for m in mesh])
    pts = (centers[:, None, :] + base.points[None, :, :] * hw).reshape(-1, ndim)
    wts = np.tile(base.weights * hw**ndim, centers.shape[0])
    boxes = np.column_stack([centers, np.full(centers.shape[0], hw)])
    return pts, wts, boxes


@dataclass
class FcmDomain:
    classification: ElementClassification
    groups: list  # IntegrationGroups: [refined cut/band, unrefined interior]
    qt_levels: int
    gauss_points: int
    cell_boxes: np.ndarray  # (ncells_per_refined_element, D+1): center + half-width

    @property
    def active_elements(self):
        return np.flatnonzero(self.classification.active)

    @property
    def discarded_elements(self):
        return np.flatnonzero(self.classification.far_void)

    def points_and_weights(self, grid):
        """All physical integration points, weights, and owner elements."""
        pts, wts, owners = [], [], []
        for g in self.groups:
            if len(g.element_ids) == 0:
                continue
            pts.append(g.physical_points(grid))
            m = g.ref_points.shape[0]
            wts.append(np.tile(g.physical_weights(grid.h, grid.ndim),
                               len(g.element_ids)))
            owners.append(np.repeat(g.element_ids, m))
        return (np.vstack(pts), np.concatenate(wts), np.concatenate(owners))


def build_cells(grid: StructuredGrid, classification: ElementClassification,
                qt_levels, gauss_points):
    """Integration cells: dyadic tiling on cut/band elements, one cell else."""
    refined_ids = np.flatnonzero(classification.refined)
    plain_ids = np.flatnonzero(classification.interior)
    if refined_ids.size + plain_ids.size == 0:
        raise DegenerateDesignError("no active elements; geometry vanished")

    ref_pts, ref_wts, boxes = _dyadic_rule(qt_levels, gauss_points, grid.ndim)
    base = gauss_rule(gauss_points, grid.ndim)
    groups = [
        IntegrationGroup(refined_ids, ref_pts, ref_wts),
        IntegrationGroup(plain_ids, base.points, base.weights),
    ]
    return FcmDomain(classification=classification, groups=groups,
                     qt_levels=qt_levels, gauss_points=gauss_points,
                     cell_boxes=boxes)


def rebuild_band(domain: FcmDomain, phi, grid: StructuredGrid):
    """Reclassify against the current level set and rebuild all cells."""
    classification = classify_elements(phi, grid)
    return build_cells(grid, classification, domain.qt_levels,
                       domain.gauss_points)


def band_escape(domain: FcmDomain, phi_values_by_group):
    """True if a sign change shows up inside any unrefined active element.

    phi_values_by_group: level-set values at the domain's integration
    points, one (ne, m) block per group (same order as domain.groups).
    """
    vals = phi_values_by_group[1]
    if vals.size == 0:
        return False
    return bool(np.any((vals.min(axis=1) <= 0.0) & (vals.max(axis=1) > 0.0)))


def removed_dofs(grid: StructuredGrid, classification: ElementClassification):
    """DOFs touched only by discarded elements; removed from the system."""
    active_nodes = np.zeros(grid.num_nodes, dtype=bool)
    conn = grid.connectivity()
    active_nodes[conn[classification.active].ravel()] = True
    dead = np.flatnonzero(~active_nodes)
    D = grid.ndim
    return (dead[:, None] * D + np.arange(D)[None, :]).ravel()


def dump_cells_csv(domain: FcmDomain, grid: StructuredGrid, path):
    """Cell structure dump (element id, cell box, point count) for plotting."""
    origins = grid.element_origins()
    g = domain.gauss_points
    with open(path, "w") as fh:
        cols = ["element", "center_x", "center_y", "center_z", "half_width",
                "points"]
        fh.write(",".join(cols[:1 + grid.ndim] + cols[4:]) + "\n")
        npts_cell = g**grid.ndim
        for eid in domain.groups[0].element_ids:
            for box in domain.cell_boxes:
                center = origins[eid] + (box[:-1] + 1.0) * (grid.h / 2.0)
                hw = box[-1] * grid.h / 2.0
                vals = [str(eid)] + [f"{c!r}" for c in center] + [f"{hw!r}",
                                                                  str(npts_cell)]
                fh.write(",".join(vals) + "\n")
        for eid in domain.groups[1].element_ids:
            center = origins[eid] + grid.h / 2.0
            vals = [str(eid)] + [f"{c!r}" for c in center] + [f"{grid.h / 2.0!r}",
                                                              str(npts_cell)]
            fh.write(",".join(vals) + "\n")
