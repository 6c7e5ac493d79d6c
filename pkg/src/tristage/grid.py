"""Structured grid, tensor-product Lagrange bases, and Gauss quadrature.

Everything lives on an axis-aligned grid of unit-edge elements. Nodes are
numbered lexicographically with the x index running fastest, so element
connectivity arrays are strictly increasing. Degrees of freedom interleave
components per node: dof = node * D + component.
"""

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import ConfigError

MAX_ORDER = 4


@dataclass(frozen=True)
class StructuredGrid:
    dims: tuple
    order: int
    h: float = 1.0

    @property
    def ndim(self):
        return len(self.dims)

    @property
    def num_elements(self):
        return int(np.prod(self.dims))

    @property
    def nodes_per_axis(self):
        return tuple(self.order * d + 1 for d in self.dims)

    @property
    def num_nodes(self):
        return int(np.prod(self.nodes_per_axis))

    @property
    def num_dofs(self):
        return self.num_nodes * self.ndim

    @property
    def domain_size(self):
        return tuple(d * self.h for d in self.dims)

    @property
    def domain_volume(self):
        return float(np.prod(self.domain_size))

    def node_coords(self):
        """Coordinates of all nodes, shape (num_nodes, D), x index fastest."""
        axes = [np.arange(n) * (self.h / self.order) for n in self.nodes_per_axis]
        mesh = np.meshgrid(*axes, indexing="ij")
        # x fastest: flatten in Fortran order over the (x, y, z) index grid
        return np.column_stack([m.ravel(order="F") for m in mesh])

    def element_index_grid(self):
        """Per-axis element indices for all elements, shape (nel, D)."""
        axes = [np.arange(d) for d in self.dims]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.column_stack([m.ravel(order="F") for m in mesh])

    def element_centers(self):
        return (self.element_index_grid() + 0.5) * self.h

    def element_origins(self):
        """Low corner of each element, shape (nel, D)."""
        return self.element_index_grid() * self.h

    def connectivity(self):
        """Element-to-node map, shape (nel, (P+1)^D), strictly increasing rows."""
        return _connectivity(self.dims, self.order)

    def element_dofs(self):
        """Element-to-dof map, shape (nel, (P+1)^D * D)."""
        conn = self.connectivity()
        D = self.ndim
        dofs = conn[:, :, None] * D + np.arange(D)[None, None, :]
        return dofs.reshape(conn.shape[0], -1)

    def element_containing(self, points):
        """Element index owning each point (clipped to the domain)."""
        pts = np.atleast_2d(points)
        idx = np.clip((pts / self.h).astype(int), 0, np.asarray(self.dims) - 1)
        return self.ravel_elements(idx)

    def ravel_elements(self, axis_indices):
        """Flat element index from per-axis indices (x fastest)."""
        idx = np.atleast_2d(axis_indices)
        flat = np.zeros(idx.shape[0], dtype=np.int64)
        stride = 1
        for a, d in enumerate(self.dims):
            flat += idx[:, a] * stride
            stride *= d
        return flat


@lru_cache(maxsize=None)
def _connectivity(dims, order):
    D = len(dims)
    npa = tuple(order * d + 1 for d in dims)
    # local node offsets in lexicographic order, x fastest
    local_axes = [np.arange(order + 1)] * D
    loc = np.meshgrid(*local_axes, indexing="ij")
    loc = np.column_stack([m.ravel(order="F") for m in loc])  # ((P+1)^D, D)

    elem_axes = [np.arange(d) * order for d in dims]
    emesh = np.meshgrid(*elem_axes, indexing="ij")
    ecorner = np.column_stack([m.ravel(order="F") for m in emesh])  # (nel, D)

    node_idx = ecorner[:, None, :] + loc[None, :, :]  # (nel, nloc, D)
    flat = np.zeros(node_idx.shape[:2], dtype=np.int64)
    stride = 1
    for a in range(D):
        flat += node_idx[:, :, a] * stride
        stride *= npa[a]
    flat.setflags(write=False)
    return flat


def build_grid(dims, order=1, h=1.0):
    dims = tuple(int(d) for d in np.atleast_1d(dims))
    if len(dims) not in (1, 2, 3):
        raise ConfigError("dims", f"need 1-3 axes, got {len(dims)}")
    if any(d < 1 for d in dims):
        raise ConfigError("dims", f"element counts must be positive, got {dims}")
    if not 1 <= int(order) <= MAX_ORDER:
        raise ConfigError("order", f"basis order must be in 1..{MAX_ORDER}, got {order}")
    return StructuredGrid(dims=dims, order=int(order), h=float(h))


class ElementBasis:
    """Tensor-product nodal Lagrange basis on the reference cube [-1, 1]^D.

    1D nodes are equally spaced, so for a given order the spanned space is
    the full tensor-product polynomial space of that degree per axis.
    """

    def __init__(self, order, ndim):
        if not 1 <= order <= MAX_ORDER:
            raise ConfigError("order", f"basis order must be in 1..{MAX_ORDER}")
        self.order = order
        self.ndim = ndim
        self.nodes_1d = np.linspace(-1.0, 1.0, order + 1)
        self.num_functions = (order + 1) ** ndim

    def _lagrange_1d(self, x):
        """Values and derivatives of 1D Lagrange polynomials at x."""
        x = np.asarray(x, dtype=float)
        n = self.nodes_1d
        P = self.order
        vals = np.ones((x.size, P + 1))
        ders = np.zeros((x.size, P + 1))
        for a in range(P + 1):
            for b in range(P + 1):
                if b == a:
                    continue
                vals[:, a] *= (x - n[b]) / (n[a] - n[b])
            # derivative by product-rule sum
            for c in range(P + 1):
                if c == a:
                    continue
                term = np.ones(x.size) / (n[a] - n[c])
                for b in range(P + 1):
                    if b in (a, c):
                        continue
                    term *= (x - n[b]) / (n[a] - n[b])
                ders[:, a] += term
        return vals, ders

    def shape(self, ref_points):
        """Shape function values, shape (npts, num_functions)."""
        pts = np.atleast_2d(ref_points)
        per_axis = [self._lagrange_1d(pts[:, a])[0] for a in range(self.ndim)]
        return self._tensor(per_axis)

    def gradient(self, ref_points):
        """Reference-space gradients, shape (npts, num_functions, D)."""
        pts = np.atleast_2d(ref_points)
        vals = [self._lagrange_1d(pts[:, a])[0] for a in range(self.ndim)]
        ders = [self._lagrange_1d(pts[:, a])[1] for a in range(self.ndim)]
        out = np.empty((pts.shape[0], self.num_functions, self.ndim))
        for a in range(self.ndim):
            factors = [ders[b] if b == a else vals[b] for b in range(self.ndim)]
            out[:, :, a] = self._tensor(factors)
        return out

    def _tensor(self, per_axis):
        """Combine 1D factors into tensor-product functions, x index fastest."""
        npts = per_axis[0].shape[0]
        out = per_axis[0]
        for a in range(1, self.ndim):
            out = np.einsum("pi,pj->pji", out, per_axis[a]).reshape(npts, -1)
        return out


@dataclass(frozen=True)
class QuadratureRule:
    points: np.ndarray  # (m, D) reference coordinates
    weights: np.ndarray  # (m,)

    @property
    def num_points(self):
        return self.points.shape[0]


def gauss_rule(points_per_axis, ndim):
    """Tensor-product Gauss-Legendre rule on [-1, 1]^D, x index fastest."""
    if points_per_axis < 1:
        raise ConfigError("gauss_points", "need at least one point per axis")
    x, w = np.polynomial.legendre.leggauss(points_per_axis)
    pts_1d = [x] * ndim
    wts_1d = [w] * ndim
    mesh = np.meshgrid(*pts_1d, indexing="ij")
    pts = np.column_stack([m.ravel(order="F") for m in mesh])
    wmesh = np.meshgrid(*wts_1d, indexing="ij")
    wts = np.ones(pts.shape[0])
    for m in wmesh:
        wts = wts * m.ravel(order="F")
    return QuadratureRule(points=pts, weights=wts)
