"""Isocontour / isosurface extraction from a scalar field callable.

Both extractors sample the field on a lattice, place vertices on crossing
lattice edges, and then refine each vertex along its edge using exact field
evaluations: the 2D contour iterates a vectorized bisection until the field
value at every vertex is negligible, the 3D surface applies the single
secant correction that is adequate for rendering/STL purposes.
"""

from dataclasses import dataclass

import numpy as np

from .mc_table import CORNER_OFFSETS, EDGE_CORNERS, TRI_TABLE


@dataclass
class ContourSet:
    polylines: list  # list of (k, 2) vertex arrays; closed if ends coincide


@dataclass
class SurfaceMesh:
    vertices: np.ndarray  # (nv, 3)
    triangles: np.ndarray  # (nt, 3) int, outward orientation

    def areas(self):
        v = self.vertices
        t = self.triangles
        cr = np.cross(v[t[:, 1]] - v[t[:, 0]], v[t[:, 2]] - v[t[:, 0]])
        return 0.5 * np.linalg.norm(cr, axis=1)

    def area(self):
        return float(self.areas().sum())

    def volume(self):
        """Enclosed volume by the divergence theorem (signed)."""
        v = self.vertices
        t = self.triangles
        a, b, c = v[t[:, 0]], v[t[:, 1]], v[t[:, 2]]
        return float(np.einsum("ij,ij->i", a, np.cross(b, c)).sum() / 6.0)

    def is_edge_manifold(self):
        """True when every edge is shared by exactly two triangles."""
        if len(self.triangles) == 0:
            return True
        e = np.vstack([self.triangles[:, [0, 1]], self.triangles[:, [1, 2]],
                       self.triangles[:, [2, 0]]])
        e.sort(axis=1)
        _, counts = np.unique(e, axis=0, return_counts=True)
        return bool(np.all(counts == 2))


def _sample(phi, axes):
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.column_stack([m.ravel() for m in mesh])
    vals = np.asarray(phi(pts), dtype=float)
    return vals.reshape([len(a) for a in axes])


def _refine_bisect(phi, pa, pb, fa, fb, iters=42):
    """Vectorized bisection for roots on segments [pa, pb], fa*fb <= 0."""
    pa, pb = pa.copy(), pb.copy()
    fa = fa.copy()
    for _ in range(iters):
        mid = 0.5 * (pa + pb)
        fm = np.asarray(phi(mid), dtype=float)
        left = (fa <= 0) == (fm <= 0)
        pa[left] = mid[left]
        fa[left] = fm[left]
        pb[~left] = mid[~left]
    return 0.5 * (pa + pb)


def _refine_secant(phi, pa, pb, fa, fb):
    """Linear interpolation then one secant step with exact evaluations."""
    t0 = fa / (fa - fb)
    p0 = pa + t0[:, None] * (pb - pa)
    f0 = np.asarray(phi(p0), dtype=float)
    # secant against the endpoint of opposite sign
    use_a = (f0 > 0) != (fa > 0)
    pe = np.where(use_a[:, None], pa, pb)
    fe = np.where(use_a, fa, fb)
    denom = f0 - fe
    safe = np.abs(denom) > 1e-300
    t1 = np.where(safe, -fe / np.where(safe, denom, 1.0), 0.5)
    t1 = np.clip(t1, 0.0, 1.0)
    return pe + t1[:, None] * (p0 - pe)


def marching_squares(phi, axes, refine="bisect"):
    """16-case contour extraction; saddles resolved by the center value."""
    xs, ys = axes
    vals = _sample(phi, axes)
    nx, ny = vals.shape
    inside = vals > 0.0

    segments = []  # pairs of edge keys
    saddle_cells = []
    b0 = inside[:-1, :-1]
    b1 = inside[1:, :-1]
    b2 = inside[1:, 1:]
    b3 = inside[:-1, 1:]
    case = (b0.astype(int) + 2 * b1.astype(int) + 4 * b2.astype(int)
            + 8 * b3.astype(int))
    ii, jj = np.nonzero((case > 0) & (case < 15))
    saddle_idx = [k for k in range(ii.size) if case[ii[k], jj[k]] in (5, 10)]
    centers = np.column_stack([
        0.5 * (xs[ii[saddle_idx]] + xs[ii[saddle_idx] + 1]),
        0.5 * (ys[jj[saddle_idx]] + ys[jj[saddle_idx] + 1]),
    ]) if saddle_idx else np.empty((0, 2))
    center_vals = np.asarray(phi(centers), dtype=float) if len(centers) else []
    center_pos = dict(zip(saddle_idx, np.asarray(center_vals) > 0.0))

    # edge keys: ("h", i, j) between nodes (i,j)-(i+1,j); ("v", i, j) between
    # (i,j)-(i,j+1)
    def bottom(i, j):
        return ("h", i, j)

    def top(i, j):
        return ("h", i, j + 1)

    def left(i, j):
        return ("v", i, j)

    def right(i, j):
        return ("v", i + 1, j)

    for k in range(ii.size):
        i, j = int(ii[k]), int(jj[k])
        c = int(case[i, j])
        if c in (1, 14):
            segs = [(left(i, j), bottom(i, j))]
        elif c in (2, 13):
            segs = [(bottom(i, j), right(i, j))]
        elif c in (3, 12):
            segs = [(left(i, j), right(i, j))]
        elif c in (4, 11):
            segs = [(right(i, j), top(i, j))]
        elif c in (6, 9):
            segs = [(bottom(i, j), top(i, j))]
        elif c in (7, 8):
            segs = [(left(i, j), top(i, j))]
        elif c == 5:  # corners 0 and 2 inside
            if center_pos[k]:
                segs = [(left(i, j), top(i, j)), (bottom(i, j), right(i, j))]
            else:
                segs = [(left(i, j), bottom(i, j)), (right(i, j), top(i, j))]
        else:  # c == 10, corners 1 and 3 inside
            if center_pos[k]:
                segs = [(left(i, j), bottom(i, j)), (right(i, j), top(i, j))]
            else:
                segs = [(left(i, j), top(i, j)), (bottom(i, j), right(i, j))]
        segments.extend(segs)

    if not segments:
        return ContourSet(polylines=[])

    keys = sorted({k for seg in segments for k in seg})
    key_id = {k: n for n, k in enumerate(keys)}
    pa = np.empty((len(keys), 2))
    pb = np.empty((len(keys), 2))
    fa = np.empty(len(keys))
    fb = np.empty(len(keys))
    for n, (kind, i, j) in enumerate(keys):
        if kind == "h":
            pa[n] = (xs[i], ys[j])
            pb[n] = (xs[i + 1], ys[j])
            fa[n], fb[n] = vals[i, j], vals[i + 1, j]
        else:
            pa[n] = (xs[i], ys[j])
            pb[n] = (xs[i], ys[j + 1])
            fa[n], fb[n] = vals[i, j], vals[i, j + 1]
    if refine == "bisect":
        verts = _refine_bisect(phi, pa, pb, fa, fb)
    else:
        verts = _refine_secant(phi, pa, pb, fa, fb)

    seg_ids = [(key_id[a], key_id[b]) for a, b in segments]
    return ContourSet(polylines=_chain_segments(verts, seg_ids))


def _chain_segments(verts, seg_ids):
    adj = {}
    for a, b in seg_ids:
        adj.setdefault(a, []).append(b)
        adj.setdefault(b, []).append(a)
    unused = {(a, b) if a < b else (b, a) for a, b in seg_ids}

    def take(cur):
        for v in adj[cur]:
            key = (cur, v) if cur < v else (v, cur)
            if key in unused:
                unused.discard(key)
                return v
        return None

    def walk(start):
        path = [start]
        while (nxt := take(path[-1])) is not None:
            path.append(nxt)
        return path

    def has_unused(v):
        return any(((v, w) if v < w else (w, v)) in unused for w in adj[v])

    polylines = []
    # open chains start at odd-degree vertices; the rest are closed loops
    starts = [v for v in sorted(adj) if len(adj[v]) % 2 == 1]
    starts += sorted(adj)
    for start in starts:
        while has_unused(start):
            polylines.append(verts[np.asarray(walk(start))])
    return polylines


def marching_cubes(phi, axes):
    """256-case surface extraction with outward-oriented triangles.

    Vertices sit on crossing lattice edges after a linear + one-secant root
    estimate; shared edges share vertices exactly, so closed level sets
    sampled strictly inside the lattice give edge-manifold meshes.
    """
    xs, ys, zs = axes
    vals = _sample(phi, axes)
    inside = (vals < 0.0).astype(np.uint8)

    # per-cell case index from the 8 corners
    c = np.zeros(tuple(n - 1 for n in vals.shape), dtype=np.uint16)
    for bit, (ox, oy, oz) in enumerate(CORNER_OFFSETS):
        c |= (inside[ox:ox + c.shape[0], oy:oy + c.shape[1],
                     oz:oz + c.shape[2]].astype(np.uint16) << bit)
    ci, cj, ck = np.nonzero((c > 0) & (c < 255))

    tri_edge_keys = []
    for i, j, k in zip(ci, cj, ck):
        row = TRI_TABLE[c[i, j, k]]
        for t in range(0, 16, 3):
            if row[t] < 0:
                break
            tri = []
            for e in row[t:t + 3]:
                a, b = EDGE_CORNERS[e]
                na = (i + CORNER_OFFSETS[a][0], j + CORNER_OFFSETS[a][1],
                      k + CORNER_OFFSETS[a][2])
                nb = (i + CORNER_OFFSETS[b][0], j + CORNER_OFFSETS[b][1],
                      k + CORNER_OFFSETS[b][2])
                key = (na, nb) if na < nb else (nb, na)
                tri.append(key)
            tri_edge_keys.append(tri)

    if not tri_edge_keys:
        return SurfaceMesh(vertices=np.zeros((0, 3)),
                           triangles=np.zeros((0, 3), dtype=np.int64))

    keys = sorted({k for tri in tri_edge_keys for k in tri})
    key_id = {k: n for n, k in enumerate(keys)}
    node = lambda idx: np.array([xs[idx[0]], ys[idx[1]], zs[idx[2]]])
    pa = np.array([node(a) for a, _ in keys])
    pb = np.array([node(b) for _, b in keys])
    fa = np.array([vals[a] for a, _ in keys])
    fb = np.array([vals[b] for _, b in keys])
    verts = _refine_secant(phi, pa, pb, fa, fb)

    tris = np.array([[key_id[a], key_id[b], key_id[c_]]
                     for a, b, c_ in tri_edge_keys], dtype=np.int64)
    # a lattice node with phi exactly 0 puts coincident vertices on all its
    # edges; weld them so the degenerate triangles become repeated-id and
    # can be dropped without opening the mesh
    verts, inverse = np.unique(verts, axis=0, return_inverse=True)
    tris = inverse[tris]
    ok = (tris[:, 0] != tris[:, 1]) & (tris[:, 1] != tris[:, 2]) \
        & (tris[:, 0] != tris[:, 2])
    tris = tris[ok]

    mesh = SurfaceMesh(vertices=verts, triangles=tris)
    _orient_outward(mesh, phi, min(xs[1] - xs[0], ys[1] - ys[0], zs[1] - zs[0]))
    return mesh


def _orient_outward(mesh, phi, spacing):
    """Flip triangles so normals point toward decreasing field values."""
    if len(mesh.triangles) == 0:
        return
    v = mesh.vertices
    t = mesh.triangles
    n = np.cross(v[t[:, 1]] - v[t[:, 0]], v[t[:, 2]] - v[t[:, 0]])
    norm = np.linalg.norm(n, axis=1, keepdims=True)
    n = n / np.maximum(norm, 1e-300)
    centroid = v[t].mean(axis=1)
    d = 0.1 * spacing
    dphi = (np.asarray(phi(centroid + d * n)) -
            np.asarray(phi(centroid - d * n)))
    flip = dphi > 0.0
    t[flip] = t[flip][:, [0, 2, 1]]
