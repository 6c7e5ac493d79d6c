import numpy as np
import pytest

from tristage.extract import marching_cubes, marching_squares
from tristage.levelset import RbfLevelSet, fit_weights, heaviside


def circle(cx, cy, r):
    def phi(p):
        p = np.atleast_2d(p)
        return r - np.sqrt((p[:, 0] - cx) ** 2 + (p[:, 1] - cy) ** 2)
    return phi


def sphere(c, r):
    def phi(p):
        return r - np.linalg.norm(np.atleast_2d(p) - np.asarray(c), axis=1)
    return phi


def polyline_length(poly):
    return float(np.linalg.norm(np.diff(poly, axis=0), axis=1).sum())


class TestMarchingSquares:
    def test_circle_perimeter(self):
        phi = circle(0.0, 0.0, 0.8)
        axes = [np.linspace(-1.2, 1.2, 256)] * 2
        contours = marching_squares(phi, axes)
        assert len(contours.polylines) == 1
        poly = contours.polylines[0]
        assert np.allclose(poly[0], poly[-1])  # closed
        perim = polyline_length(poly)
        assert abs(perim - 2 * np.pi * 0.8) / (2 * np.pi * 0.8) < 1e-2

    def test_half_plane_single_straight_line(self):
        phi = lambda p: np.atleast_2d(p)[:, 0] - 0.5371
        axes = [np.linspace(0, 1, 11), np.linspace(0, 1, 11)]
        contours = marching_squares(phi, axes)
        assert len(contours.polylines) == 1
        poly = contours.polylines[0]
        assert np.abs(poly[:, 0] - 0.5371).max() < 1e-9
        # straight: spans the full y range monotonically
        assert np.isclose(abs(poly[-1, 1] - poly[0, 1]), 1.0)

    def test_no_crossing_empty(self):
        contours = marching_squares(lambda p: np.full(len(np.atleast_2d(p)), 1.0),
                                    [np.linspace(0, 1, 8)] * 2)
        assert contours.polylines == []

    def test_vertices_on_zero_level(self):
        # |phi| at refined vertices below 1e-6 * gradient bound
        rng = np.random.default_rng(0)
        dims = (8, 6)
        w = rng.uniform(-0.5, 0.5, 48)
        lsf = RbfLevelSet(dims, w, theta=0.05, kappa=25.0, w_max=0.5)
        axes = [np.linspace(0, 8, 17), np.linspace(0, 6, 13)]
        contours = marching_squares(lsf.eval, axes)
        assert contours.polylines
        from tristage.levelset import slope_constants
        grad_max = slope_constants(2, 0.5, 2, 1).grad_max
        for poly in contours.polylines:
            vals = lsf.eval(poly)
            assert np.abs(vals).max() <= 1e-6 * grad_max

    def test_saddle_disambiguation_by_center(self):
        # hyperbolic field phi = x*y has a saddle at the cell center
        phi = lambda p: np.atleast_2d(p)[:, 0] * np.atleast_2d(p)[:, 1]
        axes = [np.linspace(-1, 1, 3), np.linspace(-1, 1, 3)]
        contours = marching_squares(phi, axes)
        # center value is 0 at the saddle: either pairing is geometrically
        # valid; the contour must consist of two disjoint polylines
        assert len(contours.polylines) == 2

    def test_projected_field_same_contour(self):
        # the smooth step preserves the zero set: contours through H - 0.5
        # match contours through phi
        rng = np.random.default_rng(3)
        lsf = RbfLevelSet((6, 6), rng.uniform(-0.4, 0.4, 36), theta=0.02,
                          kappa=25.0)
        axes = [np.linspace(0, 6, 25)] * 2
        c_phi = marching_squares(lsf.eval, axes)
        c_h = marching_squares(lambda p: heaviside(lsf.eval(p), 25.0) - 0.5,
                               axes)
        v1 = np.vstack([p for p in c_phi.polylines])
        v2 = np.vstack([p for p in c_h.polylines])
        assert v1.shape == v2.shape
        assert np.allclose(np.sort(v1, axis=0), np.sort(v2, axis=0),
                           atol=1e-7)


class TestMarchingCubes:
    def test_sphere_area_and_volume(self):
        r0 = 0.7
        phi = sphere((0.0, 0.0, 0.0), r0)
        axes = [np.linspace(-1, 1, 65)] * 3
        mesh = marching_cubes(phi, axes)
        area = mesh.area()
        vol = mesh.volume()
        assert abs(area - 4 * np.pi * r0**2) / (4 * np.pi * r0**2) < 0.02
        assert abs(vol - 4 / 3 * np.pi * r0**3) / (4 / 3 * np.pi * r0**3) < 0.02

    def test_watertight_sphere(self):
        mesh = marching_cubes(sphere((0.1, 0.05, -0.07), 0.6),
                              [np.linspace(-1, 1, 33)] * 3)
        assert mesh.is_edge_manifold()
        assert len(mesh.triangles) > 0

    def test_all_positive_empty_mesh(self):
        mesh = marching_cubes(lambda p: np.full(len(np.atleast_2d(p)), 1.0),
                              [np.linspace(0, 1, 9)] * 3)
        assert len(mesh.triangles) == 0
        assert len(mesh.vertices) == 0

    def test_outward_orientation(self):
        # divergence-theorem volume positive means normals point outward
        mesh = marching_cubes(sphere((0, 0, 0), 0.5),
                              [np.linspace(-1, 1, 33)] * 3)
        assert mesh.volume() > 0
        # triangle normals align with -grad(phi) = radial direction
        v = mesh.vertices
        t = mesh.triangles
        n = np.cross(v[t[:, 1]] - v[t[:, 0]], v[t[:, 2]] - v[t[:, 0]])
        centroids = v[t].mean(axis=1)
        assert np.all(np.einsum("ij,ij->i", n, centroids) > 0)

    def test_no_degenerate_triangles(self):
        mesh = marching_cubes(sphere((0, 0, 0), 0.55),
                              [np.linspace(-1, 1, 29)] * 3)
        assert mesh.areas().min() > 1e-12


class TestSmoothness:
    def test_stage3_style_contour_is_smooth(self):
        # an RBF level set fitted to a smooth blob: consecutive contour
        # segments turn by less than 30 degrees away from domain corners
        dims = (16, 10)
        grid_x, grid_y = np.meshgrid(np.arange(16) + 0.5, np.arange(10) + 0.5,
                                     indexing="ij")
        rho = np.clip(1.2 - 0.2 * np.sqrt((grid_x - 8) ** 2 +
                                          (grid_y - 5) ** 2), 1e-8, 1.0)
        w = fit_weights(rho.ravel(order="F"), dims)
        lsf = RbfLevelSet(dims, w, theta=0.55, kappa=25.0)
        axes = [np.linspace(0, 16, 33), np.linspace(0, 10, 21)]
        contours = marching_squares(lsf.eval, axes)
        assert contours.polylines
        worst = 0.0
        for poly in contours.polylines:
            seg = np.diff(poly, axis=0)
            lens = np.linalg.norm(seg, axis=1)
            seg = seg[lens > 1e-9] / lens[lens > 1e-9][:, None]
            cosang = np.clip((seg[:-1] * seg[1:]).sum(axis=1), -1, 1)
            ang = np.degrees(np.arccos(cosang))
            worst = max(worst, ang.max() if ang.size else 0.0)
        assert worst < 30.0
