import numpy as np
import pytest

from tristage.errors import ConfigError
from tristage.grid import ElementBasis, StructuredGrid, build_grid, gauss_rule


class TestBuildGrid:
    def test_mbb_counts(self):
        g = build_grid((64, 32), 1)
        assert g.num_elements == 2048
        assert g.num_nodes == 65 * 33 == 2145

    def test_p2_counts(self):
        g = build_grid((2, 2), 2)
        assert g.num_elements == 4
        assert g.num_nodes == 5 * 5 == 25

    def test_3d_counts(self):
        g = build_grid((64, 10, 32), 1)
        assert g.num_elements == 20480
        assert g.num_nodes == 65 * 11 * 33

    def test_invalid_dims(self):
        with pytest.raises(ConfigError):
            build_grid((0, 4), 1)
        with pytest.raises(ConfigError):
            build_grid((4, -1), 1)

    def test_invalid_order(self):
        with pytest.raises(ConfigError):
            build_grid((4, 4), 5)

    def test_connectivity_strictly_increasing(self):
        for dims, order in [((3, 2), 1), ((3, 2), 2), ((2, 2, 2), 1),
                            ((2, 3, 2), 2), ((5, 4), 3)]:
            g = build_grid(dims, order)
            conn = g.connectivity()
            assert conn.shape == (g.num_elements, (order + 1) ** g.ndim)
            assert np.all(np.diff(conn, axis=1) > 0)
            assert conn.min() >= 0 and conn.max() < g.num_nodes

    def test_node_coords_cover_domain(self):
        g = build_grid((4, 3), 2)
        xyz = g.node_coords()
        assert np.isclose(xyz[:, 0].max(), 4.0)
        assert np.isclose(xyz[:, 1].max(), 3.0)
        assert xyz.shape == (g.num_nodes, 2)

    def test_element_centers(self):
        g = build_grid((2, 2), 1)
        c = g.element_centers()
        assert np.allclose(sorted(map(tuple, c)), [(0.5, 0.5), (0.5, 1.5),
                                                   (1.5, 0.5), (1.5, 1.5)])

    def test_element_containing(self):
        g = build_grid((4, 3), 1)
        eid = g.element_containing(np.array([[0.2, 0.3], [3.9, 2.9]]))
        assert eid[0] == 0
        assert eid[1] == g.num_elements - 1


class TestElementBasis:
    @pytest.mark.parametrize("order", [1, 2, 3, 4])
    @pytest.mark.parametrize("ndim", [1, 2, 3])
    def test_partition_of_unity(self, order, ndim):
        basis = ElementBasis(order, ndim)
        rng = np.random.default_rng(7)
        pts = rng.uniform(-1, 1, (20, ndim))
        N = basis.shape(pts)
        assert N.shape == (20, (order + 1) ** ndim)
        assert np.abs(N.sum(axis=1) - 1.0).max() <= 1e-12

    @pytest.mark.parametrize("order", [1, 2, 3, 4])
    @pytest.mark.parametrize("ndim", [2, 3])
    def test_gradient_sum_zero(self, order, ndim):
        basis = ElementBasis(order, ndim)
        rng = np.random.default_rng(3)
        pts = rng.uniform(-1, 1, (10, ndim))
        G = basis.gradient(pts)
        assert np.abs(G.sum(axis=1)).max() <= 1e-12

    def test_nodal_interpolation(self):
        # shape a is 1 at node a and 0 at the others
        basis = ElementBasis(2, 2)
        nodes = np.array([[x, y] for y in basis.nodes_1d for x in basis.nodes_1d])
        N = basis.shape(nodes)
        assert np.allclose(N, np.eye(9), atol=1e-12)

    def test_gradient_matches_fd(self):
        basis = ElementBasis(3, 2)
        rng = np.random.default_rng(11)
        pts = rng.uniform(-0.9, 0.9, (5, 2))
        G = basis.gradient(pts)
        eps = 1e-6
        for a in range(2):
            dp = np.zeros(2)
            dp[a] = eps
            fd = (basis.shape(pts + dp) - basis.shape(pts - dp)) / (2 * eps)
            assert np.abs(fd - G[:, :, a]).max() < 1e-8


class TestGaussRule:
    @pytest.mark.parametrize("ndim", [1, 2, 3])
    @pytest.mark.parametrize("g", [1, 2, 3, 4, 8])
    def test_weight_sum_is_reference_volume(self, g, ndim):
        rule = gauss_rule(g, ndim)
        assert rule.points.shape == (g**ndim, ndim)
        assert np.isclose(rule.weights.sum(), 2.0**ndim, atol=1e-12)
        assert np.all(rule.weights > 0)

    @pytest.mark.parametrize("g", [1, 2, 3, 4])
    def test_polynomial_exactness(self, g):
        # exact up to degree 2g-1 per axis
        rule = gauss_rule(g, 1)
        for deg in range(2 * g):
            quad = (rule.weights * rule.points[:, 0] ** deg).sum()
            exact = 0.0 if deg % 2 else 2.0 / (deg + 1)
            assert np.isclose(quad, exact, atol=1e-13)
        deg = 2 * g  # first degree the rule misses
        quad = (rule.weights * rule.points[:, 0] ** deg).sum()
        assert not np.isclose(quad, 2.0 / (deg + 1), atol=1e-13)
