import numpy as np
import pytest

from tristage.fem import LoadCase, assemble_stiffness, compute_compliance, \
    regular_rule_group, solid_element_energies, solve_displacement
from tristage.grid import ElementBasis, build_grid
from tristage.presets import make_loadcase
from tristage.simp import (DensityField, SimpConfig, build_filter,
                           compliance_sensitivity_rho, run_stage1,
                           sensitivity_filter, volume_value_and_gradient)


def analyze_density(grid, basis, lc, rho, penal=3.0):
    group = regular_rule_group(grid, 2)
    dens = np.repeat(rho[:, None], group.ref_points.shape[0], axis=1)
    system = assemble_stiffness(grid, basis, [group], [dens], 1.0, 0.0, penal,
                                lc.fixed_dofs(grid), lc.load_vector(grid))
    u = solve_displacement(system)
    return system, group, u


class TestSensitivity:
    def test_unloaded_element_zero(self):
        grid = build_grid((2, 1), 1)
        basis = ElementBasis(1, 2)
        lc = LoadCase(forces=[(1, 1, -1.0)],
                      fixed=[(0, 0), (0, 1), (3, 0), (3, 1), (1, 0)])
        rho = np.array([0.5, 1e-8])
        system, group, u = analyze_density(grid, basis, lc, rho)
        en = solid_element_energies(grid, basis, group, u, 1.0, 0.0)
        dc = compliance_sensitivity_rho(rho, en, 3.0)
        assert np.all(dc <= 0.0)

    def test_all_nonpositive(self):
        grid = build_grid((4, 4), 1)
        basis = ElementBasis(1, 2)
        lc = make_loadcase("canti2d", grid)
        rng = np.random.default_rng(0)
        rho = rng.uniform(0.3, 0.9, 16)
        system, group, u = analyze_density(grid, basis, lc, rho)
        en = solid_element_energies(grid, basis, group, u, 1.0, 0.0)
        dc = compliance_sensitivity_rho(rho, en, 3.0)
        assert np.all(dc <= 0.0)

    def test_matches_central_difference(self):
        # 4x4 cantilever, delta 1e-6, relative error < 1e-4
        grid = build_grid((4, 4), 1)
        basis = ElementBasis(1, 2)
        lc = make_loadcase("canti2d", grid)
        rng = np.random.default_rng(42)
        rho = rng.uniform(0.4, 0.9, 16)
        system, group, u = analyze_density(grid, basis, lc, rho)
        en = solid_element_energies(grid, basis, group, u, 1.0, 0.0)
        dc = compliance_sensitivity_rho(rho, en, 3.0)
        delta = 1e-6
        for i in [0, 5, 10, 15]:
            rp = rho.copy(); rp[i] += delta
            rm = rho.copy(); rm[i] -= delta
            sp_, _, _ = analyze_density(grid, basis, lc, rp)
            sm_, _, _ = analyze_density(grid, basis, lc, rm)
            fd = (compute_compliance(sp_) - compute_compliance(sm_)) / (2 * delta)
            assert abs(fd - dc[i]) <= 1e-4 * abs(dc[i])


class TestSensitivityFilter:
    def test_no_neighbors_identity(self):
        grid = build_grid((5, 5), 1)
        H, Hs = build_filter(grid, 0.5)  # only self within range
        rng = np.random.default_rng(1)
        rho = rng.uniform(0.2, 1.0, 25)
        dc = -rng.uniform(0.0, 2.0, 25)
        out = sensitivity_filter(H, Hs, rho, dc)
        assert np.allclose(out, dc, rtol=1e-12)

    def test_uniform_field_fixed_point(self):
        grid = build_grid((6, 4), 1)
        H, Hs = build_filter(grid, 1.5)
        rho = np.full(24, 0.4)
        dc = np.full(24, -3.0)
        out = sensitivity_filter(H, Hs, rho, dc)
        assert np.allclose(out, dc, rtol=1e-12)

    def test_spike_spreads_by_distance_weights(self):
        # single spike, uniform rho: the filtered field at j is
        # (1.5 - dist(j, spike)) * dc_spike / (sum of weights at j)
        grid = build_grid((7, 7), 1)
        r_min = 1.5
        H, Hs = build_filter(grid, r_min)
        rho = np.full(49, 0.5)
        dc = np.zeros(49)
        center = 24  # (3, 3)
        dc[center] = -1.0
        out = sensitivity_filter(H, Hs, rho, dc)
        centers = grid.element_centers()
        for j in range(49):
            d = np.linalg.norm(centers[j] - centers[center])
            expected = max(0.0, r_min - d) * dc[center] / Hs[j]
            assert np.isclose(out[j], expected, atol=1e-14)
        # the spread reaches the diagonal neighbors with weight 1.5 - sqrt(2)
        diag = center + 7 + 1
        assert out[diag] < 0.0
        far = center + 2
        assert out[far] == 0.0


class TestVolume:
    def test_at_fraction_zero(self):
        v, g = volume_value_and_gradient(np.full(10, 0.4), 0.4)
        assert np.isclose(v, 0.0, atol=1e-14)

    def test_all_solid(self):
        v, _ = volume_value_and_gradient(np.ones(8), 0.4)
        assert np.isclose(v, 1.5)

    def test_all_void(self):
        v, _ = volume_value_and_gradient(np.full(8, 1e-8), 0.4)
        assert np.isclose(v, -1.0, atol=1e-6)

    def test_gradient_constant(self):
        _, g = volume_value_and_gradient(np.linspace(0.1, 1, 20), 0.25)
        assert np.allclose(g, 1.0 / (20 * 0.25))


def oc_reference(grid, lc, volfrac, penal=3.0, r_min=1.5, iters=100):
    """Independent optimality-criteria solver in the classic 99-line style."""
    basis = ElementBasis(1, 2)
    H, Hs = build_filter(grid, r_min)
    n = grid.num_elements
    x = np.full(n, volfrac)
    c_hist = []
    for _ in range(iters):
        system, group, u = analyze_density(grid, basis, lc, x, penal)
        c_hist.append(compute_compliance(system))
        en = solid_element_energies(grid, basis, group, u, 1.0, 0.0)
        dc = -penal * x ** (penal - 1.0) * en
        dc = (H @ (x * dc)) / Hs / np.maximum(1e-3, x)
        l1, l2, move = 0.0, 1e9, 0.2
        while (l2 - l1) / (l1 + l2 + 1e-30) > 1e-4:
            lmid = 0.5 * (l1 + l2)
            xnew = np.clip(x * np.sqrt(np.maximum(-dc, 0.0) / lmid),
                           np.maximum(1e-3, x - move),
                           np.minimum(1.0, x + move))
            if xnew.sum() - volfrac * n > 0:
                l1 = lmid
            else:
                l2 = lmid
        x = xnew
    return x, c_hist


class TestRunStage1:
    def test_desk_scale_mbb_improves_over_30_percent(self):
        grid = build_grid((8, 4), 1)
        lc = make_loadcase("mbb2d", grid)
        cfg = SimpConfig(volume_fraction=0.4, max_iterations=100)
        field, hist = run_stage1(cfg, grid, lc)
        reduction = 1.0 - hist[-1][1] / hist[0][1]
        assert reduction > 0.30
        # the independent optimality-criteria oracle confirms the threshold
        # is attainable on this instance
        _, c_oc = oc_reference(grid, lc, 0.4)
        assert 1.0 - c_oc[-1] / c_oc[0] > 0.30

    def test_volume_feasible_and_bounded(self):
        grid = build_grid((8, 4), 1)
        lc = make_loadcase("mbb2d", grid)
        seen = []
        cfg = SimpConfig(volume_fraction=0.4, max_iterations=30)
        field, hist = run_stage1(cfg, grid, lc,
                                 callback=lambda it, rho, C, v: seen.append(rho.copy()))
        for rho in seen:
            assert rho.min() >= cfg.rho_min - 1e-15
            assert rho.max() <= 1.0 + 1e-15
        assert np.mean(field.values) <= 0.4 * (1 + 1e-3)

    def test_unconstrained_volume_goes_solid(self):
        grid = build_grid((4, 2), 1)
        lc = make_loadcase("mbb2d", grid)
        cfg = SimpConfig(volume_fraction=1.0, max_iterations=5)
        field, hist = run_stage1(cfg, grid, lc)
        assert np.all(field.values >= 1.0 - 1e-9)

    def test_deterministic(self):
        grid = build_grid((6, 3), 1)
        lc = make_loadcase("mbb2d", grid)
        cfg = SimpConfig(volume_fraction=0.4, max_iterations=15)
        f1, h1 = run_stage1(cfg, grid, lc)
        f2, h2 = run_stage1(cfg, grid, lc)
        assert np.array_equal(f1.values, f2.values)
        assert h1 == h2


class TestDensityField:
    def test_size_mismatch(self):
        from tristage.errors import ConfigError
        with pytest.raises(ConfigError):
            DensityField(values=np.ones(5), dims=(2, 3))

    def test_clipped(self):
        f = DensityField(values=np.array([0.0, 0.5, 2.0, 1e-12]), dims=(4, 1),
                         rho_min=1e-8)
        c = f.clipped()
        assert c.min() >= 1e-8 and c.max() <= 1.0
