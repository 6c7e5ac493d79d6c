import numpy as np
import pytest

from tristage.mma import ASY_DECR, MmaState, mma_update, _convex_coeffs


def minimize(f_and_g, x0, xmin, xmax, iters=30, move=0.2):
    x = np.asarray(x0, dtype=float)
    state = MmaState(move=move)
    for _ in range(iters):
        f0, df0, g, dg = f_and_g(x)
        x, state = mma_update(state, x, f0, df0, g, dg, xmin, xmax)
    return x


class TestAnalyticProblem:
    def test_symmetric_qp(self):
        # min x1^2 + x2^2 s.t. x1 + x2 >= 1 on [0,1]^2 -> (0.5, 0.5)
        def fg(x):
            return float(x @ x), 2 * x, 1.0 - x.sum(), np.array([-1.0, -1.0])

        x = minimize(fg, [0.9, 0.1], 0.0, 1.0, iters=30)
        assert np.abs(x - 0.5).max() < 1e-4

    def test_stays_in_box_with_compliance_sign_structure(self):
        rng = np.random.default_rng(4)
        x = rng.uniform(0.2, 0.8, 50)
        state = MmaState(move=0.2)
        for _ in range(10):
            df0 = -rng.uniform(0.5, 2.0, 50)  # compliance-like: negative
            dg = np.full(50, 1.0 / 50)  # volume-like: positive constant
            g = float(x.mean() - 0.5)
            x, state = mma_update(state, x, 1.0, df0, g, dg, 0.01, 1.0)
            assert np.all(x >= 0.01 - 1e-15) and np.all(x <= 1.0 + 1e-15)


class TestStationarity:
    def test_zero_gradients_fixed_point(self):
        x0 = np.array([0.3, 0.7, 0.5])
        xn, _ = mma_update(MmaState(), x0, 1.0, np.zeros(3), -0.2, np.zeros(3),
                           0.0, 1.0)
        assert np.allclose(xn, x0, atol=1e-12)

    def test_zero_gradients_infeasible_still_fixed(self):
        x0 = np.array([0.4, 0.6])
        xn, _ = mma_update(MmaState(), x0, 1.0, np.zeros(2), 0.3, np.zeros(2),
                           0.0, 1.0)
        assert np.allclose(xn, x0, atol=1e-12)


class TestSubproblemProperties:
    def test_approximation_gradient_exact_at_expansion(self):
        rng = np.random.default_rng(1)
        n = 20
        x = rng.uniform(0.3, 0.7, n)
        low, upp = x - 0.5, x + 0.5
        grad = rng.normal(size=n)
        p, q = _convex_coeffs(grad, x, low, upp, np.ones(n))
        # d/dx [p/(u-x) + q/(x-l)] at x equals p/(u-x)^2 - q/(x-l)^2
        approx_grad = p / (upp - x) ** 2 - q / (x - low) ** 2
        assert np.abs(approx_grad - grad).max() < 1e-12

    def test_objective_scaling_leaves_argmin_unchanged(self):
        rng = np.random.default_rng(8)
        n = 30
        x = rng.uniform(0.2, 0.8, n)
        df0 = rng.normal(size=n)
        dg = rng.uniform(0.5, 1.5, n)
        g = -0.1
        outs = []
        for scale in (1.0, 1e3, 1e-3):
            xn, _ = mma_update(MmaState(move=0.2), x.copy(), 1.0, scale * df0,
                               g, dg, 0.0, 1.0)
            outs.append(xn)
        assert np.abs(outs[0] - outs[1]).max() < 1e-9
        assert np.abs(outs[0] - outs[2]).max() < 1e-9

    def test_subproblem_kkt(self):
        # with an active constraint the returned point satisfies primal
        # feasibility of the subproblem at the dual tolerance
        n = 10
        rng = np.random.default_rng(3)
        x = rng.uniform(0.4, 0.6, n)
        df0 = -np.ones(n)
        dg = np.ones(n) / n
        g = 0.0  # on the boundary; objective pushes up
        xn, _ = mma_update(MmaState(move=0.2), x, 1.0, df0, g, dg, 0.0, 1.0)
        # linearized constraint honored: g + dg . (xn - x) <= 1e-8
        assert g + dg @ (xn - x) <= 1e-6


class TestAsymptoteDynamics:
    def test_oscillation_shrinks_gap(self):
        state = MmaState(move=0.5)
        xs = [np.array([0.5]), np.array([0.6]), np.array([0.5]),
              np.array([0.6])]
        gaps = []
        for x in xs:
            _, state = mma_update(state, x, 1.0, np.array([1.0]), -1.0,
                                  np.array([0.0]), 0.0, 1.0)
            gaps.append(float(state.upper[0] - state.lower[0]))
        # third and fourth updates see sign flips: gap scales by 0.7 each
        assert np.isclose(gaps[2], ASY_DECR * gaps[1], rtol=1e-12)
        assert np.isclose(gaps[3], ASY_DECR**2 * gaps[1], rtol=1e-12)

    def test_iterate_strictly_inside_asymptotes(self):
        rng = np.random.default_rng(12)
        x = rng.uniform(0.1, 0.9, 15)
        state = MmaState(move=0.2)
        for _ in range(5):
            x, state = mma_update(state, x, 1.0, rng.normal(size=15), -0.5,
                                  rng.uniform(0, 1, 15), 0.0, 1.0)
            assert np.all(state.lower < x) and np.all(x < state.upper)


class TestValidation:
    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            mma_update(MmaState(), np.array([np.nan]), 1.0, np.array([1.0]),
                       0.0, np.array([1.0]), 0.0, 1.0)
        with pytest.raises(ValueError):
            mma_update(MmaState(), np.array([0.5]), np.inf, np.array([1.0]),
                       0.0, np.array([1.0]), 0.0, 1.0)

    def test_bad_box_rejected(self):
        with pytest.raises(ValueError):
            mma_update(MmaState(), np.array([0.5]), 1.0, np.array([1.0]),
                       0.0, np.array([1.0]), 1.0, 0.0)
