import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from resalloc import (
    AllocationProblem,
    Ball,
    Box,
    LogUtility,
    QuadraticUtility,
    affine_constraint,
    conservative_offset,
    project,
    quadratic_constraint,
    regularized_lagrangian,
    robust_view,
)


def small_problem():
    """N=1, d=1, U = 0.5 theta^2, g = theta - 0.5, upsilon = 0.1."""
    return AllocationProblem(
        utilities=[QuadraticUtility(curvature=0.5, target=np.zeros(1))],
        constraints=[affine_constraint(np.ones(1), cap=0.5)],
        sets=[Box(lower=-np.ones(1) * 10, upper=np.ones(1) * 10)],
        upsilon=0.1,
        diameter_bound=20.0,
    )


class TestProjection:
    def test_box_clamps_per_coordinate(self):
        box = Box(lower=-np.ones(2), upper=np.ones(2))
        np.testing.assert_allclose(project(box, [2.0, 0.5]), [1.0, 0.5])

    def test_inside_point_unchanged(self):
        box = Box(lower=-np.ones(3), upper=np.ones(3))
        p = np.array([0.2, -0.9, 0.0])
        np.testing.assert_array_equal(project(box, p), p)
        ball = Ball(center=np.zeros(3), radius=2.0)
        np.testing.assert_array_equal(project(ball, p), p)

    def test_ball_radial_scaling(self):
        ball = Ball(center=np.zeros(2), radius=1.0)
        np.testing.assert_allclose(project(ball, [3.0, 4.0]), [0.6, 0.8])

    def test_dimension_mismatch_rejected(self):
        box = Box(lower=-np.ones(2), upper=np.ones(2))
        with pytest.raises(ValueError, match="dimension"):
            project(box, [1.0, 2.0, 3.0])

    @given(
        lo=st.floats(-5, -0.01), hi=st.floats(0.01, 5),
        x=st.lists(st.floats(-50, 50), min_size=2, max_size=2),
        y=st.lists(st.floats(-50, 50), min_size=2, max_size=2),
    )
    @settings(max_examples=60, deadline=None)
    def test_box_idempotent_and_nonexpansive(self, lo, hi, x, y):
        box = Box(lower=np.array([lo, lo]), upper=np.array([hi, hi]))
        px, py = project(box, x), project(box, y)
        np.testing.assert_array_equal(project(box, px), px)
        assert np.linalg.norm(px - py) <= np.linalg.norm(np.subtract(x, y)) + 1e-12

    @given(
        r=st.floats(0.1, 5), x=st.lists(st.floats(-50, 50), min_size=3, max_size=3),
        y=st.lists(st.floats(-50, 50), min_size=3, max_size=3),
    )
    @settings(max_examples=60, deadline=None)
    def test_ball_idempotent_and_nonexpansive(self, r, x, y):
        ball = Ball(center=np.zeros(3), radius=r)
        px, py = project(ball, x), project(ball, y)
        np.testing.assert_allclose(project(ball, px), px, atol=1e-12)
        assert np.linalg.norm(px - py) <= np.linalg.norm(np.subtract(x, y)) + 1e-9

    def test_sets_must_contain_origin(self):
        with pytest.raises(ValueError, match="origin"):
            Box(lower=np.ones(2) * 0.5, upper=np.ones(2))
        with pytest.raises(ValueError, match="origin"):
            Ball(center=np.ones(2) * 3, radius=1.0)


class TestGradients:
    def _finite_diff(self, fn, x, h=1e-6):
        g = np.zeros_like(x)
        for j in range(x.size):
            e = np.zeros_like(x)
            e[j] = h
            g[j] = (fn(x + e) - fn(x - e)) / (2 * h)
        return g

    @pytest.mark.parametrize("utility", [
        QuadraticUtility(curvature=1.3, target=np.array([0.4, -0.2]), offset=0.7),
        LogUtility(weight=1.5, shift=2.0),
    ])
    def test_utility_gradient_matches_finite_difference(self, utility):
        rng = np.random.default_rng(0)
        for _ in range(20):
            x = rng.uniform(-0.8, 0.8, size=2)
            analytic = utility.grad(x)
            numeric = self._finite_diff(utility.value, x)
            np.testing.assert_allclose(analytic, numeric,
                                       rtol=1e-5, atol=1e-7)

    def test_constraint_gradient_matches_finite_difference(self):
        cons = quadratic_constraint(0.3, np.array([1.0, -0.5]), cap=2.0,
                                    region_radius=10.0)
        rng = np.random.default_rng(1)
        for _ in range(20):
            x = rng.uniform(-2, 2, size=2)
            numeric = self._finite_diff(lambda p: float(cons.value(p)), x)
            np.testing.assert_allclose(cons.grad(x), numeric, rtol=1e-5,
                                       atol=1e-7)

    def test_constraint_bounds_hold_on_samples(self):
        r_bound = 4.0
        cons = quadratic_constraint(0.3, np.array([1.0, -0.5]), cap=2.0,
                                    region_radius=5 * r_bound)
        rng = np.random.default_rng(2)
        pts = rng.uniform(-5 * r_bound / np.sqrt(2), 5 * r_bound / np.sqrt(2),
                          size=(300, 2))
        for x in pts:
            assert np.linalg.norm(cons.grad(x)) <= cons.grad_bound + 1e-9
        for x, y in zip(pts[:150], pts[150:]):
            lhs = np.linalg.norm(cons.grad(x) - cons.grad(y))
            assert lhs <= cons.lipschitz * np.linalg.norm(x - y) + 1e-9

    def test_constraint_convexity_on_samples(self):
        cons = quadratic_constraint(0.3, np.array([1.0, -0.5]), cap=2.0,
                                    region_radius=10.0)
        rng = np.random.default_rng(3)
        for _ in range(100):
            x, y = rng.uniform(-3, 3, size=(2, 2))
            mid = cons.value(0.5 * x + 0.5 * y)
            assert mid <= 0.5 * cons.value(x) + 0.5 * cons.value(y) + 1e-12


class TestLagrangian:
    def test_zero_state_zero_value(self):
        problem = AllocationProblem(
            utilities=[QuadraticUtility(curvature=1.0, target=np.zeros(1))] * 3,
            constraints=[affine_constraint(np.ones(1), cap=1.0)],
            sets=[Box(lower=-np.ones(1), upper=np.ones(1))] * 3,
            upsilon=0.5,
            diameter_bound=2.0,
        )
        theta = np.zeros((3, 1))
        lam = np.zeros(1)
        assert regularized_lagrangian(problem, theta, lam) == pytest.approx(
            1.0 * 0.0 - 1.0 * 0.0)  # utility zero, constraint priced at zero

    def test_hand_value(self):
        problem = small_problem()
        value = regularized_lagrangian(problem, np.array([[1.0]]), np.zeros(1))
        assert value == pytest.approx(0.55, abs=1e-12)

    def test_negative_price_rejected(self):
        problem = small_problem()
        with pytest.raises(ValueError, match="nonnegative"):
            regularized_lagrangian(problem, np.array([[1.0]]), np.array([-0.1]))

    def test_value_decreases_in_upsilon_when_prices_dominate(self):
        # same data, two regularization weights; prices outweigh parameters
        def build(ups):
            return AllocationProblem(
                utilities=[QuadraticUtility(curvature=0.5, target=np.zeros(1))],
                constraints=[affine_constraint(np.ones(1), cap=0.5)],
                sets=[Box(lower=-np.ones(1) * 10, upper=np.ones(1) * 10)],
                upsilon=ups,
                diameter_bound=20.0,
            )
        theta, lam = np.array([[1.0]]), np.array([2.0])
        v1 = regularized_lagrangian(build(0.1), theta, lam)
        v2 = regularized_lagrangian(build(0.2), theta, lam)
        assert v2 < v1


class TestConservativeOffset:
    def test_zero_alpha_no_margin(self):
        assert conservative_offset(0.0, 2.0, 1.0, 0.5) == 0.0

    def test_formula(self):
        assert conservative_offset(0.25, 2.0, 1.0, 0.5) == pytest.approx(0.75)

    def test_flat_constraint_needs_no_margin(self):
        assert conservative_offset(0.1, 1.0, 0.0, 0.0) == 0.0

    def test_half_rejected(self):
        with pytest.raises(ValueError, match="0.5"):
            conservative_offset(0.5, 1.0, 1.0, 1.0)


class TestRobustView:
    def test_alpha_zero_identical(self):
        problem = small_problem()
        view = robust_view(problem, 0.0)
        x = np.array([0.7])
        np.testing.assert_array_equal(view.constraint_values(x),
                                      problem.constraint_values(x))

    def test_offset_applied(self):
        # g = theta - 5 with unit weight (B=1, L=0), R=2, alpha=0.25
        problem = AllocationProblem(
            utilities=[QuadraticUtility(curvature=1.0, target=np.zeros(1))],
            constraints=[affine_constraint(np.ones(1), cap=5.0)],
            sets=[Box(lower=-np.ones(1), upper=np.ones(1))],
            upsilon=0.1,
            diameter_bound=2.0,
        )
        view = robust_view(problem, 0.25)
        got = view.constraint_values(np.array([1.0]))
        assert got[0] == pytest.approx(1.0 - 5.0 + 0.5)

    def test_margin_is_exact_constant_everywhere(self):
        problem = small_problem()
        view = robust_view(problem, 0.3)
        rng = np.random.default_rng(4)
        for _ in range(50):
            x = rng.uniform(-10, 10, size=1)
            gap = view.constraint_values(x) - problem.constraint_values(x)
            np.testing.assert_allclose(gap, view.offsets, rtol=0, atol=0)

    def test_feasibility_survives_adversarial_members(self):
        # any point meeting the tightened constraint stays feasible for the
        # full average no matter what the unheard agents contribute
        rng = np.random.default_rng(5)
        n, d, alpha = 6, 2, 1.0 / 3.0
        sets = [Box(lower=-np.ones(d), upper=np.ones(d)) for _ in range(n)]
        problem = AllocationProblem(
            utilities=[QuadraticUtility(curvature=1.0, target=np.zeros(d))] * n,
            constraints=[
                affine_constraint(np.array([0.8, 0.6]), cap=1.0),
                quadratic_constraint(0.2, np.array([0.3, 0.0]), cap=3.0,
                                     region_radius=5 * 3.0),
            ],
            sets=sets,
            upsilon=0.5,
            diameter_bound=3.0,
        )
        view = robust_view(problem, alpha)
        honest = [0, 1, 2, 3]
        attacked = [4, 5]
        # find conservative-feasible honest tuples, including near-boundary
        found = 0
        for _ in range(400):
            theta_h = np.stack([sets[i].sample(rng) for i in honest])
            x_h = theta_h.sum(axis=0) / n
            if np.all(view.constraint_values(x_h) <= 0.0):
                found += 1
                draws = rng.uniform(-1, 1, size=(200, len(attacked), d))
                full = (theta_h.sum(axis=0) + draws.sum(axis=1)) / n
                for cons in problem.constraints:
                    assert np.all(cons.value(full) <= 1e-10)
        assert found > 20


class TestProblemValidation:
    def test_diameter_bound_enforced(self):
        with pytest.raises(ValueError, match="diameter"):
            AllocationProblem(
                utilities=[QuadraticUtility(curvature=1.0, target=np.zeros(2))],
                constraints=[],
                sets=[Box(lower=-np.ones(2), upper=np.ones(2))],
                upsilon=0.1,
                diameter_bound=1.0,
            )

    def test_upsilon_positive(self):
        with pytest.raises(ValueError, match="upsilon"):
            AllocationProblem(
                utilities=[QuadraticUtility(curvature=1.0, target=np.zeros(1))],
                constraints=[],
                sets=[Box(lower=-np.ones(1), upper=np.ones(1))],
                upsilon=0.0,
                diameter_bound=2.0,
            )
