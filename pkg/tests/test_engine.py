import numpy as np
import pytest

from resalloc import (
    AllocationProblem,
    Box,
    CustomUtility,
    PrimalDualState,
    QuadraticUtility,
    StepConfig,
    affine_constraint,
    dual_gradient,
    estimate_lipschitz,
    pda_step,
    primal_gradient,
    reference_saddle_point,
    run_primal_dual,
    saddle_jacobian,
    random_quadratic_problem,
    regularized_lagrangian,
)


def tiny_problem(upsilon=0.1):
    """N=1, d=1, U = 0.5 theta^2, g = theta - 0.5."""
    return AllocationProblem(
        utilities=[QuadraticUtility(curvature=0.5, target=np.zeros(1))],
        constraints=[affine_constraint(np.ones(1), cap=0.5)],
        sets=[Box(lower=-10 * np.ones(1), upper=10 * np.ones(1))],
        upsilon=upsilon,
        diameter_bound=20.0,
    )


class TestGradients:
    def test_primal_gradient_pure_quadratic(self):
        # lam = 0, upsilon tiny, U_i = 0.5||theta||^2 -> (1/N) theta_i
        n, d = 4, 2
        problem = AllocationProblem(
            utilities=[QuadraticUtility(curvature=0.5, target=np.zeros(d))] * n,
            constraints=[],
            sets=[Box(lower=-np.ones(d) * 5, upper=np.ones(d) * 5)] * n,
            upsilon=1e-12,
            diameter_bound=20.0,
        )
        theta = np.arange(n * d, dtype=float).reshape(n, d)
        state = PrimalDualState(theta, np.zeros(0))
        for i in range(n):
            np.testing.assert_allclose(primal_gradient(problem, state, i),
                                       theta[i] / n, rtol=1e-9)

    def test_primal_gradient_hand_value(self):
        problem = tiny_problem()
        state = PrimalDualState(np.array([[1.0]]), np.zeros(1))
        assert primal_gradient(problem, state, 0)[0] == pytest.approx(1.1)

    def test_dual_gradient_hand_values(self):
        problem = tiny_problem()
        state = PrimalDualState(np.array([[1.0]]), np.zeros(1))
        assert dual_gradient(problem, state)[0] == pytest.approx(0.5)
        state10 = PrimalDualState(np.array([[1.0]]), np.array([10.0]))
        assert dual_gradient(problem, state10)[0] == pytest.approx(-0.5)

    def test_gradient_zero_at_constrained_optimum(self):
        # at the saddle point the projected step is a fixed point, so the
        # projection residual of the gradient direction vanishes
        problem = tiny_problem()
        ref = reference_saddle_point(problem)
        cfg = StepConfig(gamma=0.05)
        nxt = pda_step(problem, ref, cfg)
        assert abs(nxt.theta[0, 0] - ref.theta[0, 0]) < 1e-9
        assert abs(nxt.lam[0] - ref.lam[0]) < 1e-9


class TestStep:
    def test_hand_worked_step(self):
        problem = tiny_problem()
        state = PrimalDualState(np.array([[1.0]]), np.zeros(1))
        nxt = pda_step(problem, state, StepConfig(gamma=0.1))
        assert nxt.theta[0, 0] == pytest.approx(0.89)
        assert nxt.lam[0] == pytest.approx(0.05)

    def test_dual_clamped_at_zero(self):
        # lam = 0.1, dual gradient -2, gamma = 0.1 -> clamp to zero
        problem = AllocationProblem(
            utilities=[QuadraticUtility(curvature=0.5, target=np.zeros(1))],
            constraints=[affine_constraint(np.ones(1), cap=2.0)],
            sets=[Box(lower=-10 * np.ones(1), upper=10 * np.ones(1))],
            upsilon=0.1,
            diameter_bound=20.0,
        )
        state = PrimalDualState(np.array([[0.0]]), np.array([0.1]))
        # dual gradient = g(0) - 0.1*0.1 = -2.01; step keeps lam at zero
        nxt = pda_step(problem, state, StepConfig(gamma=0.1))
        assert nxt.lam[0] == 0.0

    def test_saddle_point_is_fixed_point(self):
        problem = tiny_problem()
        ref = reference_saddle_point(problem)
        nxt = pda_step(problem, ref, StepConfig(gamma=0.2))
        assert np.max(np.abs(nxt.theta - ref.theta)) < 1e-10
        assert np.max(np.abs(nxt.lam - ref.lam)) < 1e-10

    def test_updates_are_simultaneous(self):
        # the dual update must read the pre-step average, not the new one
        problem = tiny_problem()
        state = PrimalDualState(np.array([[1.0]]), np.zeros(1))
        nxt = pda_step(problem, state, StepConfig(gamma=0.1))
        # with the old average: lam' = 0.1 * (1 - 0.5) = 0.05
        # with the new average it would be 0.1 * (0.89 - 0.5) = 0.039
        assert nxt.lam[0] == pytest.approx(0.05, abs=1e-15)


class TestReferenceSolver:
    def test_closed_form_inactive_constraint(self):
        # U = 0.5 (theta-1)^2, g = theta - 5 slack, upsilon = 0.1
        problem = AllocationProblem(
            utilities=[QuadraticUtility(curvature=0.5, target=np.ones(1))],
            constraints=[affine_constraint(np.ones(1), cap=5.0)],
            sets=[Box(lower=-10 * np.ones(1), upper=10 * np.ones(1))],
            upsilon=0.1,
            diameter_bound=20.0,
        )
        ref = reference_saddle_point(problem)
        assert ref.theta[0, 0] == pytest.approx(1.0 / 1.1, abs=1e-9)
        assert ref.lam[0] == pytest.approx(0.0, abs=1e-9)

    def test_symmetric_agents_get_equal_parameters(self):
        n, d = 5, 2
        problem = AllocationProblem(
            utilities=[QuadraticUtility(curvature=1.0,
                                        target=np.array([0.3, -0.2]))] * n,
            constraints=[affine_constraint(np.array([1.0, 1.0]), cap=0.1)],
            sets=[Box(lower=-np.ones(d), upper=np.ones(d))] * n,
            upsilon=0.4,
            diameter_bound=3.0,
        )
        ref = reference_saddle_point(problem)
        for i in range(1, n):
            np.testing.assert_allclose(ref.theta[i], ref.theta[0], atol=1e-9)

    def test_active_constraint_agrees_with_grid_search(self):
        # N=1, U=0, C=[0,2], g = theta - 1, upsilon = 0.1
        problem = AllocationProblem(
            utilities=[CustomUtility(value_fn=lambda t: 0.0,
                                     grad_fn=lambda t: np.zeros_like(t))],
            constraints=[affine_constraint(np.ones(1), cap=1.0)],
            sets=[Box(lower=np.zeros(1), upper=2.0 * np.ones(1))],
            upsilon=0.1,
            diameter_bound=2.0,
        )
        ref = reference_saddle_point(problem)
        # stationarity: the projected step must not move the point
        nxt = pda_step(problem, ref, StepConfig(gamma=0.05))
        resid = np.sqrt((nxt.theta - ref.theta) ** 2 + (nxt.lam - ref.lam) ** 2)
        assert float(resid.max()) < 1e-8

        # dense minimax grid oracle with one local refinement
        def saddle_by_grid(t_lo, t_hi, l_lo, l_hi, steps):
            thetas = np.linspace(t_lo, t_hi, steps)
            lams = np.linspace(l_lo, l_hi, steps)
            values = np.array([
                [regularized_lagrangian(problem, np.array([[t]]), np.array([l]))
                 for l in lams] for t in thetas
            ])
            best_t = np.argmin(values.max(axis=1))
            best_l = np.argmax(values[best_t])
            return thetas[best_t], lams[best_l]

        t1, l1 = saddle_by_grid(0.0, 2.0, 0.0, 3.0, 81)
        span_t, span_l = 2.0 / 80, 3.0 / 80
        t2, l2 = saddle_by_grid(max(0.0, t1 - span_t), min(2.0, t1 + span_t),
                                max(0.0, l1 - span_l), l1 + span_l, 81)
        assert abs(ref.theta[0, 0] - t2) < 2e-3
        assert abs(ref.lam[0] - l2) < 2e-3


class TestLipschitz:
    def test_exact_scalar_quadratic(self):
        problem = AllocationProblem(
            utilities=[QuadraticUtility(curvature=0.5, target=np.zeros(1))],
            constraints=[],
            sets=[Box(lower=-np.ones(1), upper=np.ones(1))],
            upsilon=1e-15,
            diameter_bound=2.0,
        )
        assert estimate_lipschitz(problem) == pytest.approx(1.0, rel=1e-9)

    def test_regularization_shifts_diagonal(self):
        def build(ups):
            return AllocationProblem(
                utilities=[QuadraticUtility(curvature=0.5, target=np.zeros(1))],
                constraints=[],
                sets=[Box(lower=-np.ones(1), upper=np.ones(1))],
                upsilon=ups,
                diameter_bound=2.0,
            )
        l_small = estimate_lipschitz(build(1e-15))
        l_big = estimate_lipschitz(build(0.3))
        assert l_big == pytest.approx(l_small + 0.3, rel=1e-9)

    def test_sampled_estimate_dominates_exact(self):
        problem = random_quadratic_problem(seed=11, n_agents=4, dim=2,
                                           n_constraints=2)
        exact = float(np.linalg.norm(saddle_jacobian(problem), ord=2))
        # force the sampled path by wrapping a utility as custom
        sampled_problem = AllocationProblem(
            utilities=[CustomUtility(value_fn=u.value, grad_fn=u.grad)
                       for u in problem.utilities],
            constraints=problem.constraints,
            sets=problem.sets,
            upsilon=problem.upsilon,
            diameter_bound=problem.diameter_bound,
        )
        sampled = estimate_lipschitz(sampled_problem, samples=400, seed=3)
        assert sampled >= exact * 0.99  # safety factor 2 keeps it above


class TestRuns:
    def test_run_from_reference_is_single_row(self):
        problem = tiny_problem()
        ref = reference_saddle_point(problem)
        cfg = StepConfig(gamma=0.1, max_iters=100, stop_tol=1e-8)
        trace = run_primal_dual(problem, ref, cfg, reference=ref)
        assert trace.n_rows == 1
        assert trace.residual_sq[0] <= 1e-16

    def test_contraction_factor_formula(self):
        # upsilon=1, L=2, gamma = upsilon/L^2 -> factor 0.75
        from resalloc.trace import contraction_coefficient
        assert 1 - 1.0 ** 2 / 2.0 ** 2 == pytest.approx(0.75)
        # the perturbed-run coefficient at the same point is different
        assert contraction_coefficient(1.0, 0.25, 2.0) == pytest.approx(0.875)

    def test_geometric_decay_on_quadratic_instance(self):
        problem = random_quadratic_problem(seed=5, n_agents=6, dim=2,
                                           n_constraints=2)
        l_phi = estimate_lipschitz(problem)
        gamma = problem.upsilon / l_phi ** 2
        ref = reference_saddle_point(problem)
        rng = np.random.default_rng(0)
        init = PrimalDualState(problem.sample_feasible(rng),
                               rng.uniform(0, 0.5, problem.n_constraints))
        trace = run_primal_dual(problem, init,
                                StepConfig(gamma=gamma, max_iters=200),
                                reference=ref)
        factor = 1.0 - problem.upsilon ** 2 / l_phi ** 2
        r = trace.residual_sq
        valid = r[:-1] > 1e-22
        ratios = r[1:][valid] / r[:-1][valid]
        assert np.all(ratios <= factor + 1e-9)

    def test_determinism(self):
        problem = random_quadratic_problem(seed=6, n_agents=4, dim=2,
                                           n_constraints=1)
        ref = reference_saddle_point(problem)
        rng = np.random.default_rng(1)
        init = PrimalDualState(problem.sample_feasible(rng),
                               np.zeros(problem.n_constraints))
        cfg = StepConfig(gamma=0.05, max_iters=60)
        t1 = run_primal_dual(problem, init, cfg, reference=ref)
        t2 = run_primal_dual(problem, init, cfg, reference=ref)
        assert np.array_equal(t1.residual_sq, t2.residual_sq)
        assert np.array_equal(t1.lambdas, t2.lambdas)
        assert np.array_equal(t1.step_norm, t2.step_norm)

    def test_feasibility_invariant(self):
        problem = random_quadratic_problem(seed=7, n_agents=5, dim=2,
                                           n_constraints=2)
        rng = np.random.default_rng(2)
        state = PrimalDualState(problem.sample_feasible(rng),
                                np.zeros(problem.n_constraints))
        cfg = StepConfig(gamma=0.1)
        for _ in range(50):
            state = pda_step(problem, state, cfg)
            for i, s in enumerate(problem.sets):
                assert s.contains(state.theta[i], tol=1e-12)
            assert np.all(state.lam >= 0.0)

    def test_nonfinite_aborts_with_diagnostics(self):
        from resalloc import NonFiniteIterateError
        problem = tiny_problem()
        bad = PrimalDualState(np.array([[np.nan]]), np.zeros(1))
        with pytest.raises(NonFiniteIterateError) as err:
            run_primal_dual(problem, bad, StepConfig(gamma=0.1, max_iters=5),
                            reference=PrimalDualState(np.zeros((1, 1)),
                                                      np.zeros(1)))
        assert err.value.iteration == 0
        assert err.value.quantity == "theta"
