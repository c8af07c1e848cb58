"""Generator, reference-solution and metric tests."""

from __future__ import annotations

import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy.special import expit

import splitfl as sf
from splitfl.experiments import gen_logistic, oracle_logistic


def _newton_logistic(problem, iters=60):
    """Independent damped-Newton solver for cross-checking the oracle."""
    d = problem.dim
    w = np.zeros(d)
    for _ in range(iters):
        g = problem.objective_gradient(w)
        H = np.zeros((d, d))
        for li, u in zip(problem.weights, problem.users):
            z = u.A @ w
            curvature = expit(z) * (1 - expit(z))
            H += li * (u.A.T * curvature) @ u.A
            H += li * u.reg_weight * np.eye(d)
        delta = np.linalg.solve(H, g)
        t = 1.0
        fw = problem.objective(w)
        while problem.objective(w - t * delta) > fw and t > 1e-12:
            t *= 0.5
        w = w - t * delta
    return w


class TestGenLeastSquares:
    def test_noiseless_homogeneous(self):
        spec = sf.GenSpec("least_squares", m=3, d=4, n_i=20, seed=0,
                          noise_var=0.0, hetero_shift=0.0)
        problem = sf.generate(spec)
        assert sf.heterogeneity_measure(problem) == pytest.approx(0.0, abs=1e-18)
        for loss in problem.users:
            assert np.linalg.norm(loss.gradient(problem.true_solution)) < 1e-9

    def test_heterogeneity_grows_with_noise_at_full_scale(self):
        hs = []
        for noise_var in (0.01, 0.25, 1.0):
            spec = sf.GenSpec("least_squares", m=25, d=100, n_i=5000, seed=5,
                              noise_var=noise_var)
            hs.append(sf.heterogeneity_measure(sf.generate(spec)))
        assert hs[0] > 0
        assert hs[0] < hs[1] < hs[2]

    def test_seeded_determinism(self):
        spec = sf.desk_least_squares(seed=11)
        a, b = sf.generate(spec), sf.generate(spec)
        for ua, ub in zip(a.users, b.users):
            assert np.array_equal(ua.A, ub.A)
            assert np.array_equal(ua.b, ub.b)
        assert np.array_equal(a.true_solution, b.true_solution)

    def test_shift_raises_heterogeneity(self):
        base = sf.generate(sf.GenSpec("least_squares", m=4, d=6, n_i=40, seed=2,
                                      noise_var=0.0))
        shifted = sf.generate(sf.GenSpec("least_squares", m=4, d=6, n_i=40, seed=2,
                                         noise_var=0.0, hetero_shift=0.5))
        assert sf.heterogeneity_measure(shifted) > sf.heterogeneity_measure(base)

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            sf.GenSpec("least_squares", m=0, d=2, n_i=3)
        with pytest.raises(ValueError):
            sf.GenSpec("least_squares", m=1, d=2, n_i=3, noise_var=-0.1)
        with pytest.raises(ValueError):
            sf.GenSpec("banana", m=1, d=2, n_i=3)


class TestGenLogistic:
    def test_balanced_labels_at_zero_parameter(self):
        spec = sf.GenSpec("logistic", m=1, d=5, n_i=10_000, seed=4)
        problem = gen_logistic(spec, w0=np.zeros(5))
        rate = float(np.mean(problem.users[0].y == 1.0))
        assert 0.47 <= rate <= 0.53

    def test_seeded_determinism(self):
        spec = sf.GenSpec("logistic", m=2, d=4, n_i=50, seed=9)
        a, b = sf.generate(spec), sf.generate(spec)
        for ua, ub in zip(a.users, b.users):
            assert np.array_equal(ua.A, ub.A)
            assert np.array_equal(ua.y, ub.y)

    def test_solution_beats_generator_parameter_and_origin(self):
        spec = sf.GenSpec("logistic", m=2, d=6, n_i=300, seed=12)
        rng = np.random.default_rng(spec.seed)
        w0 = rng.standard_normal(spec.d)  # first draw, as in the generator
        problem = sf.generate(spec)
        at_solution = problem.objective(problem.true_solution)
        assert at_solution <= problem.objective(w0)
        assert at_solution <= problem.objective(np.zeros(spec.d))

    def test_reg_weight_matches_per_user_penalty(self):
        spec = sf.GenSpec("logistic", m=4, d=3, n_i=25, seed=1)
        problem = sf.generate(spec)
        for loss in problem.users:
            assert loss.reg_weight == pytest.approx(1.0 / (4 * 25))


class TestSolveGlobalLS:
    def test_single_square_user(self):
        rng = np.random.default_rng(3)
        A = rng.standard_normal((4, 4))
        b = rng.standard_normal(4)
        problem = sf.FederatedProblem([sf.Quadratic(A, b)], np.array([1.0]), 4)
        assert_allclose(sf.solve_global_ls(problem), np.linalg.solve(A, b), atol=1e-9)

    def test_duplicated_user_changes_nothing(self):
        rng = np.random.default_rng(4)
        A = rng.standard_normal((10, 3))
        b = rng.standard_normal(10)
        one = sf.FederatedProblem([sf.Quadratic(A, b)], np.array([1.0]), 3)
        two = sf.FederatedProblem([sf.Quadratic(A, b), sf.Quadratic(A, b)],
                                  np.array([0.5, 0.5]), 3)
        assert_allclose(sf.solve_global_ls(one), sf.solve_global_ls(two), atol=1e-12)

    def test_stationarity(self, desk_ls):
        g = desk_ls.objective_gradient(desk_ls.true_solution)
        assert np.linalg.norm(g) <= 1e-8


@pytest.fixture(scope="module")
def tiny():
    return sf.generate(sf.GenSpec("logistic", m=2, d=2, n_i=25, seed=3))


class TestOracleLogistic:
    def test_agrees_with_newton(self, tiny):
        newton = _newton_logistic(tiny)
        assert np.linalg.norm(tiny.true_solution - newton) < 1e-7

    def test_start_independent(self, tiny):
        a = oracle_logistic(tiny, tol=1e-10, w_init=np.zeros(2))
        b = oracle_logistic(tiny, tol=1e-10, w_init=np.array([3.0, -2.0]))
        assert np.linalg.norm(a - b) < 1e-7

    def test_stopping_rule(self, tiny):
        sol = oracle_logistic(tiny, tol=1e-8)
        assert np.linalg.norm(tiny.objective_gradient(sol)) <= 1e-8

    def test_rejects_non_logistic(self, small_ls):
        with pytest.raises(ValueError, match="logistic"):
            oracle_logistic(small_ls)


class TestFedAvgFixedPoint:
    def test_k1_reduces_to_normal_equations(self, small_ls):
        w_ls = sf.solve_global_ls(small_ls)
        for eta in (1e-6, 1e-3, 10.0):
            fp = sf.fedavg_fixed_point(small_ls, eta, 1)
            assert np.linalg.norm(fp - w_ls) < 1e-8

    def test_simulation_agrees_with_formula(self, small_ls):
        eta, k = 1e-3, 3
        fp = sf.fedavg_fixed_point(small_ls, eta, k)
        params = sf.preset("FedAvg", eta=sf.Schedule.constant(eta), k=k)
        state = sf.run_scheme(small_ls, params, rounds=2000)
        assert np.linalg.norm(state.u[0] - fp) < 1e-6

    def test_equal_eta_k_products_nearly_agree(self, small_ls):
        fps = [sf.fedavg_fixed_point(small_ls, eta, k)
               for eta, k in [(1e-4, 7), (2e-4, 4), (6e-4, 2)]]
        for i in range(len(fps)):
            for j in range(i + 1, len(fps)):
                rel = np.linalg.norm(fps[i] - fps[j]) / np.linalg.norm(fps[i])
                assert rel < 1e-3

    def test_divergence_precondition(self, small_ls):
        with pytest.raises(ValueError, match="eta too large"):
            sf.fedavg_fixed_point(small_ls, 1.0, 2)


class TestTaylorFixedPoint:
    def test_zero_product_is_global_solution(self, small_ls):
        assert_allclose(sf.taylor_fixed_point(small_ls, 0.0),
                        sf.solve_global_ls(small_ls), atol=1e-10)

    def test_quadratic_order_of_accuracy(self, small_ls):
        k = 4
        errs = []
        for eta in (4e-4, 2e-4):
            fp = sf.fedavg_fixed_point(small_ls, eta, k)
            ty = sf.taylor_fixed_point(small_ls, eta * (k - 1))
            errs.append(np.linalg.norm(fp - ty) / np.linalg.norm(fp))
        assert errs[0] / errs[1] >= 4.0

    def test_monotone_drift_from_truth(self, small_ls):
        w_ls = sf.solve_global_ls(small_ls)
        gaps = [np.linalg.norm(sf.taylor_fixed_point(small_ls, s) - w_ls)
                for s in (0.0, 1e-4, 4e-4, 1.6e-3)]
        assert all(a < b for a, b in zip(gaps, gaps[1:]))


class TestHeterogeneity:
    def test_doubling_residuals_quadruples(self, small_ls):
        h1 = sf.heterogeneity_measure(small_ls)
        w = small_ls.true_solution
        scaled_users = []
        for loss in small_ls.users:
            residual = loss.b - loss.A @ w
            scaled_users.append(sf.Quadratic(loss.A, loss.A @ w + 2 * residual))
        scaled = sf.FederatedProblem(scaled_users, small_ls.weights, small_ls.dim)
        # doubling residuals about the optimum preserves the optimum itself
        scaled.true_solution = sf.solve_global_ls(scaled)
        assert_allclose(scaled.true_solution, w, atol=1e-9)
        assert sf.heterogeneity_measure(scaled) == pytest.approx(4 * h1, rel=1e-9)

    def test_requires_solution(self):
        problem = sf.FederatedProblem([sf.NegPartQuadratic()], np.array([1.0]), 1)
        with pytest.raises(ValueError, match="reference solution"):
            sf.heterogeneity_measure(problem)


class TestFedProxFixedPoint:
    def test_is_stationary_for_envelope_objective(self, desk_ls):
        eta = 1e-2
        w = sf.fedprox_fixed_point(desk_ls, eta)
        assert np.linalg.norm(desk_ls.regularized_gradient(w, eta)) <= 1e-7

    def test_matches_long_run(self, small_ls):
        eta = 5e-3
        params = sf.preset("FedProx", eta=sf.Schedule.constant(eta))
        state = sf.run_scheme(small_ls, params, rounds=800)
        assert np.linalg.norm(state.u[0] - sf.fedprox_fixed_point(small_ls, eta)) < 1e-10

    def test_scalar_family(self, tightness_pair):
        eta = 0.1
        got = sf.fedprox_fixed_point(tightness_pair, eta)
        assert got[0] == pytest.approx(1.0 / (3 + 4 * eta), rel=1e-12)


class TestComputeMetrics:
    def test_zero_at_solution(self, small_ls):
        params = sf.preset("FedProx", eta=sf.Schedule.constant(1e-2))
        state = sf.init_state(small_ls, small_ls.true_solution)
        mm = sf.compute_metrics(state, small_ls, params, t=1)
        assert abs(mm.optimality_gap) < 1e-9
        assert mm.consensus_residual < 1e-12
        assert mm.regularized_gap is not None

    def test_gap_unchanged_by_balanced_block_shift(self, small_ls):
        rng = np.random.default_rng(8)
        params = sf.preset("FedProx", eta=sf.Schedule.constant(1e-2))
        state = sf.init_state(small_ls, rng.standard_normal(small_ls.dim))
        mm = sf.compute_metrics(state, small_ls, params, t=1)
        # shift blocks by a weighted-zero-mean perturbation: the consensus
        # point, hence the gap, must be exactly unaffected
        perturbation = rng.standard_normal((small_ls.m, small_ls.dim))
        perturbation -= sf.project_consensus(perturbation, small_ls.weights)
        state.w = state.w + perturbation
        mm2 = sf.compute_metrics(state, small_ls, params, t=1)
        xbar = sf.consensus_mean(state.w, small_ls.weights)
        assert mm2.optimality_gap == pytest.approx(
            small_ls.objective(xbar) - small_ls.true_optimum, abs=1e-12)
        assert mm2.optimality_gap == pytest.approx(mm.optimality_gap, abs=1e-8)
        assert mm2.consensus_residual > mm.consensus_residual

    def test_ergodic_gap_reported_when_enabled(self, small_ls):
        params = sf.preset("FedProx", eta=sf.Schedule.constant(1e-2),
                           ergodic_average=True)
        state = sf.run_scheme(small_ls, params, rounds=5)
        mm = sf.compute_metrics(state, small_ls, params, t=5)
        assert mm.ergodic_gap is not None
        xe = sf.consensus_mean(sf.ergodic_average(state), small_ls.weights)
        assert mm.ergodic_gap == pytest.approx(
            small_ls.objective(xe) - small_ls.true_optimum, abs=1e-12)
        plain = sf.preset("FedProx", eta=sf.Schedule.constant(1e-2))
        state2 = sf.run_scheme(small_ls, plain, rounds=5)
        assert sf.compute_metrics(state2, small_ls, plain, t=5).ergodic_gap is None

    def test_gap_slack_validation(self):
        with pytest.raises(ValueError, match="slack"):
            sf.RoundMetrics(t=1, objective=0.0, optimality_gap=-1e-3,
                            regularized_gap=None, consensus_residual=0.0,
                            eta=0.1, wall_ms=0.0, accelerated=False)

    def test_requires_oracles(self):
        problem = sf.FederatedProblem([sf.NegPartQuadratic()], np.array([1.0]), 1)
        params = sf.preset("FedProx", eta=sf.Schedule.constant(1.0))
        with pytest.raises(ValueError, match="oracle"):
            sf.compute_metrics(sf.init_state(problem), problem, params, t=1)


class TestProblemContainer:
    def test_round_trip_least_squares(self, tmp_path, small_ls):
        path = tmp_path / "problem.json"
        sf.save_problem(small_ls, path)
        loaded = sf.load_problem(path)
        assert loaded.dim == small_ls.dim
        assert np.array_equal(loaded.weights, small_ls.weights)
        assert np.array_equal(loaded.true_solution, small_ls.true_solution)
        assert loaded.true_optimum == small_ls.true_optimum
        assert loaded.gen == small_ls.gen
        for la, lb in zip(loaded.users, small_ls.users):
            assert np.array_equal(la.A, lb.A)
            assert np.array_equal(la.b, lb.b)

    def test_round_trip_all_variants(self, tmp_path):
        rng = np.random.default_rng(5)
        users = [
            sf.Quadratic(rng.standard_normal((3, 2)), rng.standard_normal(3)),
            sf.Logistic(rng.standard_normal((4, 2)),
                        np.where(rng.random(4) < 0.5, 1.0, -1.0), 0.25),
            sf.AbsoluteDeviation(rng.standard_normal(2)),
        ]
        problem = sf.FederatedProblem(users, np.full(3, 1 / 3), 2)
        path = tmp_path / "mixed.json"
        sf.save_problem(problem, path)
        loaded = sf.load_problem(path)
        assert np.array_equal(loaded.users[1].y, users[1].y)
        assert loaded.users[1].reg_weight == users[1].reg_weight
        assert np.array_equal(loaded.users[2].c, users[2].c)

    def test_rejects_foreign_files(self, tmp_path):
        path = tmp_path / "nope.json"
        path.write_text('{"format": "something-else"}')
        with pytest.raises(ValueError, match="not a"):
            sf.load_problem(path)
