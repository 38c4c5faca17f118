import math

import numpy as np
import pytest
import scipy.linalg

from core.errors import InvalidParameterError
from core.models import ABConstants, ComplexityQuery, GroupSpec, Objective, SmoothnessConstants
from services.analysis import (
    comm_complexity,
    constants_report,
    ef21_params,
    ef21_topk,
    eig_extreme,
    empirical_hessian_variance,
    group_constants,
    group_stepsize,
    marina_permk,
    marina_randk,
    marina_stepsize,
    optimal_params,
    quadratic_constants,
    sampled_constants,
)
from services.quadratic import DenseQuadraticTask
from tests.conftest import dense_task, random_family

CONSTANTS = SmoothnessConstants(l_minus=1.0, l_plus=1.5, l_pm=1.2, mu=0.01)


class TestEigenvalues:
    def test_power_iteration_matches_dense_solver(self, rng):
        matrix = random_family(rng, 1, 10)[0]
        values = scipy.linalg.eigvalsh(matrix)
        assert eig_extreme(lambda v: matrix @ v, 10, "max") == pytest.approx(values[-1], rel=1e-6)
        assert eig_extreme(lambda v: matrix @ v, 10, "min") == pytest.approx(values[0], rel=1e-6)

    def test_scaled_identity_short_circuits(self):
        assert eig_extreme(lambda v: 3.0 * v, 5) == 3.0

    @pytest.mark.parametrize(
        "matrix, which, expected, tol",
        [
            (np.eye(3), "max", 1.0, 1e-12),
            (np.eye(3), "min", 1.0, 1e-12),
            (np.diag([1.0, 2.0, 5.0]), "max", 5.0, 1e-10),
            (np.diag([1.0, 2.0, 5.0]), "min", 1.0, 1e-10),
            (scipy.linalg.toeplitz([2.0, -1.0, 0.0]) / 4, "max", (2 + math.sqrt(2)) / 4, 1e-8),
            (scipy.linalg.toeplitz([2.0, -1.0, 0.0]) / 4, "min", (2 - math.sqrt(2)) / 4, 1e-8),
        ],
        ids=["identity-max", "identity-min", "diag-max", "diag-min", "stencil-max", "stencil-min"],
    )
    def test_known_spectra(self, matrix, which, expected, tol):
        assert eig_extreme(lambda v: matrix @ v, 3, which) == pytest.approx(expected, abs=tol)

    def test_bad_arguments(self):
        with pytest.raises(InvalidParameterError):
            eig_extreme(lambda v: v, 3, "middle")
        with pytest.raises(InvalidParameterError):
            eig_extreme(lambda v: v, 3, tol=0.0)


class TestHessianVariance:
    def test_identical_matrices_have_zero_variance(self, rng):
        family = np.repeat(random_family(rng, 1, 5), 4, axis=0)
        assert quadratic_constants(family).l_pm == pytest.approx(0.0, abs=1e-7)

    def test_closed_form_bounds_and_meets_sampled_variance(self, rng):
        for _ in range(50):
            n = int(rng.integers(1, 6))
            d = int(rng.integers(1, 9))
            task = dense_task(rng, n, d)
            constants = quadratic_constants(task.matrices)
            assert constants.exact

            sampled = empirical_hessian_variance(task, samples=1000, seed=int(rng.integers(1 << 30)))
            assert sampled <= constants.l_pm**2 * (1 + 1e-9) + 1e-12

            mean = task.matrices.mean(axis=0)
            second = np.mean([a @ a for a in task.matrices], axis=0)
            _, vectors = scipy.linalg.eigh(second - mean @ mean)
            targeted = empirical_hessian_variance(task, samples=10, directions=[vectors[:, -1]])
            assert targeted == pytest.approx(constants.l_pm**2, rel=0.05, abs=1e-12)

    def test_chain_is_enforced(self):
        with pytest.raises(ValueError):
            SmoothnessConstants(l_minus=2.0, l_plus=1.0, l_pm=1.0)
        with pytest.raises(ValueError):
            SmoothnessConstants(l_minus=0.1, l_plus=1.0, l_pm=0.2)

    def test_asymmetric_family_rejected(self):
        with pytest.raises(InvalidParameterError):
            quadratic_constants(np.array([[[1.0, 2.0], [0.0, 1.0]]]))

    def test_group_constants_split_the_family(self, rng):
        shared = random_family(rng, 1, 4)[0]
        family = np.stack([shared, shared, shared + np.eye(4), shared - np.eye(4)])
        first, second = group_constants(family, [[0, 1], [2, 3]])
        assert first.l_pm == pytest.approx(0.0, abs=1e-7)
        assert second.l_pm == pytest.approx(1.0, rel=1e-9)

    def test_sampled_constants_are_pessimistic(self, rng):
        task = dense_task(rng, 3, 4)
        constants = sampled_constants(task, samples=50)
        assert not constants.exact
        assert constants.l_pm == constants.l_plus
        local = [scipy.linalg.eigvalsh(a @ a)[-1] for a in task.matrices]
        assert constants.l_plus <= math.sqrt(np.mean(local)) * (1 + 1e-9)


class TestStepsizes:
    def test_marina_full_sync_is_gradient_descent(self):
        gamma = marina_stepsize(CONSTANTS, ABConstants(A=1.0, B=1.0), 1.0)
        assert gamma == pytest.approx(1.0)

    def test_marina_nonconvex_formula(self):
        gamma = marina_stepsize(CONSTANTS, ABConstants(A=1.0, B=1.0), 0.1)
        assert gamma == pytest.approx(1.0 / (1.0 + math.sqrt(9.0 * 1.44)))

    def test_marina_pl_is_capped(self):
        gamma = marina_stepsize(CONSTANTS, ABConstants(A=1.0, B=1.0), 0.001, Objective.PL)
        assert gamma <= 0.001 / (2 * 0.01)

    def test_bad_probability(self):
        with pytest.raises(InvalidParameterError):
            marina_stepsize(CONSTANTS, ABConstants(A=1.0, B=1.0), 0.0)

    def test_ef21_identity_compressor(self):
        params = ef21_params(1.0, CONSTANTS)
        assert (params.theta, params.beta) == (1.0, 0.0)
        assert params.gamma == pytest.approx(1.0)

    def test_ef21_half_contraction(self):
        params = ef21_params(0.5, CONSTANTS)
        root = math.sqrt(0.5)
        assert params.theta == pytest.approx(1 - root)
        assert params.beta == pytest.approx(0.5 / (1 - root))
        assert params.gamma == pytest.approx(1 / (1.0 + 1.5 * math.sqrt(params.beta / params.theta)))

    def test_single_group_matches_marina(self):
        group = GroupSpec(size=5, A=1.0, B=1.0, l_plus=1.5, l_pm=1.2)
        assert group_stepsize([group], 1.0, 0.2) == pytest.approx(
            marina_stepsize(CONSTANTS, ABConstants(A=1.0, B=1.0), 0.2)
        )

    def test_group_sizes_must_cover_workers(self):
        group = GroupSpec(size=2, A=1.0, B=1.0, l_plus=1.0, l_pm=1.0)
        with pytest.raises(InvalidParameterError):
            group_stepsize([group], 1.0, 0.5, n=3)

    @pytest.mark.parametrize("objective", [Objective.NONCONVEX, Objective.PL])
    def test_marina_nonincreasing_in_omega(self, objective):
        omegas = [0.0, 0.5, 1.0, 4.0, 9.0, 99.0]
        gammas = [
            marina_stepsize(CONSTANTS, ABConstants(A=w / 10, B=0.0), 0.1, objective) for w in omegas
        ]
        assert all(a >= b for a, b in zip(gammas, gammas[1:]))

    @pytest.mark.parametrize("objective", [Objective.NONCONVEX, Objective.PL])
    def test_marina_nonincreasing_in_hessian_variance(self, objective):
        gammas = [
            marina_stepsize(
                SmoothnessConstants(l_minus=1.0, l_plus=1.0, l_pm=l_pm, mu=0.01),
                ABConstants(A=1.0, B=1.0),
                0.1,
                objective,
            )
            for l_pm in (0.0, 0.25, 0.5, 1.0)
        ]
        assert gammas[0] == pytest.approx(1.0)
        assert all(a >= b for a, b in zip(gammas, gammas[1:]))
        assert gammas[-1] < gammas[0]

    @pytest.mark.parametrize("alpha", [0.1, 0.5, 0.75, 0.9])
    def test_ef21_contraction_identity(self, alpha):
        params = ef21_params(alpha, CONSTANTS)
        s_star = 1 / math.sqrt(1 - alpha) - 1
        assert params.theta + (1 - alpha) * (1 + s_star) == pytest.approx(1.0, abs=1e-12)
        assert params.beta == pytest.approx((1 - alpha) * (1 + 1 / s_star))
        assert math.sqrt(params.beta / params.theta) <= 2 / alpha - 1 + 1e-12

    def test_ef21_three_quarter_contraction(self):
        params = ef21_params(0.75, CONSTANTS)
        assert params.theta == pytest.approx(0.5)
        assert params.beta == pytest.approx(0.5)

    @pytest.mark.parametrize("p", [0.1, 0.5])
    def test_two_identical_groups_recover_gradient_descent(self, p):
        groups = [GroupSpec(size=5, A=1.0, B=1.0, l_plus=1.5, l_pm=0.0)] * 2
        assert group_stepsize(groups, 1.0, p, n=10) == pytest.approx(1.0)

    @pytest.mark.parametrize("p", [0.1, 0.5])
    def test_singleton_groups_match_independent_compressors(self, p):
        omega, l_pluses = 4.0, [1.0, 2.0, 3.0]
        groups = [GroupSpec(size=1, A=omega, B=0.0, l_plus=value, l_pm=0.0) for value in l_pluses]
        mean_sq = float(np.mean(np.square(l_pluses)))
        expected = 1 / (1.0 + math.sqrt((1 - p) / p * omega / 3 * mean_sq))
        assert group_stepsize(groups, 1.0, p, n=3) == pytest.approx(expected)
        constants = SmoothnessConstants(l_minus=1.0, l_plus=math.sqrt(mean_sq), l_pm=math.sqrt(mean_sq))
        assert group_stepsize(groups, 1.0, p) == pytest.approx(
            marina_stepsize(constants, ABConstants(A=omega / 3, B=0.0), p)
        )


class TestComplexity:
    def query(self, d=100, n=10, objective=Objective.NONCONVEX, eps=1e-3):
        return ComplexityQuery(objective=objective, constants=CONSTANTS, d=d, n=n, delta0=2.0, eps=eps)

    def test_full_sync_choices_agree(self):
        query = self.query()
        expected = 2.0 / 1e-3 * 100 * 1.0
        assert comm_complexity(query, marina_permk(1.0)).value == pytest.approx(expected)
        assert comm_complexity(query, marina_randk(1.0, 7)).value == pytest.approx(expected)
        assert comm_complexity(query, ef21_topk(100)).value == pytest.approx(expected)

    def test_ef21_optimum_is_full_topk(self):
        result = optimal_params(self.query(), "ef21_topk")
        assert result.k == 100

    def test_permk_small_p_formula(self):
        result = comm_complexity(self.query(), marina_permk(0.1))
        payload = 0.1 * 100 + 0.9 * 10
        assert result.value == pytest.approx(2000.0 * payload * (1.0 + 3.0 * 1.2))
        assert not result.approximate

    def test_indivisible_permk_is_flagged(self):
        assert comm_complexity(self.query(d=101), marina_permk(0.1)).approximate

    def test_pl_accuracy_below_eps_costs_nothing(self):
        query = self.query(objective=Objective.PL, eps=5.0)
        assert comm_complexity(query, marina_permk(0.5)).value == 0.0

    def test_identical_functions_favor_permk(self):
        identical = SmoothnessConstants(l_minus=1.0, l_plus=1.0, l_pm=0.0)
        query = ComplexityQuery(constants=identical, d=100, n=10, delta0=1.0, eps=1e-2)
        permk = optimal_params(query, "marina_permk")
        randk = optimal_params(query, "marina_randk")
        assert permk.p == pytest.approx(0.1)
        assert permk.value == pytest.approx(100 * 19 * 1.0)
        assert permk.value < randk.value

    def test_permk_at_one_over_n_meets_its_bound(self):
        constants = SmoothnessConstants(l_minus=1.0, l_plus=1.0, l_pm=0.1)
        query = ComplexityQuery(constants=constants, d=1000, n=10, delta0=1.0, eps=1e-3)
        value = comm_complexity(query, marina_permk(0.1)).value
        assert value <= 2 / 1e-3 * (1000 * 1.0 / 10 + 1000 * 0.1 / math.sqrt(10))

    @pytest.mark.parametrize(
        "d, n, l_plus, l_pm",
        [(1000, 10, 1.0, 0.1), (100, 10, 1.0, 1.0), (100, 2, 1.0, 1.0), (64, 16, 1.2, 0.7)],
    )
    def test_permk_at_one_over_n_within_twice_full_sync(self, d, n, l_plus, l_pm):
        constants = SmoothnessConstants(l_minus=1.0, l_plus=l_plus, l_pm=l_pm)
        query = ComplexityQuery(constants=constants, d=d, n=n, delta0=1.0, eps=1e-3)
        full = comm_complexity(query, marina_permk(1.0)).value
        assert comm_complexity(query, marina_permk(1 / n)).value <= 2 * full * (1 + 1e-12)
        assert optimal_params(query, "marina_permk").value <= full

    @pytest.mark.parametrize("n", [16, 100])
    def test_permk_advantage_without_hessian_variance(self, n):
        identical = SmoothnessConstants(l_minus=1.0, l_plus=1.0, l_pm=0.0)
        query = ComplexityQuery(constants=identical, d=1000, n=n, delta0=1.0, eps=1e-2)
        permk = optimal_params(query, "marina_permk")
        randk = optimal_params(query, "marina_randk")
        assert randk.value / permk.value >= math.sqrt(n) / 2

    @pytest.mark.parametrize("d", [1, 10, 100])
    def test_single_worker_methods_agree(self, d):
        flat = SmoothnessConstants(l_minus=1.0, l_plus=1.0, l_pm=1.0)
        query = ComplexityQuery(constants=flat, d=d, n=1, delta0=1.0, eps=1e-2)
        methods = ("marina_permk", "marina_randk", "ef21_topk")
        values = [optimal_params(query, method).value for method in methods]
        assert max(values) <= 4 * min(values)

    def test_report_lists_every_method(self):
        report = constants_report(CONSTANTS, n=10, d=100, delta0=2.0, eps=1e-3)
        for objective in ("nonconvex", "pl"):
            for method in ("marina_permk", "marina_randk", "ef21_topk"):
                assert f"{objective}_{method}_floats" in report
        assert report["l_pm"] == 1.2


def test_dense_task_oracle_is_used_for_variance(rng):
    task = DenseQuadraticTask(np.stack([np.eye(3), 3 * np.eye(3)]), np.zeros((2, 3)), np.zeros(3))
    assert empirical_hessian_variance(task, samples=20) == pytest.approx(1.0)
