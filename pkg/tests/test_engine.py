import numpy as np
import pytest

from core.errors import DivergenceError, InvalidParameterError
from core.models import CompressorKind, CompressorSpec, Method, Objective, RunConfig
from services.analysis import ef21_params, marina_stepsize
from services.compressors import ab_constants
from services.engine import MarinaEngine, averaged_grad_norm, run_gd, run_method, theory_check
from services.quadratic import f_star_quadratic, generate_quadratic

PERMK = CompressorSpec(kind=CompressorKind.PERMK)


def marina_config(spec=PERMK, **kwargs):
    return RunConfig(method=Method.MARINA, compressor=spec, **kwargs)


def ef21_config(k, **kwargs):
    return RunConfig(method=Method.EF21, compressor=CompressorSpec(kind=CompressorKind.TOPK, k=k), **kwargs)


def same_columns(first, second, names=("grad_norm_sq", "f_value", "cum_floats_per_node")):
    return all(np.array_equal(first.column(name), second.column(name)) for name in names)


class TestReductions:
    def test_marina_with_full_sync_every_round_is_gradient_descent(self, small_task):
        gamma = 1.0 / small_task.constants().l_minus
        marina = run_method(small_task, marina_config(gamma=gamma, p=1.0, T=100))
        gd = run_gd(small_task, gamma, 100)
        assert same_columns(marina, gd)
        assert marina.column("theta")[1:].tolist() == [1] * 100

    def test_ef21_with_full_topk_is_gradient_descent(self, small_task):
        gamma = 1.0 / small_task.constants().l_minus
        ef21 = run_method(small_task, ef21_config(small_task.d, gamma=gamma, T=100))
        gd = run_gd(small_task, gamma, 100)
        assert same_columns(ef21, gd)
        assert not np.any(ef21.extra("memory_error"))

    def test_permk_on_identical_workers_tracks_the_true_gradient(self, identical_task):
        trace = run_method(identical_task, marina_config(gamma=0.5, p=0.1, T=100, master_seed=4))
        assert np.sqrt(trace.extra("estimator_error").max()) <= 1e-10
        assert trace.extra("consistency_gap").max() <= 1e-12

    def test_engine_rejects_a_foreign_method(self, small_task):
        with pytest.raises(InvalidParameterError):
            MarinaEngine(small_task, RunConfig(method=Method.GD, gamma=0.1))


class TestMetering:
    def test_expected_payload_per_round(self, identical_task):
        T = 10_000
        trace = run_method(identical_task, marina_config(gamma=1e-3, p=0.1, T=T, master_seed=11))
        syncs = int(trace.column("theta")[1:].sum())
        assert trace.final.cum_floats_per_node == 100 * syncs + 10 * (T - syncs)
        assert trace.final.cum_bits_per_node == 32 * trace.final.cum_floats_per_node
        standard_error = np.sqrt(0.1 * 0.9) * 90 / np.sqrt(T)
        assert abs(trace.final.cum_floats_per_node / T - 19.0) <= 3 * standard_error

    def test_round_zero_is_free(self, small_task):
        trace = run_gd(small_task, 0.1, 3)
        assert trace.records[0].cum_floats_per_node == 0
        assert trace.column("cum_floats_per_node").tolist() == [0, 6, 12, 18]

    def test_index_bits_are_charged(self, small_task):
        trace = run_method(small_task, ef21_config(2, gamma=0.1, T=2, index_bits=True))
        assert trace.records[1].cum_bits_per_node == 2 * 32 + 2 * 3

    def test_indivisible_permk_meters_the_largest_upload(self):
        task = generate_quadratic(3, 7, 1e-2, 0.0, seed=5)
        T = 50
        trace = run_method(task, marina_config(gamma=1e-3, p=1e-9, T=T, master_seed=2))
        assert not trace.column("theta")[1:].any()
        assert trace.metadata["cum_floats_aggregate"] == "max_over_workers"
        assert trace.final.cum_floats_per_node == 3 * T
        assert trace.metadata["cum_floats_max_per_node"] == 3 * T
        assert trace.metadata["cum_floats_mean_per_node"] == pytest.approx(7 / 3 * T)

    def test_thread_pool_does_not_change_the_trace(self, small_task):
        serial = run_method(small_task, marina_config(gamma=0.2, p=0.3, T=50, master_seed=2))
        threaded = run_method(small_task, marina_config(gamma=0.2, p=0.3, T=50, master_seed=2, threads=4))
        assert same_columns(serial, threaded, ("grad_norm_sq", "f_value", "theta", "cum_bits_per_node"))


class TestGradientDescent:
    def test_zero_stepsize_stays_put(self, small_task):
        trace = run_gd(small_task, 0.0, 5)
        assert len(set(trace.column("grad_norm_sq").tolist())) == 1

    def test_zero_rounds(self, small_task):
        trace = run_gd(small_task, 0.1, 0)
        assert trace.rounds == 0
        assert trace.x_hat_index == 0
        assert np.array_equal(trace.x_hat, small_task.x0)

    def test_descent_at_one_over_l(self, small_task):
        trace = run_gd(small_task, 1.0 / small_task.constants().l_minus, 200)
        values = trace.column("f_value")
        assert np.all(np.diff(values) <= 1e-12)
        assert trace.column("theta").tolist() == [1] * 201

    def test_x_hat_index_in_range(self, small_task):
        for seed in range(10):
            trace = run_gd(small_task, 0.1, 7, master_seed=seed)
            assert 0 <= trace.x_hat_index < 7
            assert trace.metadata["x_hat_index"] == trace.x_hat_index

    def test_divergence_keeps_the_partial_trace(self, small_task):
        with pytest.raises(DivergenceError) as info:
            run_gd(small_task, 100.0 / small_task.constants().l_minus, 200)
        assert info.value.round < 200
        assert info.value.trace is not None
        assert info.value.trace.rounds >= info.value.round - 1
        assert info.value.trace.metadata["diverged_round"] == info.value.round


class TestGuarantees:
    @pytest.mark.parametrize("noise_scale", [0.0, 0.2])
    @pytest.mark.parametrize(
        "spec", [PERMK, CompressorSpec(kind=CompressorKind.RANDK, k=5)], ids=["permk", "randk"]
    )
    def test_nonconvex_rate_on_a_small_task(self, noise_scale, spec):
        task = generate_quadratic(10, 50, 1e-3, noise_scale, seed=1)
        constants = task.constants()
        f_star, _ = f_star_quadratic(task)
        p = 0.1
        gamma = marina_stepsize(constants, ab_constants(spec, 10, 50), p)
        T = 1000
        traces = [
            run_method(task, marina_config(spec, gamma=gamma, p=p, T=T, master_seed=seed), f_star=f_star)
            for seed in range(10)
        ]
        delta0 = task.value(task.x0) - f_star
        assert averaged_grad_norm(traces, T=T) <= 2 * delta0 / (gamma * T)
        assert all(theory_check(trace, constants, gamma, T).passed for trace in traces)

    @pytest.mark.slow
    @pytest.mark.parametrize("noise_scale", [0.0, 0.2])
    def test_nonconvex_rate_on_seed_average(self, noise_scale):
        n, d, T = 10, 100, 2000
        task = generate_quadratic(n, d, 1e-6, noise_scale, seed=1)
        constants = task.constants()
        f_star, _ = f_star_quadratic(task)
        p = 1 / n
        gamma = marina_stepsize(constants, ab_constants(PERMK, n, d), p)
        traces = [
            run_method(task, marina_config(gamma=gamma, p=p, T=T, master_seed=seed), f_star=f_star)
            for seed in range(20)
        ]
        delta0 = task.value(task.x0) - f_star
        assert averaged_grad_norm(traces, T=T) <= 2 * delta0 / (gamma * T)

    @pytest.mark.parametrize("noise_scale", [0.0, 0.2])
    def test_pl_rate_at_every_round(self, noise_scale):
        n, d = 10, 100
        task = generate_quadratic(n, d, 1e-4, noise_scale, seed=1)
        constants = task.constants()
        assert constants.mu == 1e-4
        f_star, _ = f_star_quadratic(task)
        p = 1 / n
        gamma = marina_stepsize(constants, ab_constants(PERMK, n, d), p, Objective.PL)
        trace = run_method(task, marina_config(gamma=gamma, p=p, T=500, master_seed=3), f_star=f_star)
        report = theory_check(trace, constants, gamma, objective=Objective.PL)
        assert report.passed, report.violations

    def test_marina_estimator_variance_recursion(self, small_task):
        constants = small_task.constants()
        ab = ab_constants(PERMK, small_task.n, small_task.d)
        p = 0.2
        gamma = marina_stepsize(constants, ab, p)
        traces = [
            run_method(small_task, marina_config(gamma=gamma, p=p, T=10, master_seed=seed))
            for seed in range(200)
        ]
        errors = np.stack([trace.extra("estimator_error") for trace in traces])
        steps = np.stack([trace.extra("step_sq") for trace in traces])
        spread = (ab.A - ab.B) * constants.l_plus**2 + ab.B * constants.l_pm**2
        excess = errors[:, 1:] - (1 - p) * (errors[:, :-1] + spread * steps[:, 1:])
        slack = 3 * excess.std(axis=0, ddof=1) / np.sqrt(len(traces))
        assert np.all(excess.mean(axis=0) <= slack + 1e-15)

    def test_gradient_descent_pl_rate(self, small_task):
        constants = small_task.constants()
        f_star, _ = f_star_quadratic(small_task)
        gamma = 1.0 / constants.l_minus
        trace = run_gd(small_task, gamma, 100, f_star=f_star)
        assert theory_check(trace, constants, gamma, objective=Objective.PL).passed

    def test_ef21_nonconvex_rate(self, small_task):
        constants = small_task.constants()
        f_star, _ = f_star_quadratic(small_task)
        gamma = ef21_params(1 / 6, constants).gamma
        trace = run_method(small_task, ef21_config(1, gamma=gamma, T=300), f_star=f_star)
        report = theory_check(trace, constants, gamma)
        assert report.lhs_mean <= report.rhs

    @pytest.mark.parametrize("k", [1, 10])
    def test_ef21_memory_error_recursion(self, identical_task, k):
        constants = identical_task.constants()
        params = ef21_params(k / identical_task.d, constants)
        trace = run_method(identical_task, ef21_config(k, gamma=params.gamma, T=200))
        memory = trace.extra("memory_error")
        steps = trace.extra("step_sq")
        assert memory[1:].max() > 0
        bound = (1 - params.theta) * memory[:-1] + params.beta * constants.l_plus**2 * steps[1:]
        assert np.all(memory[1:] <= bound * (1 + 1e-9) + 1e-15)

    def test_ef21_memory_error_recursion_with_heterogeneous_workers(self, small_task):
        constants = small_task.constants()
        params = ef21_params(2 / 6, constants)
        trace = run_method(small_task, ef21_config(2, gamma=params.gamma, T=100))
        memory = trace.extra("memory_error")
        steps = trace.extra("step_sq")
        bound = (1 - params.theta) * memory[:-1] + params.beta * constants.l_plus**2 * steps[1:]
        assert np.all(memory[1:] <= bound * (1 + 1e-9) + 1e-15)

    def test_theory_check_needs_delta0(self, small_task):
        trace = run_gd(small_task, 0.1, 3)
        with pytest.raises(InvalidParameterError):
            theory_check(trace, small_task.constants(), 0.1)
