import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dynafed.errors import CannotFitError, ConfigError, ValidationError
from dynafed.federation import LabeledDataset
from dynafed.harness.data import BlobsSpec, generate_blobs
from dynafed.model import MlpSpec, init_params
from dynafed.numerics import Rng, finite_difference, max_relative_error
from dynafed.theory import (
    ScheduleConfig,
    biased_surrogate,
    convex_probes,
    estimate_assumptions,
    estimate_bias_constants,
    estimate_bias_constants_fn,
    fit_bias_envelope,
    fit_loglog_slope,
    make_logistic_task,
    make_quadratic_task,
    mlp_gradient,
    probe_points,
    run_convex_convergence,
    simulate,
)


@pytest.fixture(scope="module")
def quad():
    return make_quadratic_task(Rng(0), d=10, cond=20, M=3, samples=10)


def test_slope_of_exact_power_laws():
    t = np.arange(1, 10_001, dtype=float)
    assert fit_loglog_slope(3.0 / t) == pytest.approx(-1.0, abs=1e-12)
    assert fit_loglog_slope(0.2 / np.sqrt(t)) == pytest.approx(-0.5, abs=1e-12)


def test_slope_rejects_non_positive():
    with pytest.raises(CannotFitError):
        fit_loglog_slope(np.array([1.0, 0.5, 0.0, 0.1]))
    with pytest.raises(CannotFitError):
        fit_loglog_slope(np.array([1.0]))


def test_quadratic_task_optimum(quad):
    assert np.linalg.norm(quad.grad(quad.w_star)) < 1e-10
    assert quad.suboptimality(quad.w_star) == 0.0
    assert np.allclose(quad.z.mean(axis=1), 0.0, atol=1e-14)
    assert quad.mu >= 0.99 and quad.L_smooth / quad.mu == pytest.approx(20.0, rel=0.05)


def test_quadratic_gradient_matches_fd(quad):
    w = np.random.default_rng(0).standard_normal(quad.d)
    assert max_relative_error(quad.grad(w), finite_difference(quad.loss, w, 1e-5)) < 1e-6


def test_logistic_task():
    task = make_logistic_task(Rng(1), n=200, d=5, M=3)
    assert np.linalg.norm(task.grad(task.w_star)) < 1e-10
    w = np.random.default_rng(1).standard_normal(5)
    assert max_relative_error(task.grad(w), finite_difference(task.loss, w, 1e-6)) < 1e-6
    assert task.suboptimality(w) > 0


def test_exact_single_client_without_server_steps_is_gradient_descent():
    task = make_quadratic_task(Rng(2), d=6, cond=10, M=1, samples=1, noise=0.0)
    sched = ScheduleConfig(c=0.5, gamma=10, tau1=3, tau2=0)
    sur = biased_surrogate(task, 0.0, 0.0, Rng(0))
    out = simulate(task, sched, sur, 50, Rng(0), exact=True)
    w = np.zeros(task.d)
    for t in range(50):
        w = w - sched.eta(t) * task.grad(w)
        assert out[t] == pytest.approx(task.suboptimality(w), abs=1e-10)


def test_unbiased_surrogate_keeps_optimum_fixed(quad):
    sur = biased_surrogate(quad, 0.0, 0.0, Rng(0))
    assert np.allclose(sur.grad(quad.w_star), 0.0, atol=1e-10)


def test_convergence_decreases(quad):
    sched = ScheduleConfig(c=2.0, gamma=50)
    sur = biased_surrogate(quad, 0.01, 0.0, Rng(0))
    res = run_convex_convergence(quad, sched, sur, T=2000, seeds=(0, 1))
    assert np.all(res.per_seed >= 0)
    assert res.mean[-1] * 100 < res.mean[0]
    assert res.flags["bias_hypothesis_ok"]


def test_schedule_check():
    sched = ScheduleConfig(c=4.0)
    assert sched.check(1.0, 10.0, 0.01)["bias_hypothesis_ok"]
    flags = sched.check(1.0, 10.0, 0.5)
    assert not flags["bias_hypothesis_ok"] and flags["mu_tilde"] == pytest.approx(0.9)
    with pytest.raises(ConfigError):
        ScheduleConfig(c=1.0).check(1.0, 10.0, 0.0)
    with pytest.raises(ConfigError):
        ScheduleConfig(tau1=0)


def test_surrogate_constants_are_recovered(quad):
    sur = biased_surrogate(quad, 0.02, 0.3, Rng(4))
    est = estimate_assumptions(quad, sur, convex_probes(quad, Rng(5), n=60))
    assert est.delta <= 0.02 + 1e-9 and est.epsilon <= 0.3 + 1e-9
    assert est.delta + est.epsilon > 0
    assert np.all(est.sigma_m > 0) and est.G > 0


def test_envelope_exact_cases():
    assert tuple(fit_bias_envelope([0.0, 0.0], [1.0, 2.0])) == (0.0, 0.0)
    with pytest.raises(CannotFitError):
        fit_bias_envelope([1.0, 2.0], [0.0, 0.0])
    with pytest.raises(ValidationError):
        fit_bias_envelope([-1.0], [1.0])


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 10), st.floats(0.01, 10)), min_size=2, max_size=30), st.randoms())
def test_envelope_dominates_and_ignores_order(pairs, rnd):
    r = np.array([p[0] for p in pairs])
    a = np.array([p[1] for p in pairs])
    fit = fit_bias_envelope(r, a)
    assert fit.delta >= 0 and fit.epsilon >= 0
    assert np.all(fit.delta * a + fit.epsilon >= r)
    perm = list(range(len(pairs)))
    rnd.shuffle(perm)
    again = fit_bias_envelope(r[perm], a[perm])
    assert (again.delta, again.epsilon) == (fit.delta, fit.epsilon)


def test_linear_residuals_give_pure_delta():
    a = np.linspace(0.5, 5.0, 20)
    fit = fit_bias_envelope(0.3 * a, a)
    assert fit.delta == pytest.approx(0.3, abs=1e-9)
    assert fit.epsilon == pytest.approx(0.0, abs=1e-9)


@pytest.fixture(scope="module")
def mlp_setup():
    data = generate_blobs(BlobsSpec(K=3, d=2, per_class=20), Rng(0))
    spec = MlpSpec((2, 6, 3))
    ckpts = [init_params(spec, Rng(s)) for s in range(3)]
    return data, spec, probe_points(ckpts, 12, 0.5, Rng(1))


def test_identical_data_gives_zero_constants(mlp_setup):
    data, spec, probes = mlp_setup
    assert tuple(estimate_bias_constants(data, data, spec, probes)) == (0.0, 0.0)


def test_permuted_labels_give_positive_bias(mlp_setup):
    data, spec, probes = mlp_setup
    perm = np.random.default_rng(0).permutation(data.n)
    shuffled = LabeledDataset(data.X, data.labels[perm], data.K)
    fit = estimate_bias_constants(shuffled, data, spec, probes)
    assert fit.delta + fit.epsilon > 0


def test_mlp_envelope_dominates_every_probe(mlp_setup):
    data, spec, probes = mlp_setup
    rng = np.random.default_rng(2)
    other = (data.X + 0.3 * rng.standard_normal(data.X.shape), data.targets)
    fit = estimate_bias_constants(other, data, spec, probes)
    for w in probes:
        gt = mlp_gradient(w, data)
        gap = np.linalg.norm(mlp_gradient(w, other) - gt)
        assert gap <= fit.delta * np.linalg.norm(gt) + fit.epsilon + 1e-12


def test_bias_constants_need_enough_probes(mlp_setup):
    data, spec, probes = mlp_setup
    with pytest.raises(ValidationError):
        estimate_bias_constants(data, data, spec, probes[:5])


def test_function_envelope_probe_order(quad):
    sur = biased_surrogate(quad, 0.05, 0.1, Rng(3))
    probes = convex_probes(quad, Rng(6), n=20)
    a = estimate_bias_constants_fn(sur.grad, quad.grad, probes)
    b = estimate_bias_constants_fn(sur.grad, quad.grad, probes[::-1])
    assert (a.delta, a.epsilon) == (b.delta, b.epsilon)
