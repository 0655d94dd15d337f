import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dynafed.errors import InfeasiblePartitionError, ValidationError
from dynafed.federation import (
    LabeledDataset,
    OptimizerConfig,
    Partition,
    aggregate,
    dirichlet_partition,
    evaluate,
    fedprox_local_train,
    iid_partition,
    local_train,
    n_active,
    per_client_losses,
    prox_gradient,
    prox_penalty,
    round_plan,
    sample_clients,
)
from dynafed.harness.data import BlobsSpec, generate_blobs
from dynafed.model import MlpSpec, ParamVector, init_params, loss_value
from dynafed.numerics import Rng, finite_difference, max_relative_error


def _check_partition(p: Partition, n: int):
    allidx = np.concatenate(p.client_indices)
    assert allidx.size == n
    assert np.array_equal(np.sort(allidx), np.arange(n))
    assert all(ix.size > 0 for ix in p.client_indices)
    assert abs(p.weights.sum() - 1.0) <= 1e-12


@settings(max_examples=60, deadline=None)
@given(st.floats(0.01, 100.0), st.integers(1, 40), st.integers(0, 2**32 - 1))
def test_dirichlet_partition_invariants(alpha, M, seed):
    labels = np.repeat(np.arange(5), 30)
    p = dirichlet_partition(labels, M, alpha, Rng(seed), K=5)
    assert p.M == M
    _check_partition(p, labels.size)


def test_single_client_owns_everything():
    labels = np.arange(10) % 3
    p = dirichlet_partition(labels, 1, 0.5, Rng(0))
    assert p.weights[0] == 1.0
    assert p.client_indices[0].size == 10


def test_too_many_clients():
    with pytest.raises(InfeasiblePartitionError):
        dirichlet_partition(np.arange(5) % 2, 6, 1.0, Rng(0))


def test_partition_deterministic():
    labels = np.repeat(np.arange(4), 25)
    a = dirichlet_partition(labels, 7, 0.3, Rng(3))
    b = dirichlet_partition(labels, 7, 0.3, Rng(3))
    assert all(np.array_equal(x, y) for x, y in zip(a.client_indices, b.client_indices))


def _hist_stats(alpha, seeds=range(5)):
    labels = np.repeat(np.arange(10), 1000)
    tvs, ents = [], []
    for s in seeds:
        p = dirichlet_partition(labels, 10, alpha, Rng(s))
        st_ = p.stats(labels, 10)
        ents.append(st_["mean_label_entropy"])
        for h in st_["class_histograms"]:
            q = np.asarray(h) / sum(h)
            tvs.append(0.5 * np.abs(q - 0.1).sum())
    return max(tvs), float(np.mean(ents))


def test_large_alpha_is_near_uniform():
    tv, _ = _hist_stats(100.0)
    assert tv < 0.1


def test_small_alpha_is_skewed():
    _, ent = _hist_stats(0.01)
    assert ent < 0.5


def test_iid_partition():
    p = iid_partition(103, 10, Rng(0))
    _check_partition(p, 103)
    assert max(ix.size for ix in p.client_indices) - min(ix.size for ix in p.client_indices) <= 1


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 100), st.floats(0.01, 1.0), st.integers(0, 10_000))
def test_client_sampling(M, ratio, seed):
    active = sample_clients(M, ratio, Rng(seed))
    assert active.size == max(1, math.floor(ratio * M + 0.5)) == n_active(M, ratio)
    assert np.unique(active).size == active.size
    assert np.all(np.diff(active) > 0)
    assert active.min() >= 0 and active.max() < M


def test_round_plan_mass():
    labels = np.repeat(np.arange(3), 20)
    p = dirichlet_partition(labels, 6, 1.0, Rng(0))
    plan = round_plan(1, p, 0.5, Rng(1))
    assert 0 < plan.P <= 1
    assert plan.P == pytest.approx(p.weights[list(plan.active)].sum())


def test_partition_rejects_overlap():
    with pytest.raises(ValidationError):
        Partition(([0, 1], [1, 2]), 3)
    with pytest.raises(ValidationError):
        Partition(([0], []), 1)


# ------------------------------------------------------------ training

@pytest.fixture(scope="module")
def blobs():
    return generate_blobs(BlobsSpec(K=3, d=2, per_class=40), Rng(0))


def test_local_train_reduces_loss(blobs):
    spec = MlpSpec((2, 16, 3))
    w = init_params(spec, Rng(1))
    before = loss_value(w, blobs.X, blobs.targets)
    out = local_train(w, blobs, 5, OptimizerConfig(lr=1e-2, batch_size=16), Rng(2))
    assert loss_value(out, blobs.X, blobs.targets) < before


def test_local_train_deterministic(blobs):
    spec = MlpSpec((2, 8, 3))
    w = init_params(spec, Rng(1))
    a = local_train(w, blobs, 2, OptimizerConfig(), Rng(9))
    b = local_train(w, blobs, 2, OptimizerConfig(), Rng(9))
    assert np.array_equal(a.values, b.values)


def test_local_train_monotone_on_separable_toy():
    data = LabeledDataset(np.array([[-2.0, 0.0], [2.0, 0.0]] * 4), np.array([0, 1] * 4), 2)
    spec = MlpSpec((2, 2))
    w = ParamVector(spec, np.zeros(spec.n_params))
    losses = []
    for e in range(5):
        w = local_train(w, data, 1, OptimizerConfig(name="sgd", lr=0.1), Rng(e))
        losses.append(loss_value(w, data.X, data.targets))
    assert all(b <= a for a, b in zip(losses, losses[1:]))


def test_local_train_divergence_reports_position(blobs):
    spec = MlpSpec((2, 3))
    w = ParamVector(spec, np.ones(spec.n_params))
    big = LabeledDataset(blobs.X * 1e200, blobs.labels, 3)
    with pytest.raises(Exception) as info:
        local_train(w, big, 1, OptimizerConfig(name="sgd", lr=1e200, batch_size=16), Rng(0))
    assert getattr(info.value, "epoch", None) == 0
    assert getattr(info.value, "batch", None) is not None


def test_fedprox_zero_mu_equals_local_train(blobs):
    spec = MlpSpec((2, 8, 3))
    w = init_params(spec, Rng(1))
    a = local_train(w, blobs, 2, OptimizerConfig(), Rng(4))
    b = fedprox_local_train(w, blobs, 2, OptimizerConfig(), Rng(4), 0.0)
    assert np.array_equal(a.values, b.values)


def test_fedprox_large_mu_stays_at_anchor(blobs):
    spec = MlpSpec((2, 8, 3))
    w = init_params(spec, Rng(1))
    out = fedprox_local_train(w, blobs, 3, OptimizerConfig(name="sgd", lr=1e-7), Rng(4), 1e6)
    assert np.linalg.norm(out.values - w.values) < 1e-3


def test_prox_gradient_matches_fd():
    rng = np.random.default_rng(0)
    w, anchor = rng.standard_normal(6), rng.standard_normal(6)
    fd = finite_difference(lambda v: prox_penalty(v, anchor, 0.7), w, 1e-6)
    assert max_relative_error(prox_gradient(w, anchor, 0.7), fd) < 1e-8


def test_aggregate_examples():
    spec = MlpSpec((1, 1))
    one = ParamVector(spec, [0.3, -0.7])
    assert np.array_equal(aggregate([one, one, one], [0.1, 0.5, 0.4]).values, one.values)
    a, b = ParamVector(spec, [0.0, 0.0]), ParamVector(spec, [4.0, 4.0])
    assert np.allclose(aggregate([a, b], [0.25, 0.75]).values, [3.0, 3.0])
    ws = [ParamVector(spec, np.random.default_rng(i).standard_normal(2)) for i in range(4)]
    assert np.allclose(aggregate(ws, [0.25] * 4).values, aggregate(ws, mode="uniform").values)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0.01, 10.0), min_size=2, max_size=6), st.floats(0.1, 100.0))
def test_aggregate_scale_invariant(weights, c):
    spec = MlpSpec((2, 2))
    ws = [ParamVector(spec, np.random.default_rng(i).standard_normal(spec.n_params)) for i in range(len(weights))]
    a = aggregate(ws, weights).values
    b = aggregate(ws, [c * x for x in weights]).values
    assert np.allclose(a, b, rtol=1e-12, atol=1e-14)


def test_aggregate_errors():
    with pytest.raises(ValidationError):
        aggregate([])
    a = ParamVector(MlpSpec((1, 1)), [0.0, 0.0])
    b = ParamVector(MlpSpec((1, 2)), np.zeros(4))
    with pytest.raises(ValidationError):
        aggregate([a, b], [1, 1])


def test_evaluate_tie_rule_and_shift_invariance(blobs):
    spec = MlpSpec((2, 3))
    flat = ParamVector(spec, np.zeros(spec.n_params))
    loss, acc = evaluate(flat, blobs)
    assert acc == pytest.approx(np.mean(blobs.labels == 0))
    assert loss == pytest.approx(math.log(3))
    w = init_params(spec, Rng(3))
    W, b = w.layers()[0]
    shifted = ParamVector.from_layers(spec, [(W, b + 5.0)])
    assert evaluate(w, blobs)[1] == evaluate(shifted, blobs)[1]


def test_evaluate_reaches_full_accuracy_when_separable():
    data = generate_blobs(BlobsSpec(K=3, d=2, per_class=30, radius=5.0, std=0.1), Rng(1))
    w = init_params(MlpSpec((2, 16, 3)), Rng(0))
    for e in range(40):
        w = local_train(w, data, 1, OptimizerConfig(lr=3e-2, batch_size=32), Rng(e))
    assert evaluate(w, data)[1] == 1.0


def test_per_client_losses(blobs):
    p = dirichlet_partition(blobs.labels, 5, 0.5, Rng(0))
    spec = MlpSpec((2, 3))
    flat = ParamVector(spec, np.zeros(spec.n_params))
    assert np.allclose(per_client_losses(flat, p, blobs), math.log(3))
    w = init_params(MlpSpec((2, 6, 3)), Rng(2))
    pcl = per_client_losses(w, p, blobs)
    assert float(p.weights @ pcl) == pytest.approx(evaluate(w, blobs)[0], abs=1e-10)


def test_overfit_client_has_lower_loss(blobs):
    p = dirichlet_partition(blobs.labels, 3, 0.01, Rng(1))
    shard0 = p.shard(blobs, 0)
    w = init_params(MlpSpec((2, 16, 3)), Rng(2))
    w = local_train(w, shard0, 30, OptimizerConfig(lr=3e-2), Rng(3))
    pcl = per_client_losses(w, p, blobs)
    own = set(np.unique(shard0.labels))
    for m in (1, 2):
        if own.isdisjoint(np.unique(p.shard(blobs, m).labels)):
            assert pcl[0] < pcl[m]
