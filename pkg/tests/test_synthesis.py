import numpy as np
import pytest

from dynafed.errors import ConfigError, DegenerateSegment, DegenerateTrajectoryError, DivergenceError, ShapeError
from dynafed.harness.selftest import meta_gradient_error
from dynafed.model import MlpSpec, ParamVector, init_params, one_hot, sgd_unroll
from dynafed.numerics import Rng
from dynafed.synthesis import (
    SynthConfig,
    SyntheticDataset,
    Trajectory,
    datasyn,
    init_synthetic,
    meta_loss_and_grads,
    noise_candidate,
    sample_segment,
    trajectory_fidelity,
)

SPEC = MlpSpec((3, 4, 2))


def _random_traj(length, seed=0, spec=SPEC):
    rng = np.random.default_rng(seed)
    w = init_params(spec, Rng(seed)).values
    out = [w]
    for _ in range(length - 1):
        w = w + 0.1 * rng.standard_normal(w.size)
        out.append(w)
    return Trajectory.from_list([ParamVector(spec, v) for v in out])


def _gd_traj(X, T, lr, length, spec=SPEC):
    w = init_params(spec, Rng(1))
    out = [w]
    for _ in range(length - 1):
        w = sgd_unroll(w, X, T, lr, 1)
        out.append(w)
    return Trajectory.from_list(out)


def test_init_synthetic_statistics():
    ds = init_synthetic(4000, 5, 3, Rng(0))
    assert abs(ds.X.mean()) < 0.05 and abs(ds.X.std() - 1.0) < 0.05
    assert np.array_equal(ds.targets(), np.full((4000, 3), 1.0 / 3))
    assert not ds.X.flags.writeable


def test_synthetic_dataset_validation():
    with pytest.raises(ShapeError):
        SyntheticDataset(np.zeros((3, 2)), np.zeros((4, 2)))
    with pytest.warns(UserWarning):
        SyntheticDataset(np.zeros((2, 2)), np.zeros((2, 5)))


def test_synth_config_validation():
    with pytest.raises(ConfigError):
        SynthConfig(s=2, target_avg_count=2)
    with pytest.raises(ConfigError):
        SynthConfig(metric="manhattan")
    with pytest.raises(ConfigError):
        SynthConfig(eta_inner=0.0)
    with pytest.raises(ConfigError):
        SynthConfig(s=5).check_trajectory(_random_traj(5))


def test_segment_without_averaging_targets_endpoint():
    traj = _random_traj(12)
    cfg = SynthConfig(s=3, target_avg_count=0)
    rng = Rng(0)
    for _ in range(50):
        seg = sample_segment(traj, cfg, rng)
        assert 0 <= seg.t <= len(traj) - 1 - cfg.s
        assert np.array_equal(seg.target.values, traj[seg.t + 3].values)
        assert seg.start is traj[seg.t]


def test_segment_span_equal_to_length_forces_start_zero():
    traj = _random_traj(6)
    cfg = SynthConfig(s=5, target_avg_count=0)
    rng = Rng(1)
    assert {sample_segment(traj, cfg, rng).t for _ in range(20)} == {0}


def test_segment_covers_every_admissible_start():
    traj = _random_traj(8)
    cfg = SynthConfig(s=3, target_avg_count=0)
    rng = Rng(2)
    assert {sample_segment(traj, cfg, rng).t for _ in range(400)} == set(range(5))


def test_segment_averaged_target():
    traj = _random_traj(10)
    cfg = SynthConfig(s=4, target_avg_count=2)
    rng = Rng(3)
    for _ in range(30):
        seg = sample_segment(traj, cfg, rng)
        assert len(set(seg.intermediates)) == 2
        assert all(seg.t < i < seg.t + 4 for i in seg.intermediates)
        members = [traj[seg.t + 4].values] + [traj[i].values for i in seg.intermediates]
        assert np.allclose(seg.target.values, np.mean(members, axis=0), rtol=1e-14)


@pytest.mark.parametrize("metric", ["l2", "cosine", "normalized_l2"])
@pytest.mark.parametrize("s_prime", [1, 2, 4])
def test_meta_gradient_matches_finite_differences(metric, s_prime):
    ex, ey = meta_gradient_error(metric, s_prime=s_prime)
    assert ex < 1e-4 and ey < 1e-4


def test_meta_gradient_permutation_symmetry():
    rng = np.random.default_rng(0)
    w0 = init_params(SPEC, Rng(0))
    w1 = w0.with_values(w0.values + 0.3 * rng.standard_normal(SPEC.n_params))
    ds = SyntheticDataset(rng.standard_normal((5, 3)), rng.standard_normal((5, 2)))
    cfg = SynthConfig(s=1, s_prime=3, eta_inner=0.3, target_avg_count=0)
    loss, gX, gY = meta_loss_and_grads(ds, w0, w1, cfg)
    perm = rng.permutation(5)
    loss_p, gX_p, gY_p = meta_loss_and_grads(SyntheticDataset(ds.X[perm], ds.Ylogits[perm]), w0, w1, cfg)
    assert loss_p == pytest.approx(loss, rel=1e-12)
    assert np.allclose(gX_p, gX[perm], rtol=1e-9, atol=1e-13)
    assert np.allclose(gY_p, gY[perm], rtol=1e-9, atol=1e-13)


def test_degenerate_segment_guard():
    w = init_params(SPEC, Rng(0))
    ds = init_synthetic(4, 3, 2, Rng(0))
    with pytest.raises(DegenerateSegment):
        meta_loss_and_grads(ds, w, w, SynthConfig(s=1, target_avg_count=0))


def test_meta_loss_shape_mismatch():
    w = init_params(SPEC, Rng(0))
    ds = init_synthetic(4, 5, 2, Rng(0))
    with pytest.raises(ShapeError):
        meta_loss_and_grads(ds, w, w.with_values(w.values + 1), SynthConfig(s=1, target_avg_count=0))


def test_datasyn_single_iteration_and_determinism():
    traj = _random_traj(6)
    cfg = SynthConfig(s=2, s_prime=2, N=1, eta_inner=0.1, n=4, target_avg_count=1)
    res = datasyn(traj, cfg, Rng(5))
    assert len(res.log) == 1
    cfg = SynthConfig(s=2, s_prime=2, N=8, eta_inner=0.1, n=4, target_avg_count=1)
    a, b = datasyn(traj, cfg, Rng(5)), datasyn(traj, cfg, Rng(5))
    assert np.array_equal(a.dataset.X, b.dataset.X)
    assert np.array_equal(a.dataset.Ylogits, b.dataset.Ylogits)
    assert np.array_equal(a.losses, b.losses)


def test_datasyn_write_log(tmp_path):
    traj = _random_traj(6)
    res = datasyn(traj, SynthConfig(s=2, s_prime=1, N=3, eta_inner=0.1, n=4, target_avg_count=0), Rng(0))
    res.write_log(tmp_path / "log.csv")
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0] == "iteration,segment_t,loss" and len(lines) == 4


def test_datasyn_constant_trajectory_is_degenerate():
    w = init_params(SPEC, Rng(0))
    traj = Trajectory.from_list([w] * 5)
    with pytest.raises(DegenerateTrajectoryError):
        datasyn(traj, SynthConfig(s=2, N=4, n=4, target_avg_count=0), Rng(0))


def test_datasyn_divergence_names_step():
    traj = _random_traj(4)
    big = SyntheticDataset(np.full((3, 3), 1e150), np.zeros((3, 2)))
    cfg = SynthConfig(s=1, s_prime=3, N=1, eta_inner=1e200, n=3, target_avg_count=0, metric="l2")
    with pytest.raises(DivergenceError) as info:
        datasyn(traj, cfg, Rng(0), init=big)
    assert info.value.step is not None


def test_fidelity_is_zero_on_generating_data():
    rng = np.random.default_rng(0)
    X = rng.standard_normal((10, 3))
    T = one_hot(rng.integers(0, 2, 10), 2)
    traj = _gd_traj(X, T, 0.2, 8)
    cfg = SynthConfig(s=2, s_prime=2, eta_inner=0.2, target_avg_count=0)
    rows = trajectory_fidelity(traj, cfg, {"gen": (X, T), "noise": noise_candidate(10, 3, 2, Rng(1))})
    gen, noise = rows
    assert len(gen.per_segment) == len(traj) - cfg.s
    assert max(gen.per_segment) < 1e-12
    assert min(noise.per_segment) > 0


def test_fidelity_continuous_in_inputs():
    rng = np.random.default_rng(1)
    X = rng.standard_normal((10, 3))
    T = one_hot(rng.integers(0, 2, 10), 2)
    traj = _gd_traj(X, T, 0.2, 6)
    cfg = SynthConfig(s=2, s_prime=2, eta_inner=0.2, target_avg_count=0)
    base = trajectory_fidelity(traj, cfg, {"a": (X, T)})[0].mean
    moved = trajectory_fidelity(traj, cfg, {"a": (X + 1e-7, T)})[0].mean
    assert abs(moved - base) < 1e-4


def test_fidelity_skips_stalled_segments():
    w = init_params(SPEC, Rng(0))
    v = w.with_values(w.values + 1)
    traj = Trajectory.from_list([w, w, v, v])
    rows = trajectory_fidelity(traj, SynthConfig(s=1, target_avg_count=0), {"n": noise_candidate(4, 3, 2, Rng(0))})
    assert len(rows[0].per_segment) == 1
