"""
Flow-matching policy tests: cosine weighting, loss and gradient, fitting,
Euler sampling and warm-start noise
"""

from dataclasses import replace

import numpy as np
import pytest

from src.envs import make_env
from src.errors import ContractViolation
from src.flow import (FlowModel, TrainRecord, cosine_weight, fit, flow_loss, flow_loss_batch,
                      init_flow_model, sample, sample_batch, warm_start_noise)
from src.net import MlpParams, init_params
from src.spc import ActionSequence, shift_knots


def small_model(rng, num_knots=2, action_dim=1, obs_dim=2, hidden=(6,), activation='tanh'):
    flat = num_knots * action_dim
    net = init_params([flat + obs_dim + 1, *hidden, flat], activation, rng)
    return FlowModel(net, np.zeros(obs_dim), np.ones(obs_dim), num_knots, action_dim, obs_dim, 10)


def constant_field(model, value):
    """Model whose field is the constant vector value everywhere"""
    tensors = [np.zeros_like(t) for t in model.net.tensors()]
    tensors[-1] = np.full_like(tensors[-1], value)
    return replace(model, net=model.net.with_tensors(tensors))


def make_records(rng, n, target_fn, num_knots=2, obs_dim=2):
    records = []
    for i in range(n):
        target = np.full((num_knots, 1), target_fn(i))
        records.append(TrainRecord(rng.standard_normal(obs_dim), target,
                                   np.zeros((num_knots, 1)), env_id=i, step=0))
    return records


def test_cosine_weight_extremes():
    target = np.array([1.0, 0.0])
    previous = np.zeros(2)
    assert cosine_weight(target, previous, np.array([-1.0, 0.0])) == pytest.approx(1.0)
    assert cosine_weight(target, previous, np.array([2.0, 0.0])) == pytest.approx(np.exp(-4.0))
    assert cosine_weight(target, previous, np.array([1.0, 1.0]), gamma=1.0) == pytest.approx(np.exp(-1.0))


def test_cosine_weight_degenerate_is_one():
    target = np.array([0.3, -0.2])
    assert cosine_weight(target, target, np.array([5.0, 5.0])) == 1.0
    assert cosine_weight(target, np.zeros(2), target) == 1.0


def test_cosine_weight_zero_gamma_is_plain_flow_matching():
    rng = np.random.default_rng(0)
    w = cosine_weight(rng.standard_normal((50, 4)), rng.standard_normal((50, 4)),
                      rng.standard_normal((50, 4)), gamma=0.0)
    assert np.all(w == 1.0)


def test_model_rejects_mismatched_network():
    net = init_params([4, 8, 2], 'swish', np.random.default_rng(1))
    with pytest.raises(ContractViolation):
        FlowModel(net, np.zeros(2), np.ones(2), num_knots=2, action_dim=1, obs_dim=2,
                  horizon_steps=10)


def test_init_flow_model_layout():
    spec = make_env('pendulum').spec
    model = init_flow_model(spec, np.random.default_rng(2))
    assert model.net.layer_sizes == [spec.num_knots + spec.obs_dim + 1, 64, 64, spec.num_knots]
    assert model.horizon_steps == spec.horizon_steps


def test_normalizer_round_trip():
    model = small_model(np.random.default_rng(3))
    model = replace(model, obs_mean=np.array([1.0, -2.0]), obs_std=np.array([0.5, 3.0]))
    y = np.array([[0.3, 4.0], [-1.0, 0.0]])
    assert np.allclose(model.denormalize_obs(model.normalize_obs(y)), y)


def test_normalizer_std_floor():
    model = small_model(np.random.default_rng(4))
    model = replace(model, obs_std=np.zeros(2))
    assert np.all(np.isfinite(model.normalize_obs(np.ones(2))))


def test_records_reject_out_of_range_knots():
    with pytest.raises(ContractViolation):
        TrainRecord(np.zeros(2), np.full((2, 1), 1.5), np.zeros((2, 1)), 0, 0)
    with pytest.raises(ContractViolation):
        TrainRecord(np.array([np.nan, 0.0]), np.zeros((2, 1)), np.zeros((2, 1)), 0, 0)


def test_zero_field_loss_is_weighted_distance():
    model = small_model(np.random.default_rng(5))
    model = replace(model, net=model.net.zeros_like())
    record = TrainRecord(np.zeros(2), np.array([[0.5], [-0.5]]), np.zeros((2, 1)), 0, 0)
    noise = np.array([0.1, 0.2])
    loss, _ = flow_loss(model, record, noise, 0.3)
    expected = cosine_weight(record.target.ravel(), record.previous.ravel(), noise) \
        * np.sum((record.target.ravel() - noise) ** 2)
    assert loss == pytest.approx(float(expected))


def test_loss_vanishes_when_field_is_exact():
    # with noise equal to target - c the ideal field is the constant c
    model = constant_field(small_model(np.random.default_rng(6)), 0.25)
    record = TrainRecord(np.zeros(2), np.full((2, 1), 0.5), np.zeros((2, 1)), 0, 0)
    loss, grads = flow_loss(model, record, np.full(2, 0.25), 0.7)
    assert loss == pytest.approx(0.0, abs=1e-24)
    assert np.allclose(grads.flat(), 0.0)


def test_flow_loss_rejects_bad_probe():
    model = small_model(np.random.default_rng(7))
    record = TrainRecord(np.zeros(2), np.zeros((2, 1)), np.zeros((2, 1)), 0, 0)
    with pytest.raises(ContractViolation):
        flow_loss(model, record, np.zeros(3), 0.5)
    with pytest.raises(ContractViolation):
        flow_loss(model, record, np.zeros(2), 1.5)


def test_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(8)
    model = small_model(rng)
    B = 4
    targets = rng.uniform(-1, 1, size=(B, 2))
    previous = rng.uniform(-1, 1, size=(B, 2))
    y_norm = rng.standard_normal((B, 2))
    noise = rng.standard_normal((B, 2))
    t = rng.uniform(0, 1, size=B)

    def loss_at(flat):
        net = MlpParams.from_flat(model.net.layer_sizes, model.net.activation, flat)
        return flow_loss_batch(replace(model, net=net), targets, previous, y_norm, noise, t)[0]

    _, grads = flow_loss_batch(model, targets, previous, y_norm, noise, t)
    flat = model.net.flat()
    h = 1e-6
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        up, down = flat.copy(), flat.copy()
        up[i] += h
        down[i] -= h
        numeric[i] = (loss_at(up) - loss_at(down)) / (2 * h)
    assert np.max(np.abs(grads.flat() - numeric)) < 1e-6 * max(1.0, np.max(np.abs(numeric)))


def test_fit_with_zero_epochs_returns_unchanged_copy():
    rng = np.random.default_rng(9)
    model = small_model(rng)
    records = make_records(rng, 16, lambda i: 0.5)
    fitted, losses = fit(model, records, epochs=0, batch_size=8, learning_rate=1e-3,
                         rng=np.random.default_rng(0))
    assert losses == []
    assert fitted is not model
    assert np.array_equal(fitted.net.flat(), model.net.flat())
    assert np.array_equal(fitted.obs_mean, model.obs_mean)


def test_fit_rejects_empty_dataset():
    with pytest.raises(ContractViolation):
        fit(small_model(np.random.default_rng(10)), [], 1, 8, 1e-3, np.random.default_rng(0))


def test_fit_is_deterministic_and_leaves_input_alone():
    rng = np.random.default_rng(11)
    model = small_model(rng)
    before = model.net.flat()
    records = make_records(rng, 40, lambda i: 0.8 if i % 2 else -0.3)
    a, loss_a = fit(model, records, 3, 16, 1e-2, np.random.default_rng(1))
    b, loss_b = fit(model, records, 3, 16, 1e-2, np.random.default_rng(1))
    assert loss_a == loss_b and len(loss_a) == 3
    assert np.array_equal(a.net.flat(), b.net.flat())
    assert np.array_equal(model.net.flat(), before)


def test_fit_recomputes_normalizer():
    rng = np.random.default_rng(12)
    records = make_records(rng, 30, lambda i: 0.1)
    fitted, _ = fit(small_model(rng), records, 1, 10, 1e-3, np.random.default_rng(2))
    obs = np.stack([r.observation for r in records])
    assert np.allclose(fitted.obs_mean, obs.mean(axis=0))
    assert np.allclose(fitted.obs_std, obs.std(axis=0))


def test_fit_single_mode_converges():
    rng = np.random.default_rng(13)
    model = small_model(rng, hidden=(64, 64), activation='swish')
    records = make_records(rng, 512, lambda i: 0.5)
    fitted, losses = fit(model, records, epochs=300, batch_size=128, learning_rate=3e-3,
                         rng=np.random.default_rng(3))
    assert losses[-1] < losses[0]

    y = rng.standard_normal((200, 2))
    knots = sample_batch(fitted, y, rng.standard_normal((200, 2)))
    print(f"  single-mode sample error: {np.mean(np.abs(knots - 0.5)):.4f}")
    assert np.mean(np.abs(knots - 0.5)) < 0.15


@pytest.fixture(scope='module')
def bimodal_model():
    rng = np.random.default_rng(14)
    model = small_model(rng, hidden=(64, 64), activation='swish')
    records = make_records(rng, 1024, lambda i: 0.8 if i % 2 else -0.8)
    fitted, _ = fit(model, records, epochs=300, batch_size=128, learning_rate=3e-3,
                    rng=np.random.default_rng(4))
    return fitted


@pytest.mark.slow
def test_fit_keeps_both_modes(bimodal_model):
    rng = np.random.default_rng(15)
    knots = sample_batch(bimodal_model, rng.standard_normal((1000, 2)),
                         rng.standard_normal((1000, 2)))
    upper = np.mean(knots.mean(axis=(1, 2)) > 0)
    print(f"  fraction of samples in the upper mode: {upper:.2f}")
    assert 0.2 <= upper <= 0.8


@pytest.mark.slow
def test_full_warm_start_stays_in_mode(bimodal_model):
    rng = np.random.default_rng(16)
    y = rng.standard_normal((200, 2))
    knots = sample_batch(bimodal_model, y, rng.standard_normal((200, 2)))
    start = np.sign(knots.mean(axis=(1, 2)))
    kept = []
    for _ in range(20):
        noise = np.stack([
            warm_start_noise(ActionSequence(shift_knots(k, 10), 10), 1.0, rng) for k in knots
        ])
        knots = sample_batch(bimodal_model, y, noise)
        kept.append(np.sign(knots.mean(axis=(1, 2))) == start)
    print(f"  warm-started samples kept in their mode: {np.mean(kept):.3f}")
    assert np.mean(kept) >= 0.95



def test_zero_field_returns_clamped_noise():
    model = small_model(np.random.default_rng(15))
    model = replace(model, net=model.net.zeros_like())
    noise = np.array([[0.4, -2.0], [1.5, 0.0]])
    knots = sample_batch(model, np.zeros((2, 2)), noise)
    assert np.array_equal(knots.reshape(2, 2), np.clip(noise, -1.0, 1.0))


def test_constant_field_shifts_noise():
    model = constant_field(small_model(np.random.default_rng(16)), 0.3)
    noise = np.array([[0.1, 0.9], [-0.5, -1.6]])
    for dt in (0.1, 0.25, 1.0):
        knots = sample_batch(model, np.zeros((2, 2)), noise, dt)
        assert np.allclose(knots.reshape(2, 2), np.clip(noise + 0.3, -1.0, 1.0), atol=1e-12)


def test_sample_returns_action_sequence():
    model = small_model(np.random.default_rng(17))
    seq = sample(model, np.zeros(2), np.array([0.2, -0.2]))
    assert isinstance(seq, ActionSequence)
    assert seq.knots.shape == (2, 1)
    assert seq.horizon_steps == 10
    again = sample(model, np.zeros(2), np.array([0.2, -0.2]))
    assert np.array_equal(seq.knots, again.knots)


def test_sample_rejects_uneven_step_and_bad_shapes():
    model = small_model(np.random.default_rng(18))
    with pytest.raises(ContractViolation):
        sample_batch(model, np.zeros((1, 2)), np.zeros((1, 2)), dt=0.3)
    with pytest.raises(ContractViolation):
        sample_batch(model, np.zeros((1, 3)), np.zeros((1, 2)))


def test_warm_start_noise_moments():
    prev = ActionSequence(np.array([[0.4], [-0.6]]), 10)
    draws = warm_start_noise(prev, 0.5, np.random.default_rng(19), size=200_000)
    assert draws.shape == (200_000, 2)
    assert np.allclose(draws.mean(axis=0), [0.2, -0.3], atol=0.01)
    assert np.allclose(draws.std(axis=0), 0.5, atol=0.01)


def test_full_warm_start_is_exact():
    prev = ActionSequence(np.array([[0.4], [-0.6]]), 10)
    assert np.array_equal(warm_start_noise(prev, 1.0, np.random.default_rng(20)), prev.flat())
    cold = warm_start_noise(prev, 0.0, np.random.default_rng(21))
    assert np.array_equal(cold, np.random.default_rng(21).standard_normal(2))


def test_warm_start_level_out_of_range():
    prev = ActionSequence(np.zeros((2, 1)), 10)
    with pytest.raises(ContractViolation):
        warm_start_noise(prev, 1.5, np.random.default_rng(0))
    with pytest.raises(ContractViolation):
        warm_start_noise(prev, -0.1, np.random.default_rng(0))
