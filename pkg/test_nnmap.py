#!/usr/bin/env python3
"""
Tests for the tanh networks: forward values, time derivatives, seeding, the
trajectory pre-fit, output clipping and checkpoints.
"""
import math

import numpy as np
import pytest

from diffengine import grad, value_of
from nnmap import (
    Mlp,
    PotentialMap,
    TrajectoryBundle,
    apply_columns,
    forward,
    init,
    load_checkpoint,
    param_count,
    prefit,
    save_checkpoint,
    time_derivative,
)

BOX = (-1.0, 1.0, -1.0, 1.0)
UNIT_NET = Mlp(1, 1, 1, np.array([1.0, 0.0, 2.0, 0.5]))


def test_param_count_and_layout():
    assert param_count(3, 4, 2) == 3 * 4 + 4 + 4 * 2 + 2
    net = init(3, 4, 2, seed=0)
    W1, b1, W2, b2 = net.unpack()
    assert (W1.shape, b1.shape, W2.shape, b2.shape) == ((3, 4), (4,), (4, 2), (2,))


def test_zero_parameters_give_zero_output():
    net = Mlp(3, 4, 2, np.zeros(param_count(3, 4, 2)))
    out = forward(net, np.ones((5, 3)))
    assert out.shape == (5, 2)
    assert np.array_equal(out, np.zeros((5, 2)))


def test_scalar_net_examples():
    assert float(forward(UNIT_NET, [[0.0]])[0, 0]) == 0.5
    assert float(forward(UNIT_NET, [[1.0]])[0, 0]) == pytest.approx(2 * math.tanh(1.0) + 0.5, rel=1e-15)
    assert float(forward(UNIT_NET, [[1.0]])[0, 0]) == pytest.approx(2.0232, abs=1e-4)


def test_width_mismatch():
    with pytest.raises(ValueError):
        forward(UNIT_NET, np.zeros((4, 2)))
    with pytest.raises(ValueError):
        apply_columns(init(3, 2, 1), [np.zeros(4)])


def test_time_derivative_zero_output_layer():
    net = init(1, 6, 3, seed=1)
    W1, b1, _, _ = net.unpack()
    flat = np.concatenate([W1.reshape(-1), b1, np.zeros(6 * 3), np.full(3, 0.7)])
    rate = time_derivative(net.with_params(flat), np.linspace(0.0, 1.0, 5))
    assert rate.shape == (5, 3)
    assert np.array_equal(rate, np.zeros((5, 3)))


def test_time_derivative_hand_value():
    """d/dt c_k tanh(a t + b) = c_k a (1 - tanh^2(a t + b))"""
    a, b, c1, c2 = 1.5, -0.25, 2.0, -0.5
    net = Mlp(1, 1, 2, np.array([a, b, c1, c2, 0.1, 0.2]))
    t = np.array([0.0, 0.4, 1.0])
    slope = a * (1.0 - np.tanh(a * t + b) ** 2)
    expected = np.stack([c1 * slope, c2 * slope], axis=1)
    assert np.allclose(time_derivative(net, t), expected, rtol=1e-14, atol=1e-15)


def test_time_derivative_matches_finite_differences():
    net = init(1, 8, 3, seed=5)
    t = np.linspace(0.0, 1.0, 9)
    h = 1e-6
    fd = (forward(net, (t + h)[:, None], project=False) - forward(net, (t - h)[:, None], project=False)) / (2 * h)
    assert np.allclose(time_derivative(net, t), fd, rtol=1e-6, atol=1e-8)


def test_init_is_seeded():
    assert np.array_equal(init(2, 5, 3, seed=4).params, init(2, 5, 3, seed=4).params)
    assert not np.array_equal(init(2, 5, 3, seed=4).params, init(2, 5, 3, seed=5).params)


def test_zero_hidden_width_is_rejected():
    with pytest.raises(ValueError):
        init(1, 0, 3)
    with pytest.raises(ValueError):
        PotentialMap.create(0, BOX, 1.0, 1.0)
    with pytest.raises(ValueError):
        Mlp(1, 0, 1, np.zeros(1))


def test_box_transform_clips_and_stops_gradient():
    net = Mlp(1, 1, 1, np.array([1.0, 0.0, 1.0, 5.0]), "box", (-1.0, 1.0))
    assert float(forward(net, [[0.3]])[0, 0]) == 1.0
    g = grad(lambda p: apply_columns(net, [np.array([0.3])], p).sum(), net.params)
    assert np.array_equal(g, np.zeros(4))
    inside = net.with_params([1.0, 0.0, 1.0, 0.0])
    g = grad(lambda p: apply_columns(inside, [np.array([0.3])], p).sum(), inside.params)
    assert g[3] == 1.0
    with pytest.raises(ValueError):
        Mlp(1, 1, 1, np.zeros(4), "box", None)


def test_potential_map_normalises_inputs():
    pmap = PotentialMap.create(6, (0.0, 2.0, 0.0, 4.0), horizon=2.0, v_max=3.0, seed=2, init_scale=0.5)
    expected = float(np.clip(3.0 * forward(pmap.net, [[0.0, 0.0, 0.0]])[0, 0], -3.0, 3.0))
    assert float(pmap.evaluate(np.array(1.0), np.array(2.0), np.array(1.0))) == pytest.approx(expected, rel=1e-14)
    source = pmap.as_source()
    y1 = np.array([0.0, 0.5, 2.0])
    assert np.array_equal(source.evaluate(y1, y1, 0.5), pmap.evaluate(y1, y1, 0.5))


def test_potential_map_respects_v_max():
    pmap = PotentialMap.create(4, BOX, horizon=1.0, v_max=2.0, seed=0)
    big = pmap.net.params * 100.0
    rng = np.random.default_rng(0)
    values = pmap.evaluate(rng.uniform(-1, 1, 200), rng.uniform(-1, 1, 200), rng.uniform(0, 1, 200), big)
    assert np.all(np.abs(values) <= 2.0)
    with pytest.raises(ValueError):
        PotentialMap.create(4, BOX, 1.0, 1.0, init_scale=0.0)


def test_bundle_shapes_and_params():
    bundle = TrajectoryBundle.create(5, 7, BOX, horizon=2.0, seed=3)
    assert bundle.n_particles == 5
    assert bundle.size == 2 * param_count(1, 7, 5)
    assert bundle.positions(np.linspace(0, 2, 4)).shape == (4, 5, 2)
    assert np.array_equal(bundle.with_params(bundle.params).params, bundle.params)
    assert not np.array_equal(bundle.nets[0].params, bundle.nets[1].params)


def test_bundle_velocities_match_finite_differences():
    bundle = TrajectoryBundle.create(4, 6, BOX, horizon=2.0, seed=9)
    t = np.array([0.1, 0.9, 1.7])
    h = 1e-6
    up = value_of(bundle.positions(t + h, project=False))
    down = value_of(bundle.positions(t - h, project=False))
    assert np.allclose(bundle.velocities(t), (up - down) / (2 * h), rtol=1e-6, atol=1e-8)


def test_prefit_holds_initial_positions():
    rng = np.random.default_rng(21)
    x0 = rng.uniform(-1.0, 1.0, size=(450, 2))
    bundle = prefit(TrajectoryBundle.create(450, 32, BOX, horizon=1.0, seed=0), x0)
    start = value_of(bundle.positions([0.0]))[0]
    assert np.max(np.abs(start - x0)) <= 1e-3 * 2.0
    end = value_of(bundle.positions([1.0]))[0]
    assert np.max(np.abs(end - x0)) <= 1e-3 * 2.0


def test_prefit_follows_a_path():
    rng = np.random.default_rng(22)
    x0 = rng.uniform(-0.5, 0.5, size=(20, 2))
    shift = np.array([0.3, -0.2])
    bundle = prefit(TrajectoryBundle.create(20, 16, BOX, horizon=1.0, seed=1), x0, path=lambda s: x0 + s * shift)
    start = value_of(bundle.positions([0.0]))[0]
    assert np.max(np.abs(start - x0)) <= 1e-3 * 2.0
    end = value_of(bundle.positions([1.0]))[0]
    assert np.max(np.abs(end - (x0 + shift))) <= 1e-2
    with pytest.raises(ValueError):
        prefit(bundle, x0[:5])


def test_checkpoint_round_trip(tmp_path):
    bundle = TrajectoryBundle.create(3, 4, BOX, horizon=1.0, seed=0)
    pmap = PotentialMap.create(5, BOX, 1.0, 1.0, seed=1)
    path = tmp_path / "checkpoint.json"
    save_checkpoint(path, {"x1": bundle.nets[0], "x2": bundle.nets[1], "potential": pmap.net}, {"horizon": 1.0})
    networks, metadata = load_checkpoint(path)
    assert metadata == {"horizon": 1.0}
    assert np.array_equal(networks["potential"].params, pmap.net.params)
    assert networks["x1"].output_transform == "box"
    assert networks["x1"].bound == (-1.0, 1.0)
    assert networks["potential"].bound is None


@pytest.mark.parametrize("text", ["{}", "not json", '{"format": 1, "networks": {"a": {"in_dim": 1}}}'])
def test_malformed_checkpoint(tmp_path, text):
    path = tmp_path / "bad.json"
    path.write_text(text)
    with pytest.raises(ValueError):
        load_checkpoint(path)


if __name__ == "__main__":
    test_scalar_net_examples()
    test_time_derivative_hand_value()
    test_time_derivative_matches_finite_differences()
    test_prefit_holds_initial_positions()
    print("✓ network checks passed")
