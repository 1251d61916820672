import numpy as np
import pytest

from cascade_stereo import conformance, net, oracles
from cascade_stereo.tensor import ShapeError, Tensor, no_grad

TINY = net.ModelConfig(8, "tiny")

LINEAR = {"conv_a7", "conv_b9", "upconv_a2", "upconv_b3", "conv_1", "conv_2", "upconv3d_2", "upconv2d_2"}


def test_layer_table_names_and_linear_layers():
    layers = net.architecture(net.ModelConfig())
    convs = [l for l in layers if l.spec is not None]
    expected = [r.name for r in conformance.STEM_TABLE + conformance.AGGREGATION_TABLE if r.kernel and not r.name.startswith("pool")]
    assert [l.name for l in convs] == expected
    assert {l.name for l in convs if not l.bn_relu} == LINEAR


def test_kernel_shapes_follow_the_reference_tables():
    config = net.ModelConfig()
    weights = net.init_weights(config, 0)
    actual = {name: p.kernel.shape for name, p in weights.layers.items()}
    assert conformance.compare_shapes(actual, conformance.expected_kernel_shapes(config)) == []


def test_tiny_profile_quarters_channels():
    assert TINY.stem_channels == 8
    assert TINY.agg_channels == (4, 8, 16)
    assert TINY.levels == 9
    with pytest.raises(ValueError):
        net.ModelConfig(8, "huge")
    with pytest.raises(ValueError):
        net.ModelConfig(0)


def test_init_is_seeded_and_scales_the_output_layer():
    a, b = net.init_weights(TINY, 3), net.init_weights(TINY, 3)
    for (name, x), (_, y) in zip(a.parameters(), b.parameters()):
        np.testing.assert_array_equal(x.data, y.data, err_msg=name)
    w = net.init_weights(net.ModelConfig(16, "paper"), 0)
    fan_in = 9 * 32
    std = w["upconv2d_2"].kernel.data.std()
    assert std == pytest.approx(net.OUTPUT_INIT_SCALE * np.sqrt(2 / fan_in), rel=0.05)
    assert w["conv3d_1"].kernel.data.std() == pytest.approx(np.sqrt(2 / (27 * 64)), rel=0.05)


def test_state_round_trip_and_named_errors():
    weights = net.init_weights(TINY, 1)
    state = weights.state_dict()
    again = net.weights_from_state(TINY, state)
    for key, arr in again.state_dict().items():
        np.testing.assert_array_equal(arr, state[key])
    broken = dict(state)
    del broken["conv3d_4.bn.gamma"]
    with pytest.raises(ShapeError, match="conv3d_4.bn.gamma"):
        net.weights_from_state(TINY, broken)
    broken = dict(state, **{"conv_a1.kernel": np.zeros((3, 3, 3, 7), np.float32)})
    with pytest.raises(ShapeError, match="conv_a1.kernel"):
        net.weights_from_state(TINY, broken)
    broken = dict(state, extra=np.zeros(1))
    with pytest.raises(ShapeError, match="extra"):
        net.weights_from_state(TINY, broken)


def test_parameters_cover_trainable_arrays_only():
    weights = net.init_weights(TINY)
    names = [n for n, _ in weights.parameters()]
    assert "conv_a1.bn.gamma" in names
    assert not any("running" in n for n in names)
    assert all(t.requires_grad for _, t in weights.parameters())


def test_forward_shapes_for_odd_sizes_and_training_crop(rng):
    weights = net.init_weights(net.ModelConfig(16, "tiny"), 0)
    with no_grad():
        res = net.full_forward(rng.standard_normal((21, 35, 3)), rng.standard_normal((21, 35, 3)), weights)
        crop = net.full_forward(rng.standard_normal((17, 19, 3)), rng.standard_normal((17, 35, 3)), weights)
    assert res.final_cost.shape == (21, 35, 17)
    assert res.disparity.shape == (21, 35)
    assert res.disparity.min() >= 0 and res.disparity.max() <= 16
    assert crop.final_cost.shape == (17, 19, 17)


def test_batched_forward_matches_unbatched_in_inference(rng):
    weights = net.init_weights(TINY, 0)
    left = rng.standard_normal((2, 16, 24, 3)).astype(np.float32)
    right = rng.standard_normal((2, 16, 24, 3)).astype(np.float32)
    with no_grad():
        batched = net.full_forward(left, right, weights).final_cost.data
        for i in range(2):
            single = net.full_forward(left[i], right[i], weights).final_cost.data
            np.testing.assert_allclose(batched[i], single, rtol=1e-4, atol=1e-5)


def test_training_mode_updates_running_statistics_inference_does_not(rng):
    weights = net.init_weights(TINY, 0)
    image = rng.standard_normal((16, 16, 3))
    before = weights["conv_a1"].running_mean.copy()
    with no_grad():
        net.full_forward(image, image, weights, training=False)
    np.testing.assert_array_equal(weights["conv_a1"].running_mean, before)
    with no_grad():
        net.full_forward(image, image, weights, training=True)
    assert not np.array_equal(weights["conv_a1"].running_mean, before)


def test_left_and_right_share_stem_weights(rng):
    weights = net.init_weights(TINY, 0)
    image = rng.standard_normal((16, 16, 3))
    trace = {}
    with no_grad():
        net.full_forward(image, image, weights, trace=trace)
    np.testing.assert_array_equal(trace["left/upconv_b3"].data, trace["right/upconv_b3"].data)
    assert not np.array_equal(trace["left/conv_1"].data, trace["right/conv_2"].data)


def test_small_or_mismatched_inputs_are_rejected(rng):
    weights = net.init_weights(TINY, 0)
    with pytest.raises(ShapeError):
        net.full_forward(np.zeros((12, 32, 3)), np.zeros((12, 32, 3)), weights)
    with pytest.raises(ShapeError):
        net.full_forward(np.zeros((16, 32, 3)), np.zeros((16, 33, 3)), weights)
    with pytest.raises(ValueError):
        net.stem_forward(Tensor(np.zeros((16, 16, 3))), weights, "C")


def test_cost_volume_layout_and_out_of_range_zeros(rng):
    left = rng.standard_normal((2, 5, 3)).astype(np.float32)
    right = rng.standard_normal((2, 5, 3)).astype(np.float32)
    vol = net.build_cost_volume_concat(Tensor(left), Tensor(right), 3).data
    assert vol.shape == (4, 2, 5, 6)
    np.testing.assert_array_equal(vol[2, :, 3, :3], left[:, 3])
    np.testing.assert_array_equal(vol[2, :, 3, 3:], right[:, 1])
    np.testing.assert_array_equal(vol[3, :, :3, 3:], 0)
    np.testing.assert_array_equal(vol, oracles.cost_volume_concat_loops(left, right, 3))


def test_dot_volume_prefers_the_true_shift(rng):
    feats = rng.standard_normal((4, 20, 8))
    right = (feats / np.linalg.norm(feats, axis=-1, keepdims=True)).astype(np.float32)  # unit vectors
    feats = right
    left = np.zeros_like(feats)
    left[:, 3:] = feats[:, :-3]  # left[x] = right[x - 3]
    cost = net.build_cost_volume_dot(Tensor(left), Tensor(right), 5).data[..., 0]
    assert np.all(net.wta(np.moveaxis(cost, 0, -1))[:, 3:] == 3)


def test_matching_forward_shapes(rng):
    weights = net.init_weights(TINY, 0)
    with no_grad():
        res = net.matching_forward(rng.standard_normal((16, 20, 3)), rng.standard_normal((16, 28, 3)), weights)
    assert res.final_cost.shape == (16, 20, 9)


def test_wta_prefers_smallest_index_on_ties():
    cost = np.array([[[2.0, 1.0, 1.0, 3.0]]])
    assert net.wta(cost)[0, 0] == 1
