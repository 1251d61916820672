import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from cascade_stereo import data_io, net
from cascade_stereo.tensor import ShapeError


def test_gray_images_become_three_channels(tmp_path):
    arr = np.arange(12, dtype=np.uint8).reshape(3, 4) * 20
    Image.fromarray(arr).save(tmp_path / "g.png")
    img = data_io.load_image(tmp_path / "g.png")
    assert img.shape == (3, 4, 3) and img.dtype == np.float32
    np.testing.assert_allclose(img[..., 1], arr / 255.0, rtol=1e-6)


def test_image_save_load_round_trip(tmp_path, rng):
    img = rng.integers(0, 256, (5, 6, 3)).astype(np.float32) / 255.0
    for name in ("a.png", "a.ppm"):
        data_io.save_image(img, tmp_path / name)
        np.testing.assert_allclose(data_io.load_image(tmp_path / name), img, atol=1e-7)


def test_sixteen_bit_image_is_not_an_rgb_input(tmp_path):
    Image.fromarray(np.zeros((3, 3), np.uint16)).save(tmp_path / "d.png")
    with pytest.raises(data_io.FormatError):
        data_io.load_image(tmp_path / "d.png")


def test_unreadable_files_raise_oserror(tmp_path):
    (tmp_path / "junk.png").write_bytes(b"not an image")
    with pytest.raises(OSError):
        data_io.load_image(tmp_path / "junk.png")
    with pytest.raises(OSError):
        data_io.load_image(tmp_path / "missing.png")


def test_normalize_statistics_and_flat_images(rng):
    x = data_io.normalize(rng.random((6, 7, 3)) * 5 + 2)
    assert abs(x.mean()) < 1e-6 and abs(x.std() - 1) < 1e-5
    np.testing.assert_array_equal(data_io.normalize(np.full((4, 4, 3), 0.3)), 0.0)


@settings(max_examples=30, deadline=None)
@given(raw=st.lists(st.integers(1, 65535), min_size=12, max_size=12))
def test_disparity_png_round_trip_is_exact_on_the_grid(raw, tmp_path_factory):
    path = tmp_path_factory.mktemp("d") / "d.png"
    disp = np.array(raw, dtype=np.float64).reshape(3, 4) / 256.0
    data_io.save_disparity_png(disp, path)
    back, mask = data_io.load_disparity_png(path)
    assert mask.all()
    np.testing.assert_array_equal(back.astype(np.float64), disp)


def test_disparity_png_invalid_pixels(tmp_path):
    disp = np.array([[1.5, 2.0], [0.0, 300.0]])
    mask = np.array([[True, False], [True, True]])
    data_io.save_disparity_png(disp, tmp_path / "d.png", mask)
    back, valid = data_io.load_disparity_png(tmp_path / "d.png")
    # masked pixels and exact zeros both encode as raw 0 (invalid)
    np.testing.assert_array_equal(valid, [[True, False], [False, True]])
    assert back[0, 1] == data_io.INVALID_DISPARITY
    assert back[1, 1] == 255.99609375  # clamped to the 16-bit maximum


def test_eight_bit_png_is_not_a_disparity_map(tmp_path):
    Image.fromarray(np.zeros((3, 3), np.uint8)).save(tmp_path / "x.png")
    with pytest.raises(data_io.FormatError):
        data_io.load_disparity_png(tmp_path / "x.png")


@pytest.mark.parametrize("scene", data_io.SCENES)
def test_synthetic_pairs_satisfy_the_warp_identity(scene):
    s = data_io.generate_synthetic_pair(20, 48, 12, scene, texture_seed=3)
    warped, ok = data_io.warp_right_to_left(s.right, s.gt_disparity)
    valid = s.valid_mask & ok
    assert valid.sum() > 0.5 * valid.size
    np.testing.assert_array_equal(warped[valid], s.left[valid])
    assert s.gt_disparity.min() >= 0 and s.gt_disparity.max() <= 12


def test_constant_scene_value_and_errors():
    s = data_io.generate_synthetic_pair(8, 20, 6, "constant", value=5)
    assert np.all(s.gt_disparity == 5)
    assert s.valid_mask[:, :5].sum() == 0 and s.valid_mask[:, 5:].all()
    with pytest.raises(ValueError):
        data_io.generate_synthetic_pair(8, 20, 6, "constant", value=7)
    with pytest.raises(ValueError):
        data_io.generate_synthetic_pair(8, 6, 6)
    with pytest.raises(ValueError):
        data_io.generate_synthetic_pair(8, 20, 6, "spiral")


def test_texture_is_seeded():
    np.testing.assert_array_equal(data_io.smooth_texture(5, 6, 1), data_io.smooth_texture(5, 6, 1))
    assert not np.array_equal(data_io.smooth_texture(5, 6, 1), data_io.smooth_texture(5, 6, 2))


def test_checkpoint_round_trip_is_bitwise(tmp_path):
    weights = net.init_weights(net.ModelConfig(8, "tiny"), 5)
    weights["conv_a1"].running_var[:] = np.float32(1 / 3)
    data_io.save_checkpoint(weights, tmp_path / "w.csmd")
    back = data_io.load_checkpoint(tmp_path / "w.csmd")
    assert back.config == weights.config
    original = weights.state_dict()
    restored = back.state_dict()
    assert list(original) == list(restored)
    for key in original:
        assert original[key].tobytes() == restored[key].tobytes(), key


def test_checkpoint_corruption_is_detected(tmp_path):
    blob = data_io.encode_checkpoint(net.init_weights(net.ModelConfig(4, "tiny")).state_dict(), 4, "tiny")
    with pytest.raises(data_io.FormatError, match="truncated"):
        data_io.decode_checkpoint(blob[:-3])
    with pytest.raises(data_io.FormatError):
        data_io.decode_checkpoint(b"XXXX" + blob[4:])
    with pytest.raises(data_io.FormatError):
        data_io.decode_checkpoint(blob + b"\0")


def test_checkpoint_config_mismatch_names_the_tensor(tmp_path):
    data_io.save_checkpoint(net.init_weights(net.ModelConfig(8, "tiny")), tmp_path / "w.csmd")
    with pytest.raises(ShapeError, match="conv2d_2.kernel|upconv2d_2"):
        data_io.load_checkpoint(tmp_path / "w.csmd", net.ModelConfig(16, "tiny"))
    with pytest.raises(OSError):
        data_io.load_checkpoint(tmp_path / "none.csmd")


def test_atomic_write_leaves_nothing_on_failure(tmp_path):
    def failing(tmp):
        with open(tmp, "w") as f:
            f.write("partial")
        raise RuntimeError("boom")

    with pytest.raises(RuntimeError):
        data_io.atomic_write(tmp_path / "out.txt", failing)
    assert list(tmp_path.iterdir()) == []


def _write_dataset(root, names, skip=()):
    for name in names:
        s = data_io.generate_synthetic_pair(16, 40, 8, "constant", value=4)
        for d, writer in (("left", lambda p: data_io.save_image(s.left, p)),
                          ("right", lambda p: data_io.save_image(s.right, p)),
                          ("disp", lambda p: data_io.save_disparity_png(s.gt_disparity, p, s.valid_mask))):
            if (d, name) not in skip:
                writer(root / d / f"{name}.png")


def test_dataset_pairing_by_basename(tmp_path):
    _write_dataset(tmp_path, ["000", "001"])
    pairs = data_io.pair_dataset(tmp_path)
    assert [p[0].stem for p in pairs] == ["000", "001"]
    samples = data_io.load_dataset(tmp_path)
    assert len(samples) == 2
    assert np.all(samples[0].gt_disparity[samples[0].valid_mask] == 4)
    assert abs(samples[0].left.mean()) < 1e-5


def test_unpaired_files_are_all_listed(tmp_path):
    _write_dataset(tmp_path, ["000", "001", "002"], skip={("disp", "001"), ("right", "002")})
    with pytest.raises(data_io.FormatError) as info:
        data_io.pair_dataset(tmp_path)
    assert "001" in str(info.value) and "002" in str(info.value)


def test_missing_directory_is_reported(tmp_path):
    (tmp_path / "left").mkdir()
    (tmp_path / "right").mkdir()
    with pytest.raises(data_io.FormatError, match="disp"):
        data_io.pair_dataset(tmp_path)


def test_load_image_scaling(tmp_path):
    Image.fromarray(np.full((2, 2, 3), 255, np.uint8)).save(tmp_path / "w.png")
    np.testing.assert_array_equal(data_io.load_image(tmp_path / "w.png"), 1.0)
    Image.fromarray(np.full((1, 1, 3), 128, np.uint8)).save(tmp_path / "m.png")
    assert data_io.load_image(tmp_path / "m.png")[0, 0, 0] == pytest.approx(0.50196, abs=1e-5)


def test_normalize_two_values_and_idempotence(rng):
    img = np.zeros((2, 2, 3))
    img[0] = 1.0
    np.testing.assert_allclose(data_io.normalize(img), np.where(img > 0, 1.0, -1.0))
    once = data_io.normalize(rng.random((9, 11, 3)))
    np.testing.assert_allclose(data_io.normalize(once), once, atol=1e-5)


def test_raw_value_convention(tmp_path):
    Image.fromarray(np.array([[1280, 0]], np.uint16)).save(tmp_path / "d.png")
    gt, mask = data_io.load_disparity_png(tmp_path / "d.png")
    assert gt[0, 0] == 5.0 and mask.tolist() == [[True, False]]


def test_zero_heatmap_is_all_zero(tmp_path):
    data_io.save_cost_heatmap(np.zeros((3, 4)), tmp_path / "h.png")
    assert np.asarray(Image.open(tmp_path / "h.png")).max() == 0


def test_synthetic_pairs_are_seeded():
    a = data_io.generate_synthetic_pair(8, 24, 6, "ramp", texture_seed=4)
    b = data_io.generate_synthetic_pair(8, 24, 6, "ramp", texture_seed=4)
    np.testing.assert_array_equal(a.left, b.left)
    np.testing.assert_array_equal(a.right, b.right)


def test_unknown_checkpoint_version_is_rejected():
    blob = bytearray(data_io.encode_checkpoint({"x": np.zeros(2)}, 4, "tiny"))
    blob[4:8] = (99).to_bytes(4, "little")
    with pytest.raises(data_io.FormatError, match="version"):
        data_io.decode_checkpoint(bytes(blob))
