"""Acceptance criteria, one test each. A summary line per criterion is printed at the end of the run."""

import contextlib
import itertools
import time

import numpy as np
from threadpoolctl import threadpool_limits

from cascade_stereo import cli, conformance, data_io, metrics, net, oracles, selftest, training
from cascade_stereo.tensor import Tensor, no_grad

from conftest import ACCEPTANCE


@contextlib.contextmanager
def criterion(number, title):
    note = {"detail": ""}
    try:
        yield note
    except BaseException as exc:
        ACCEPTANCE[number] = (title, False, note["detail"] or f"{type(exc).__name__}: {exc}")
        raise
    ACCEPTANCE[number] = (title, True, note["detail"])


def test_1_gradients_match_finite_differences():
    with criterion(1, "gradient correctness") as note:
        start = time.perf_counter()
        worst = 0.0
        for seed in range(3):  # several random draws of every op problem
            for name, (fn, inputs) in selftest.gradient_cases(np.random.default_rng(seed)).items():
                res = selftest.check_gradients(fn, inputs, eps=1e-3, seed=seed)
                assert res.ok(1e-3), f"{name} (seed {seed}): {res}"
                worst = max(worst, res.max_rel_error)
        e2e = selftest.end_to_end_gradient(seed=0, entries_per_tensor=2)
        assert e2e.ok(1e-3), f"end to end: {e2e}"
        elapsed = time.perf_counter() - start
        assert elapsed < 180, f"took {elapsed:.0f}s"
        note["detail"] = f"ops max {worst:.1e}, end-to-end max {e2e.max_rel_error:.1e}, {elapsed:.0f}s"


def test_2_architecture_shapes_on_64x128_with_128_disparities():
    with criterion(2, "architecture conformance") as note:
        config = net.ModelConfig(128, "paper")
        weights = net.init_weights(config, 0)
        rng = np.random.default_rng(0)
        trace = conformance.ShapeRecorder()
        with no_grad():
            res = net.full_forward(rng.standard_normal((64, 128, 3)), rng.standard_normal((64, 128, 3)), weights, trace=trace)
        actual = conformance.traced_layer_shapes(trace)
        actual["conv_2"] = conformance.traced_layer_shapes(trace, "right")["conv_2"]
        problems = conformance.compare_shapes(actual, conformance.expected_output_shapes(64, 128, config))
        kernels = {name: p.kernel.shape for name, p in weights.layers.items()}
        problems += conformance.compare_shapes(kernels, conformance.expected_kernel_shapes(config))
        assert problems == [], problems
        assert actual["cost_volume"] == (129, 64, 128, 64)
        assert actual["upconv3d_2"] == (129, 64, 128, 1)
        assert actual["transpose"] == (64, 128, 129)
        assert res.final_cost.shape == (64, 128, 129)
        note["detail"] = f"{len(conformance.STEM_TABLE) + len(conformance.AGGREGATION_TABLE) + 1} layer shapes and {len(kernels)} kernels match"


def test_3_cost_volumes_and_wta_equal_loop_oracles():
    with criterion(3, "oracle equivalence") as note:
        rng = np.random.default_rng(0)
        count, worst = 0, 0.0
        for h, w, d in itertools.product(range(1, 9), range(1, 9), range(1, 5)):
            for offset in (0, d):
                left = rng.standard_normal((h, w, 3)).astype(np.float32)
                right = rng.standard_normal((h, w + offset, 3)).astype(np.float32)
                concat = net.build_cost_volume_concat(Tensor(left), Tensor(right), d, offset).data
                assert np.array_equal(concat, oracles.cost_volume_concat_loops(left, right, d, offset)), (h, w, d, offset)
                dot = net.build_cost_volume_dot(Tensor(left), Tensor(right), d, offset).data
                worst = max(worst, float(np.abs(dot - oracles.cost_volume_dot_loops(left, right, d, offset)).max()))
                count += 1
            cost = rng.integers(0, 3, (h, w, d + 1)).astype(np.float32)  # plenty of ties
            assert np.array_equal(net.wta(cost), oracles.argmin_loops(cost)), (h, w, d)
        assert worst <= 1e-6
        note["detail"] = f"{count} geometries, concat exact, dot max diff {worst:.1e}, WTA exact"


def _overfit_sample():
    s = data_io.generate_synthetic_pair(32, 64, 16, "constant", texture_seed=0, value=5)
    return data_io.StereoSample(data_io.normalize(s.left), data_io.normalize(s.right), s.gt_disparity, s.valid_mask)


def test_4_overfits_one_synthetic_pair():
    with criterion(4, "desk-scale overfit") as note:
        sample = _overfit_sample()
        config = training.TrainConfig(batch_size=1, crop_height=32, crop_width=32, max_disparity=16, profile="tiny",
                                      iterations=2000, seed=7)
        state = {}

        def evaluate(it, loss, weights):
            if it % 25:
                return False
            with no_grad():
                pred = net.full_forward(sample.left, sample.right, weights).disparity
            rep = metrics.report(pred, sample.gt_disparity, sample.valid_mask)
            state.update(it=it, rep=rep)
            return rep.epe < 1.0 and rep.err_gt3 == 0.0

        start = time.perf_counter()
        with threadpool_limits(limits=1):
            training.train_loop([sample], config, callback=evaluate)
        rep = state["rep"]
        note["detail"] = (f"EPE {rep.epe:.3f}px, >3px {100 * rep.err_gt3:.2f}% after {state['it']} iterations "
                          f"({time.perf_counter() - start:.0f}s)")
        assert rep.epe < 1.0 and rep.err_gt3 == 0.0
        assert state["it"] <= 2000


def test_5_default_configuration_matches_the_protocol(capsys):
    with criterion(5, "protocol parity") as note:
        c = training.TrainConfig()
        assert (c.learning_rate, c.batch_size, c.crop_height, c.crop_width, c.max_disparity, c.optimizer) == (
            0.001, 8, 58, 58, 128, "adagrad")
        assert cli.main(["train", "--print-config"]) == 0
        echo = capsys.readouterr().out.splitlines()
        for line in ("lr=0.001", "batch=8", "crop=58x58", "D=128", "optimizer=adagrad"):
            assert line in echo, line
        note["detail"] = "lr=0.001 batch=8 crop=58x58 D=128 optimizer=adagrad"


def test_6_metrics_equal_loop_oracles():
    with criterion(6, "metric oracles") as note:
        gt = np.full((2, 2), 10.0)
        pred = gt + np.array([[0.0, 2.5], [4.0, 6.0]])
        hand = metrics.report(pred, gt, np.ones((2, 2), bool))
        assert (hand.err_gt2, hand.err_gt3, hand.err_gt5, hand.epe) == (0.75, 0.5, 0.25, 3.125)
        rng = np.random.default_rng(6)
        worst = 0.0
        for _ in range(100):
            p, g = rng.random((2, 8, 8)) * 40
            mask = rng.random((8, 8)) > 0.25
            rep = metrics.report(p, g, mask)
            ref = oracles.metrics_loops(p, g, mask)
            worst = max(worst, *(abs(a - b) for a, b in zip((rep.err_gt2, rep.err_gt3, rep.err_gt5, rep.epe, rep.d1), ref)))
        assert worst <= 1e-9
        note["detail"] = f"hand case exact, 100 grids max diff {worst:.1e}"


def test_7_training_and_prediction_are_deterministic(tmp_path):
    with criterion(7, "determinism") as note:
        sample = _overfit_sample()
        config = training.TrainConfig(batch_size=2, crop_height=32, crop_width=32, max_disparity=16, profile="tiny",
                                      iterations=10, seed=11)
        logs, checkpoints = [], []
        with threadpool_limits(limits=1):
            for run in ("a", "b"):
                training.train_loop([sample], config, log_path=tmp_path / f"{run}.log", checkpoint_dir=tmp_path / run)
                logs.append((tmp_path / f"{run}.log").read_bytes())
                checkpoints.append((tmp_path / run / "checkpoint_0000010.csmd").read_bytes())
            assert len(logs[0].splitlines()) == 10
            assert logs[0] == logs[1]
            assert checkpoints[0] == checkpoints[1]
            weights = data_io.load_checkpoint(tmp_path / "a" / "checkpoint_0000010.csmd")
            preds = [cli.predict_pair(weights, sample.left, sample.right) for _ in range(2)]
        assert np.array_equal(preds[0].disparity, preds[1].disparity)
        assert preds[0].final_cost.data.tobytes() == preds[1].final_cost.data.tobytes()
        note["detail"] = "10-iteration loss logs, checkpoints and predictions bitwise identical"


def test_8_io_round_trips(tmp_path):
    with criterion(8, "I/O round trips") as note:
        weights = net.init_weights(net.ModelConfig(16, "tiny"), 8)
        data_io.save_checkpoint(weights, tmp_path / "w.csmd")
        back = data_io.load_checkpoint(tmp_path / "w.csmd").state_dict()
        assert all(arr.tobytes() == back[k].tobytes() for k, arr in weights.state_dict().items())

        rng = np.random.default_rng(8)
        disp = rng.integers(1, 65536, (24, 40)) / 256.0
        data_io.save_disparity_png(disp, tmp_path / "d.png")
        loaded, mask = data_io.load_disparity_png(tmp_path / "d.png")
        assert mask.all() and np.array_equal(loaded.astype(np.float64), disp)

        checked = 0
        for scene, seed in itertools.product(data_io.SCENES, range(3)):
            s = data_io.generate_synthetic_pair(24, 64, 20, scene, texture_seed=seed)
            warped, ok = data_io.warp_right_to_left(s.right, s.gt_disparity)
            valid = s.valid_mask & ok
            assert np.array_equal(warped[valid], s.left[valid])
            checked += int(valid.sum())
        note["detail"] = f"checkpoint bitwise, PNG exact on 1/256 grid, warp identity on {checked} pixels"


if __name__ == "__main__":
    import sys

    import pytest

    sys.exit(pytest.main([__file__, "-v"]))
