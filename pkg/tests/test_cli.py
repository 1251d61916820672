import subprocess
import sys

import numpy as np
import pytest

from cascade_stereo import cli, data_io, net

DEFAULT_ECHO = """\
lr=0.001
batch=8
crop=58x58
D=128
optimizer=adagrad
adagrad_epsilon=1e-08
iterations=400000
checkpoint_interval=10000
profile=paper
seed=0
threads=1
"""

SMALL = ["--profile", "tiny", "--max-disparity", "8", "--batch", "1", "--crop-h", "16", "--crop-w", "16"]


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_default_configuration_echo(capsys):
    code, out, _ = run(capsys, "train", "--print-config")
    assert code == 0
    assert out == DEFAULT_ECHO


def test_flags_override_config_file_which_overrides_defaults(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# comment\nlr = 0.01\nbatch_size=4\ncrop-h=32\nprofile=tiny\n")
    code, out, _ = run(capsys, "train", "--print-config", "--config", cfg, "--batch", "2")
    assert code == 0
    lines = out.splitlines()
    assert "lr=0.01" in lines and "batch=2" in lines and "crop=32x58" in lines and "profile=tiny" in lines
    assert "D=128" in lines


@pytest.mark.parametrize(
    "argv",
    [
        ["train", "--bogus"],
        ["train", "--lr", "-1", "--print-config"],
        ["train", "--profile", "huge"],
        ["predict", "--left", "x.png"],
        ["train", "--scene", "spiral:3"],
        [],
    ],
)
def test_usage_errors_exit_1(argv, capsys):
    assert run(capsys, *argv)[0] == 1


def test_unknown_config_key_is_a_usage_error(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("learning_rat=0.1\n")
    code, _, err = run(capsys, "train", "--print-config", "--config", cfg)
    assert code == 1 and "learning_rat" in err


def test_train_needs_exactly_one_data_source(tmp_path, capsys):
    assert run(capsys, "train", "--out", tmp_path / "r")[0] == 1
    assert run(capsys, "train", "--data", tmp_path, "--scene", "constant:3")[0] == 1


def test_missing_gt_directory_fails_before_any_output(tmp_path, capsys):
    ds = tmp_path / "ds"
    (ds / "left").mkdir(parents=True)
    (ds / "right").mkdir()
    code, _, err = run(capsys, "train", "--data", ds, "--out", tmp_path / "run", *SMALL)
    assert code == 2 and "disp" in err
    assert not (tmp_path / "run").exists()


def test_synth_train_predict_eval_round_trip(tmp_path, capsys):
    ds, runs = tmp_path / "ds", tmp_path / "run"
    assert run(capsys, "synth", "--scene", "constant:3", "--size", "16x32", "--max-disparity", "8", "--count", "2",
               "--out", ds)[0] == 0
    assert sorted(p.name for p in (ds / "disp").iterdir()) == ["000000.png", "000001.png"]

    code, out, _ = run(capsys, "train", "--data", ds, "--iters", "3", "--checkpoint-interval", "2", "--out", runs, *SMALL)
    assert code == 0 and "D=8" in out
    assert sorted(p.name for p in runs.iterdir()) == ["checkpoint_0000002.csmd", "checkpoint_0000003.csmd", "loss.log"]
    assert len((runs / "loss.log").read_text().splitlines()) == 3

    ckpt = runs / "checkpoint_0000003.csmd"
    args = ["predict", "--checkpoint", ckpt, "--left", ds / "left" / "000000.png", "--right", ds / "right" / "000000.png"]
    assert run(capsys, *args, "--out", tmp_path / "p1" / "000000.png", "--heatmap", tmp_path / "h.png")[0] == 0
    assert run(capsys, *args, "--out", tmp_path / "p2" / "000000.png")[0] == 0
    assert (tmp_path / "p1" / "000000.png").read_bytes() == (tmp_path / "p2" / "000000.png").read_bytes()
    assert (tmp_path / "h.png").exists()
    disp, _ = data_io.load_disparity_png(tmp_path / "p1" / "000000.png")
    assert disp.shape == (16, 32)

    code, out, _ = run(capsys, "eval", "--pred", ds / "disp", "--gt", ds / "disp", "--out", tmp_path / "r.csv")
    assert code == 0
    assert "aggregate/all" in out
    rows = (tmp_path / "r.csv").read_text().splitlines()
    assert rows[-1].startswith("aggregate/all,0.0,0.0,0.0,0.0,0.0,")


def test_predict_with_missing_checkpoint_exits_2(tmp_path, capsys):
    data_io.save_image(np.zeros((16, 16, 3)), tmp_path / "l.png")
    code, _, err = run(capsys, "predict", "--checkpoint", tmp_path / "nope.csmd", "--left", tmp_path / "l.png",
                       "--right", tmp_path / "l.png", "--out", tmp_path / "d.png")
    assert code == 2 and "nope.csmd" in err
    assert not (tmp_path / "d.png").exists()


def test_predict_rejects_checkpoint_for_another_model(tmp_path, capsys):
    data_io.save_checkpoint(net.init_weights(net.ModelConfig(8, "tiny")), tmp_path / "w.csmd")
    data_io.save_image(np.zeros((16, 16, 3)), tmp_path / "l.png")
    code, _, err = run(capsys, "predict", "--checkpoint", tmp_path / "w.csmd", "--max-disparity", "16",
                       "--left", tmp_path / "l.png", "--right", tmp_path / "l.png", "--out", tmp_path / "d.png")
    assert code == 2 and "kernel" in err


def test_eval_names_the_missing_file(tmp_path, capsys):
    for d in ("pred", "gt"):
        (tmp_path / d).mkdir()
    gt = np.full((4, 4), 2.0)
    for name in ("a", "b"):
        data_io.save_disparity_png(gt, tmp_path / "gt" / f"{name}.png")
    data_io.save_disparity_png(gt, tmp_path / "pred" / "a.png")
    code, _, err = run(capsys, "eval", "--pred", tmp_path / "pred", "--gt", tmp_path / "gt")
    assert code == 2 and "b:" in err


def test_eval_hand_case_with_non_occluded_mask(tmp_path, capsys):
    gt = np.full((5, 5), 10.0)
    pred = gt.copy()
    pred[0, :4] = [10.0, 12.5, 14.0, 16.0]
    noc = np.ones((5, 5), bool)
    noc[0, 3] = False
    data_io.save_disparity_png(pred, tmp_path / "p.png")
    data_io.save_disparity_png(gt, tmp_path / "g.png")
    data_io.save_disparity_png(gt, tmp_path / "n.png", noc)
    code, out, _ = run(capsys, "eval", "--pred", tmp_path / "p.png", "--gt", tmp_path / "g.png", "--noc", tmp_path / "n.png",
                       "--out", tmp_path / "r.csv")
    assert code == 0
    rows = {r.split(",")[0]: r.split(",")[1:] for r in (tmp_path / "r.csv").read_text().splitlines()[1:]}
    assert [float(v) for v in rows["p/all"][:4]] == [3 / 25, 2 / 25, 1 / 25, 12.5 / 25]
    assert float(rows["p/non_occluded"][1]) == pytest.approx(1 / 24)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numeric_abort_exits_3_and_leaves_no_log(tmp_path, capsys):
    code, _, err = run(capsys, "train", "--scene", "constant:3", "--lr", "1e30", "--iters", "20",
                       "--out", tmp_path / "run", *SMALL)
    assert code == 3 and "non-finite" in err
    assert not (tmp_path / "run" / "loss.log").exists()
    assert not (tmp_path / "run" / ".loss.log.partial").exists()


def test_selftest_rejects_unknown_perturbation(capsys):
    assert run(capsys, "selftest", "--perturb", "no_such_op")[0] == 1


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "cascade_stereo", "train", "--print-config"], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout == DEFAULT_ECHO
