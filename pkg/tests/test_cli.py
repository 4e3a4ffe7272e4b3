import argparse
import csv
import io
import json

import numpy as np
import pytest

from trisr.cli import COMMANDS, build_parser, main
from trisr.exceptions import NonFiniteLoss
from trisr.volume_io import read_volume

TINY_INI = """
[train]
total_iters = 2
batch_size = 2
seed = 1
checkpoint_every = 0

[data]
window = 16
stride = 16

[model]
base_channels = 4
growth_channels = 2
num_rrdb = 1
critic_stages = 4:2,8:2
fe_base_channels = 2
"""


@pytest.fixture
def phantom_file(tmp_path):
    path = tmp_path / "hr.rvol"
    assert main(["phantom", "--dims", "32", "32", "32", "--seed", "2", "--out", str(path)]) == 0
    return path


@pytest.fixture
def tiny_ini(tmp_path):
    path = tmp_path / "tiny.ini"
    path.write_text(TINY_INI)
    return path


def test_help():
    assert main(["--help"]) == 0


def subcommand_flags(command):
    parser = build_parser()
    sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    return [opt for action in sub.choices[command]._actions for opt in action.option_strings]


@pytest.mark.parametrize("command", sorted(COMMANDS))
def test_subcommand_help_lists_every_flag(command, capsys):
    assert main([command, "--help"]) == 0
    out = capsys.readouterr().out
    assert f"usage: trisr {command}" in out
    for flag in subcommand_flags(command):
        assert flag in out, flag


@pytest.mark.parametrize("command", sorted(COMMANDS))
def test_subcommand_bad_flag_is_usage_error(command):
    assert main([command, "--no-such-flag"]) == 1


def test_unknown_flag():
    assert main(["downsample", "--bogus"]) == 1
    assert main([]) == 1


def test_missing_input_is_data_error(tmp_path):
    assert main(["downsample", "--in", str(tmp_path / "nope.rvol"), "--out", str(tmp_path / "x.rvol")]) == 2


def test_corrupt_input_is_data_error(tmp_path):
    bad = tmp_path / "bad.rvol"
    bad.write_bytes(b"RVOL\x01")
    assert main(["downsample", "--in", str(bad), "--out", str(tmp_path / "x.rvol")]) == 2


def test_downsample_halves_dims(phantom_file, tmp_path):
    out = tmp_path / "lr.rvol"
    assert main(["downsample", "--in", str(phantom_file), "--out", str(out)]) == 0
    assert read_volume(out).dims == (16, 16, 16)


def test_convert_to_nifti(phantom_file, tmp_path):
    out = tmp_path / "hr.nii"
    assert main(["convert", "--in", str(phantom_file), "--out", str(out)]) == 0
    np.testing.assert_array_equal(read_volume(out).data, read_volume(phantom_file).data)


def test_patch_dry_run(phantom_file, capsys):
    assert main(["patch", "--in", str(phantom_file), "--window", "16", "--stride", "8", "--dry-run"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "W (32): 3 origins [0, 8, 16]"
    assert len(lines) == 3


def test_patch_writes_files(phantom_file, tmp_path):
    out = tmp_path / "patches"
    assert main(["patch", "--in", str(phantom_file), "--window", "16", "--stride", "16", "--out", str(out)]) == 0
    assert len(list(out.glob("patch_*.rvol"))) == 8


def test_patch_needs_out(phantom_file):
    assert main(["patch", "--in", str(phantom_file), "--window", "16", "--stride", "8"]) == 1


def test_eval_csv_on_stdout(phantom_file, capsys):
    assert main(["eval", "--ref", str(phantom_file), "--test", str(phantom_file), "--baseline"]) == 0
    rows = list(csv.reader(io.StringIO(capsys.readouterr().out)))
    assert rows[0][:5] == ["ref", "test", "psnr", "ssim", "nrmse"]
    assert len(rows) == 3
    assert float(rows[1][2]) == 99.0
    assert float(rows[1][3]) == pytest.approx(1.0)
    assert rows[2][1] == "trilinear-baseline"
    assert float(rows[2][2]) < 99.0


def test_eval_needs_a_test(phantom_file):
    assert main(["eval", "--ref", str(phantom_file)]) == 1


def test_train_then_infer(phantom_file, tiny_ini, tmp_path):
    run = tmp_path / "run"
    assert main(["train", "--data", str(phantom_file), "--out", str(run), "--config", str(tiny_ini)]) == 0
    assert (run / "generator.tsrc").is_file()
    assert json.loads((run / "config.json").read_text())["total_iters"] == 2

    lr = tmp_path / "lr.rvol"
    sr = tmp_path / "sr.rvol"
    assert main(["downsample", "--in", str(phantom_file), "--out", str(lr)]) == 0
    assert main([
        "infer", "--in", str(lr), "--checkpoint", str(run / "generator.tsrc"),
        "--out", str(sr), "--config", str(run / "config.json"),
    ]) == 0
    assert read_volume(sr).dims == (32, 32, 32)

    assert main([
        "train", "--data", str(phantom_file), "--out", str(run), "--config", str(tiny_ini),
        "--iters", "3", "--resume",
    ]) == 0
    assert len((run / "losses.csv").read_text().splitlines()) == 4


def test_invalid_config_is_usage_error(phantom_file, tiny_ini, tmp_path):
    args = ["train", "--data", str(phantom_file), "--out", str(tmp_path), "--config", str(tiny_ini)]
    assert main(args + ["--window", "15"]) == 1


def test_nonfinite_loss_exit_code(phantom_file, tiny_ini, tmp_path, mocker):
    mocker.patch("trisr.trainer.train", side_effect=NonFiniteLoss("loss is nan", iteration=3))
    args = ["train", "--data", str(phantom_file), "--out", str(tmp_path), "--config", str(tiny_ini)]
    assert main(args) == 3


def test_dynamics(tmp_path):
    out = tmp_path / "dyn"
    assert main(["dynamics", "--loss", "ragan", "--noise", "annealed", "--steps", "20", "--out", str(out)]) == 0
    csv_path = out / "trajectory_relativistic_annealed.csv"
    assert len(csv_path.read_text().splitlines()) == 22
    assert (out / "trajectory_relativistic_annealed.pgm").is_file()
