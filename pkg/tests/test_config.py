import pytest
from pydantic import ValidationError

from trisr.config import load_ini_config
from trisr.schemas import TrainingConfig


def write_ini(tmp_path, text):
    path = tmp_path / "run.ini"
    path.write_text(text)
    return path


def test_sections_flatten_into_training_config(tmp_path):
    path = write_ini(tmp_path, """
[train]
gamma = 2e-4
total_iters = 10
update_mode = sequential

[data]
window = 32
stride = 16

[model]
critic_stages = 8:2,16:2
""")
    values = load_ini_config(path)
    assert values["window"] == "32"
    cfg = TrainingConfig(**values)
    assert cfg.gamma == 2e-4
    assert cfg.window == 32
    assert cfg.critic_stages == [(8, 2), (16, 2)]
    assert cfg.update_mode.value == "sequential"


def test_unknown_section(tmp_path):
    with pytest.raises(ValueError):
        load_ini_config(write_ini(tmp_path, "[optimizer]\ngamma = 1\n"))


def test_key_in_two_sections(tmp_path):
    with pytest.raises(ValueError):
        load_ini_config(write_ini(tmp_path, "[train]\nseed = 1\n[data]\nseed = 2\n"))


def test_unknown_key_is_rejected(tmp_path):
    values = load_ini_config(write_ini(tmp_path, "[train]\nlearning_rate = 1\n"))
    with pytest.raises(ValidationError):
        TrainingConfig(**values)


@pytest.mark.parametrize("bad", [
    {"window": 17, "stride": 8},
    {"window": 16, "stride": 32},
    {"window": 16, "critic_stages": "4:2,4:2,4:2,4:2,4:2"},
    {"scale": 3},
    {"dtype": "float16"},
])
def test_invalid_geometry(bad):
    with pytest.raises(ValidationError):
        TrainingConfig(**bad)
