from pathlib import Path

import pytest
import torch

from websod.checkpoint import DETECTOR_SCHEMA, RFR_SCHEMA, CheckpointError, load_state, read_header, save, state_digest
from websod.config import ConfigError, ExperimentConfig, load_config, parse_config
from websod.pipeline import load_detector, load_rfr, save_detector, save_rfr
from websod.rfr import RfrBlock

from conftest import small_detector


def test_detector_checkpoint_round_trip(tmp_path):
    model = small_detector(seed=3)
    digest = save_detector(tmp_path / "m.safetensors", model, "base_train")
    again = load_detector(tmp_path / "m.safetensors")
    assert state_digest(again) == digest == state_digest(model)
    assert again.cfg == model.cfg
    assert read_header(tmp_path / "m.safetensors")["stage"] == "base_train"


def test_rfr_checkpoint_round_trip(tmp_path):
    torch.manual_seed(0)
    block = RfrBlock(8, 3)
    save_rfr(tmp_path / "r.safetensors", block)
    again = load_rfr(tmp_path / "r.safetensors")
    assert state_digest(again) == state_digest(block)
    assert again.conv1.out_channels == 3


def test_digest_sensitive_to_values_and_names():
    a = {"w": torch.zeros(3)}
    assert state_digest(a) == state_digest({"w": torch.zeros(3)})
    assert state_digest(a) != state_digest({"w": torch.tensor([0.0, 0.0, 1e-30])})
    assert state_digest(a) != state_digest({"v": torch.zeros(3)})
    assert state_digest(a) != state_digest({"w": torch.zeros(3, dtype=torch.float64)})


def test_wrong_schema_rejected(tmp_path):
    save(tmp_path / "r.safetensors", RfrBlock(4), RFR_SCHEMA, {"channels": 4})
    with pytest.raises(CheckpointError, match="schema"):
        load_state(tmp_path / "r.safetensors", DETECTOR_SCHEMA)


def test_missing_checkpoint(tmp_path):
    with pytest.raises(CheckpointError, match="not found"):
        load_state(tmp_path / "nope.safetensors", DETECTOR_SCHEMA)


def test_corrupted_payload_detected(tmp_path):
    path = tmp_path / "m.safetensors"
    save_detector(path, small_detector(seed=1), "base_train")
    raw = bytearray(path.read_bytes())
    raw[-5] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="digest"):
        load_detector(path)


def test_parse_config_sections_and_top_level_keys():
    cfg = parse_config("seed = 7\n[loss]\nlambda3 = 0.25\n[eval]\ninterpolation = all\n")
    assert cfg.seed == 7
    assert cfg.loss.lambda3 == 0.25
    assert cfg.eval.interpolation == "all"
    assert cfg.loss.lambda1 == 1.0


def test_overrides_win_over_file():
    cfg = parse_config("[loss]\nlambda3 = 0.25\n", {"loss.lambda3": "0.5", "seed": 3})
    assert cfg.loss.lambda3 == 0.5 and cfg.seed == 3


@pytest.mark.parametrize("text", ["[loss]\nlambda9 = 1\n", "[nosuch]\nx = 1\n", "[loss]\nlambda1 = big\n",
                                  "[loss\nlambda1 = 1\n"])
def test_bad_config_rejected(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_ini_round_trip():
    cfg = ExperimentConfig()
    cfg.set("backbone.channels", 16)
    cfg.set("estimator.score_threshold", "0.7")
    assert parse_config(cfg.to_ini()).flat() == cfg.flat()


def test_committed_config_loads():
    cfg = load_config(Path(__file__).resolve().parent.parent / "configs" / "desk.ini")
    assert cfg.seed == 0
    assert cfg.loss.lambda3 == 0.1
    assert cfg.estimator.score_threshold == 0.8
    assert ExperimentConfig().loss.lambda3 == 1.0
