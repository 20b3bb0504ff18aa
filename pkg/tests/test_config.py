import json

import pytest

from stereovox.config import Config, load_config, full_scale_config, save_config


def test_defaults_are_desk_scale():
    cfg = Config()
    assert (cfg.image_height, cfg.image_width, cfg.grid_size, cfg.voxel_size_m) == (64, 128, 32, 0.5)
    assert (cfg.epochs, cfg.batch_size, cfg.lr, cfg.beta1, cfg.beta2) == (30, 16, 1e-3, 0.9, 0.999)
    assert cfg.decoder().resolutions == [8, 16, 32]
    assert cfg.grid().z_max_m == 16.0


def test_level_count_must_fit_grid():
    with pytest.raises(ValueError, match="grid_size"):
        Config(n_levels=4)


def test_round_trip(tmp_path):
    cfg = Config(lr=3e-4, loss_weights=[0.5, 0.3, 0.2], decode_mode="dense")
    save_config(cfg, tmp_path / "c.json")
    assert load_config(tmp_path / "c.json") == cfg
    assert json.loads((tmp_path / "c.json").read_text())["lr"] == 3e-4


def test_unknown_keys_rejected():
    d = Config().to_dict()
    d["learning_rate"] = 1.0
    with pytest.raises(KeyError, match="learning_rate"):
        Config.from_dict(d)


def test_weights():
    assert sum(Config().weights().w) == pytest.approx(1.0)
    assert Config(loss_weights=[1, 1, 1]).weights().w == (1, 1, 1)
    with pytest.raises(ValueError):
        Config(loss_weights=[1, 1]).weights()


def test_eval_mode_defaults():
    assert Config().eval_mode() == "sparse_pred"
    assert Config(decode_mode="dense").eval_mode() == "dense"
    assert Config(eval_decode_mode="sparse_gt").eval_mode() == "sparse_gt"


def test_plan_sources():
    assert len(Config(cv_source="full").plan()) == 48
    assert len(Config(cv_source="even", cv_even_step=4).plan()) == 12
    assert Config().plan().source == "voxel"
    with pytest.raises(ValueError):
        Config(cv_source="magic").plan()


def test_full_scale_config():
    cfg = full_scale_config()
    assert cfg.grid_size == 64 and cfg.n_levels == 4 and cfg.image_channels == 3
    assert cfg.weights().w == (0.30, 0.27, 0.23, 0.20)
    assert len(cfg.plan()) > 0
