import dataclasses

import pytest

from salinst.config import (RunConfig, TrainConfig, config_dump,
                            config_from_dict, config_load)
from salinst.training import lr_at


class TestRoundtrip:
    def test_dump_load_identity(self, tmp_path):
        cfg = dataclasses.replace(RunConfig(),
                                  train=TrainConfig(steps=123, learning_rate=0.01))
        path = tmp_path / "config.json"
        config_dump(cfg, path)
        assert config_load(path) == cfg

    def test_partial_payload_uses_defaults(self):
        cfg = config_from_dict({"train": {"steps": 7}})
        assert cfg.train.steps == 7
        assert cfg.train.learning_rate == RunConfig().train.learning_rate
        assert cfg.mask.alpha == pytest.approx(1 / 3)

    def test_lists_become_tuples(self):
        cfg = config_from_dict({"backbone": {"widths": [8, 8, 8, 8]}})
        assert cfg.backbone.widths == (8, 8, 8, 8)


class TestValidation:
    def test_unknown_top_level_key(self):
        with pytest.raises(ValueError, match="unknown keys.*'optimizer'"):
            config_from_dict({"optimizer": {}})

    def test_unknown_nested_key_names_path(self):
        with pytest.raises(ValueError, match=r"config\.train.*'lr'"):
            config_from_dict({"train": {"lr": 0.1}})

    def test_invalid_json_file(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{not json")
        with pytest.raises(ValueError, match="not valid JSON"):
            config_load(path)


class TestDefaults:
    def test_training_protocol(self):
        t = RunConfig().train
        assert t.learning_rate == 0.004
        assert t.lr_drop_factor == 10.0
        assert t.momentum == 0.9
        assert t.weight_decay == 1e-4

    def test_inference_protocol(self):
        i = RunConfig().infer
        assert i.proposals == 20

    def test_schedule(self):
        cfg = dataclasses.replace(RunConfig(),
                                  train=TrainConfig(learning_rate=0.01,
                                                    lr_drop_step=100))
        assert lr_at(0, cfg) == 0.01
        assert lr_at(99, cfg) == 0.01
        assert lr_at(100, cfg) == pytest.approx(0.001)
        assert lr_at(500, cfg) == pytest.approx(0.001)
