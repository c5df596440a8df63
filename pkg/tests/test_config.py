import json

import pytest

from vibekit import ConfigError
from vibekit.config import RunConfig


class TestDefaults:
    def test_default_config_valid(self):
        cfg = RunConfig().validate()
        assert cfg.sampler_steps == 50
        assert cfg.denoising_strength == 0.7
        assert cfg.guidance_scale == 5.0

    def test_hash_stable_across_instances(self):
        assert RunConfig().config_hash() == RunConfig().config_hash()

    def test_hash_changes_with_fields(self):
        assert RunConfig().config_hash() != RunConfig(seed=1).config_hash()

    def test_canonical_json_round_trips(self):
        cfg = RunConfig(seed=3, window=(4, 4))
        back = RunConfig.from_dict(json.loads(cfg.canonical_json()))
        assert back == cfg


class TestValidation:
    @pytest.mark.parametrize("overrides,fragment", [
        ({"seed": -1}, "seed"),
        ({"d": 7}, "multiple of 4"),
        ({"d": 16, "n_heads": 3}, "n_heads"),
        ({"n_layers": 0}, "n_layers"),
        ({"window": (3, 4)}, "even"),
        ({"window": (16, 16)}, "smaller than the high-res grid"),
        ({"pool_ratio": 0}, "pool_ratio"),
        ({"pool_ratio": 3}, "not divisible"),
        ({"hfato_factor": 3}, "hfato_factor"),
        ({"hfato_up": "cubic"}, "hfato_up"),
        ({"hfato_variant": "other"}, "hfato_variant"),
        ({"lora_targets": ()}, "lora_targets"),
        ({"lora_targets": ("attn",)}, "unknown lora targets"),
        ({"lora_rank": 99}, "lora_rank"),
        ({"lora_alpha": 0.0}, "lora_alpha"),
        ({"lr": 0.0}, "lr"),
        ({"beta1": 1.0}, "beta1"),
        ({"steps_stage1": -1}, "steps_stage1"),
        ({"pretrain_steps": -2}, "pretrain_steps"),
        ({"fm_weight": "cosine"}, "fm_weight"),
        ({"t_min": 0.0}, "t_min"),
        ({"sampler_method": "rk4"}, "sampler_method"),
        ({"sampler_steps": 0}, "sampler_steps"),
        ({"denoising_strength": 1.5}, "denoising_strength"),
    ])
    def test_each_rule_fires(self, overrides, fragment):
        with pytest.raises(ConfigError) as e:
            RunConfig(**overrides).validate()
        assert fragment in str(e.value)

    def test_problems_aggregate(self):
        with pytest.raises(ConfigError) as e:
            RunConfig(d=7, lr=0.0, sampler_method="rk4").validate()
        msg = str(e.value)
        assert msg.count("- ") >= 3

    def test_from_dict_rejects_unknown_keys(self):
        with pytest.raises(ConfigError, match="unknown config key"):
            RunConfig.from_dict({"spam": 1})

    def test_from_json_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            RunConfig.from_json(str(tmp_path / "nope.json"))

    def test_from_json_bad_syntax(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text("{not json")
        with pytest.raises(ConfigError, match="not valid UTF-8 JSON"):
            RunConfig.from_json(str(p))

    def test_from_json_non_object(self, tmp_path):
        p = tmp_path / "arr.json"
        p.write_text("[1, 2]")
        with pytest.raises(ConfigError, match="root must be a JSON object"):
            RunConfig.from_json(str(p))


class TestDerivedConfigs:
    def test_model_config_modes(self):
        cfg = RunConfig().validate()
        dense = cfg.model_config(attn_mode="dense")
        assert dense.window is None and dense.coarse is None
        gclfa = cfg.model_config(attn_mode="gclfa", grid=cfg.high_res)
        assert gclfa.window.w == cfg.window[0]
        assert gclfa.coarse.s == cfg.pool_ratio

    def test_adam_and_degradation(self):
        cfg = RunConfig(lr=2e-3, hfato_factor=4, high_res=(16, 16), low_res=(8, 8),
                        hfato_up="bilinear").validate()
        assert cfg.adam_config().lr == 2e-3
        deg = cfg.degradation_config()
        assert deg.factor == 4 and deg.up == "bilinear"
