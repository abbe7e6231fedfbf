import pytest

from mmkg_align.config import (ConfigError, IterativeConfig, RunConfig,
                               apply_overrides, config_from_dict)


class TestRoundTrip:
    def test_defaults_validate(self):
        RunConfig().validate()

    def test_dict_round_trip(self):
        cfg = RunConfig(lr=1e-3, modalities=("structure", "name"),
                        iterative=IterativeConfig(start_epoch=60, every=15))
        again = config_from_dict(cfg.to_dict())
        assert again == cfg

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown config key"):
            config_from_dict({"learning_rate": 0.1})

    def test_unknown_nested_key_rejected(self):
        with pytest.raises(ConfigError, match="iterative"):
            config_from_dict({"iterative": {"warmup": 3}})


class TestOverrides:
    def test_scalar_and_nested(self):
        cfg = apply_overrides(RunConfig(), [
            "lr=0.002", "epochs=77", "distill=off",
            "iterative.start_epoch=60", "modalities=structure,name",
        ])
        assert cfg.lr == 0.002
        assert cfg.epochs == 77
        assert cfg.distill is False
        assert cfg.iterative.start_epoch == 60
        assert cfg.modalities == ("structure", "name")

    def test_bool_spellings(self):
        cfg = apply_overrides(RunConfig(), ["distill=FALSE", "adaptive_weights=on"])
        assert cfg.distill is False and cfg.adaptive_weights is True

    def test_bad_values(self):
        for bad in ("lr=abc", "epochs=1.5", "distill=sometimes", "epochs"):
            with pytest.raises(ConfigError):
                apply_overrides(RunConfig(), [bad])

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="unknown config key"):
            apply_overrides(RunConfig(), ["momentum=0.9"])
        with pytest.raises(ConfigError, match="unknown config key"):
            apply_overrides(RunConfig(), ["iterative.momentum=0.9"])


class TestValidation:
    @pytest.mark.parametrize("field,value", [
        ("batch_size", 1),
        ("dropout", 1.0),
        ("train_ratio", 0.0),
        ("dev_fraction", 1.0),
        ("direction", "up"),
        ("candidates", "some"),
        ("unsupervised_mode", "audio"),
        ("modalities", ()),
        ("modalities", ("structure", "sound")),
        ("tau_contrastive", 0.0),
        ("epochs", 0),
    ])
    def test_rejects(self, field, value):
        cfg = RunConfig(**{field: value})
        with pytest.raises(ConfigError):
            cfg.validate()

    def test_iterative_schedule_checked(self):
        cfg = RunConfig(iterative=IterativeConfig(every=0))
        with pytest.raises(ConfigError):
            cfg.validate()
