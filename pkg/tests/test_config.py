"""
Run configuration: settings.json defaults and key=value run files
"""

import json

import pytest

from modules.config import RunConfig, load_config, load_defaults, parse_config
from modules.errors import ConfigError


@pytest.fixture
def base():
    return RunConfig()


class TestDefaults:
    def test_settings_match_builtin_defaults(self):
        assert load_defaults() == RunConfig()

    def test_missing_settings_file(self, tmp_path):
        assert load_defaults(tmp_path / "absent.json") == RunConfig()

    def test_unknown_settings_key(self, tmp_path):
        path = tmp_path / "settings.json"
        path.write_text(json.dumps({"model": {"colour": "blue"}}))
        with pytest.raises(ConfigError) as info:
            load_defaults(path)
        assert info.value.key == "colour"

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "settings.json"
        path.write_text("{ not json")
        with pytest.raises(ConfigError):
            load_defaults(path)

    def test_application_section_is_skipped(self, tmp_path):
        path = tmp_path / "settings.json"
        path.write_text(json.dumps({"application": {"name": "x"}, "optimizer": {"steps": 7}}))
        assert load_defaults(path).steps == 7


class TestRunFile:
    def test_empty_text_keeps_defaults(self, base):
        assert parse_config("", base) == base

    def test_overrides(self, base):
        cfg = parse_config("lambda1=0.3\nsteps=20\nchannels=8, 16, 32\n", base)
        assert cfg.lambda1 == 0.3
        assert cfg.steps == 20
        assert cfg.channels == (8, 16, 32)
        assert cfg.lambda2 == base.lambda2

    def test_comments_and_export(self, base):
        cfg = parse_config("# run file\n\nexport seed=11\n", base)
        assert cfg.seed == 11

    @pytest.mark.parametrize("text,value", [("use_sa=false", False), ("use_sa=0", False),
                                            ("use_chpf=yes", True), ("use_ca=ON", True)])
    def test_booleans(self, base, text, value):
        key = text.split("=")[0]
        assert getattr(parse_config(text, base), key) is value

    def test_bad_value_names_key_and_line(self, base):
        with pytest.raises(ConfigError) as info:
            parse_config("lambda1=frog\n", base)
        assert info.value.key == "lambda1"
        assert info.value.line == 1
        assert "line 1" in str(info.value)

    def test_line_numbers_skip_comments(self, base):
        with pytest.raises(ConfigError) as info:
            parse_config("# header\n\nsteps=20\nlambda2=frog\n", base)
        assert (info.value.key, info.value.line) == ("lambda2", 4)

    def test_unknown_key(self, base):
        with pytest.raises(ConfigError) as info:
            parse_config("steps=3\ncolour=blue\n", base)
        assert (info.value.key, info.value.line) == ("colour", 2)

    @pytest.mark.parametrize("text,key", [("scale=3", "scale"), ("steps=-1", "steps"), ("beta1=1.0", "beta1"),
                                          ("lr=0", "lr"), ("image_size=30", "image_size"), ("channels=8,16", "channels"),
                                          ("use_ma=maybe", "use_ma"), ("patch=2.5", "patch")])
    def test_invalid_values(self, base, text, key):
        with pytest.raises(ConfigError) as info:
            parse_config(text, base)
        assert info.value.key == key

    def test_load_from_file(self, tmp_path, base):
        path = tmp_path / "run.cfg"
        path.write_text("steps=5\nuse_ma=false\n")
        cfg = load_config(path, base)
        assert (cfg.steps, cfg.use_ma) == (5, False)

    def test_no_file_returns_defaults(self, base):
        assert load_config(None, base) is base

    def test_unreadable_paths_raise_config_error(self, tmp_path, base):
        with pytest.raises(ConfigError, match="cannot read config file"):
            load_config(tmp_path / "absent.cfg", base)
        with pytest.raises(ConfigError, match="cannot read config file"):
            load_config(tmp_path, base)

    def test_non_utf8_file(self, tmp_path, base):
        path = tmp_path / "run.cfg"
        path.write_bytes(b"\xffsteps=5\n")
        with pytest.raises(ConfigError):
            load_config(path, base)


class TestRunConfig:
    def test_replace_validates(self, base):
        assert base.replace(steps=3).steps == 3
        with pytest.raises(ConfigError):
            base.replace(realign_every=0)

    def test_derived_objects(self, base):
        cfg = base.replace(channels=(4, 8, 8), use_sa=False, lambda2=0.2, lr=0.01)
        model = cfg.model_config()
        assert model.channels == (4, 8, 8)
        assert model.use_sa is False
        assert cfg.loss_weights().lambda2 == 0.2
        assert cfg.optimizer_state().lr == 0.01

    def test_as_dict_is_flat(self, base):
        values = base.as_dict()
        assert values["channels"] == "16,32,64"
        assert values["output_dir"] == "runs/default"
