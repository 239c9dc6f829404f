import pytest

from adura.config import KNOWN_KEYS, format_config, load_config, parse_config_text, resolve
from adura.errors import ConfigError
from adura.layers import NetworkConfig
from adura.losses import LossWeights
from adura.training import TrainConfig


class TestParse:
    def test_pairs(self):
        assert parse_config_text("a=1\nb = two\n") == {"a": "1", "b": "two"}

    def test_comments_and_blank_lines(self):
        text = "# header\n\nepochs=3  # trailing\n   \n"
        assert parse_config_text(text) == {"epochs": "3"}

    def test_value_may_contain_equals(self):
        assert parse_config_text("k=a=b") == {"k": "a=b"}

    def test_duplicate_key(self):
        with pytest.raises(ConfigError) as exc:
            parse_config_text("epochs=1\nepochs=2\n", "run.cfg")
        assert exc.value.key == "epochs"
        assert "run.cfg:2" in str(exc.value)

    @pytest.mark.parametrize("line", ["no_separator", "=3"])
    def test_malformed_line(self, line):
        with pytest.raises(ConfigError) as exc:
            parse_config_text(f"epochs=1\n{line}\n", "run.cfg")
        assert exc.value.key == "run.cfg:2"

    def test_load_from_file(self, tmp_path):
        p = tmp_path / "c.cfg"
        p.write_text("batch_size=8\n")
        assert load_config(p) == {"batch_size": "8"}

    def test_missing_file(self, tmp_path):
        with pytest.raises(OSError):
            load_config(tmp_path / "absent.cfg")


class TestResolve:
    def test_empty_gives_defaults(self):
        net, w, t = resolve({})
        assert net == NetworkConfig()
        assert w == LossWeights()
        assert t == TrainConfig()

    def test_values_are_typed(self):
        net, w, t = resolve({"growth_rate": "6", "lambda_dir": "0.5", "epochs": "4", "strategy": "u-zero"})
        assert net.growth_rate == 6
        assert w.lambda_dir == 0.5
        assert t.epochs == 4
        assert t.strategy == "u-zero"

    def test_unknown_key(self):
        with pytest.raises(ConfigError) as exc:
            resolve({"epochs": "2", "learning_rat": "1"})
        assert exc.value.key == "learning_rat"

    def test_bad_type_names_key(self):
        with pytest.raises(ConfigError) as exc:
            resolve({"epochs": "many"})
        assert exc.value.key == "epochs"

    def test_known_keys_unique(self):
        assert len(KNOWN_KEYS) == len(set(KNOWN_KEYS))


class TestFormat:
    def test_sorted(self):
        assert format_config({"b": 2, "a": 1}) == "a=1\nb=2\n"

    def test_round_trip(self):
        net, w, t = resolve({})
        flat = {**net.to_dict(), **w.to_dict(), **t.to_dict()}
        again = parse_config_text(format_config(flat))
        assert resolve(again) == (net, w, t)
