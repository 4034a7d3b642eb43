"""Flat key-value config parsing, seed precedence, canonical emission."""

from datetime import date

import numpy as np
import pytest

from bayesmtr.config import (
    ConfigError,
    emit_resolved,
    parse_config_text,
    resolve_config,
)
from bayesmtr.seeding import ENV_SEED_VAR


def write_config(tmp_path, text, name="run.cfg"):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return path


class TestParsing:
    def test_basic_keys(self, tmp_path):
        path = write_config(
            tmp_path,
            "seed = 42\n"
            "onset = 2020-04-15\n"
            "train.epochs = 7\n"
            "generator.n_patients = 20\n"
            "predict.z = 2.5\n",
        )
        cfg = resolve_config(path)
        assert cfg.seed == 42
        assert cfg.onset == date(2020, 4, 15)
        assert cfg.train.epochs == 7
        assert cfg.generator.n_patients == 20
        assert cfg.z == 2.5

    def test_comments_and_blank_lines_ignored(self):
        raw = parse_config_text("# comment\n\nseed = 1\n")
        assert raw == {"seed": "1"}

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown key"):
            parse_config_text("train.momentum = 0.9\n")

    def test_missing_equals_rejected(self):
        with pytest.raises(ConfigError, match="key = value"):
            parse_config_text("just some text\n")

    def test_bad_int_rejected(self, tmp_path):
        path = write_config(tmp_path, "seed = 1\ntrain.epochs = many\n")
        with pytest.raises(ConfigError, match="train.epochs"):
            resolve_config(path)

    def test_bad_date_rejected(self, tmp_path):
        path = write_config(tmp_path, "seed = 1\nonset = 15/04/2020\n")
        with pytest.raises(ConfigError, match="ISO date"):
            resolve_config(path)

    def test_matrix_value(self, tmp_path):
        path = write_config(
            tmp_path,
            "seed = 1\n"
            "generator.correlation = 1,0,0,0; 0,1,0,0; 0,0,1,0; 0,0,0,1\n",
        )
        cfg = resolve_config(path)
        np.testing.assert_array_equal(cfg.generator.correlation, np.eye(4))

    def test_vector_value(self, tmp_path):
        path = write_config(tmp_path, "seed = 1\ngenerator.shift = 0.1,0.2,0.3,0.4\n")
        cfg = resolve_config(path)
        np.testing.assert_allclose(cfg.generator.shift, [0.1, 0.2, 0.3, 0.4])

    def test_invalid_ablation_rejected(self, tmp_path):
        path = write_config(tmp_path, "seed = 1\ntrain.ablation = none\n")
        with pytest.raises(ConfigError, match="ablation"):
            resolve_config(path)

    def test_missing_file_rejected(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            resolve_config(tmp_path / "nope.cfg")


class TestSeedPrecedence:
    def test_flag_overrides_config(self, tmp_path):
        path = write_config(tmp_path, "seed = 10\n")
        assert resolve_config(path, seed_override=99).seed == 99

    def test_config_overrides_env(self, tmp_path, monkeypatch):
        monkeypatch.setenv(ENV_SEED_VAR, "7")
        path = write_config(tmp_path, "seed = 10\n")
        assert resolve_config(path).seed == 10

    def test_env_fallback(self, tmp_path, monkeypatch):
        monkeypatch.setenv(ENV_SEED_VAR, "7")
        path = write_config(tmp_path, "train.epochs = 2\n")
        assert resolve_config(path).seed == 7

    def test_no_seed_anywhere_is_error(self, tmp_path, monkeypatch):
        monkeypatch.delenv(ENV_SEED_VAR, raising=False)
        path = write_config(tmp_path, "train.epochs = 2\n")
        with pytest.raises(ConfigError, match="seed"):
            resolve_config(path)

    def test_seed_propagates_to_subconfigs(self, tmp_path):
        path = write_config(tmp_path, "seed = 33\n")
        cfg = resolve_config(path)
        assert cfg.generator.seed == 33
        assert cfg.train.seed == 33


class TestPathResolution:
    def test_paths_relative_to_config_directory(self, tmp_path):
        (tmp_path / "out").mkdir()
        path = write_config(
            tmp_path, "seed = 1\npaths.out_dir = out\npaths.cohort_csv = data.csv\n"
        )
        cfg = resolve_config(path)
        assert cfg.out_dir == tmp_path / "out"
        assert cfg.cohort_csv == tmp_path / "data.csv"

    def test_default_files_live_in_out_dir(self, tmp_path):
        path = write_config(tmp_path, "seed = 1\npaths.out_dir = out\n")
        cfg = resolve_config(path)
        assert cfg.cohort_csv == tmp_path / "out" / "cohort.csv"
        assert cfg.checkpoint == tmp_path / "out" / "checkpoint.json"


class TestEmitResolved:
    def test_round_trip(self, tmp_path):
        path = write_config(
            tmp_path,
            "seed = 5\n"
            "train.epochs = 3\n"
            "generator.shift = 0.01,0.02,0.03,0.04\n"
            "model.variational_qv = true\n",
        )
        cfg = resolve_config(path)
        text = emit_resolved(cfg)
        reparsed = parse_config_text(text)
        assert reparsed["seed"] == "5"
        assert reparsed["train.epochs"] == "3"
        assert reparsed["model.variational_qv"] == "true"
        path2 = write_config(tmp_path, text, name="resolved.cfg")
        cfg2 = resolve_config(path2)
        assert cfg2.seed == cfg.seed
        assert cfg2.train == cfg.train
        assert cfg2.model == cfg.model
        np.testing.assert_array_equal(
            cfg2.generator.correlation, cfg.generator.correlation
        )
        np.testing.assert_array_equal(cfg2.generator.shift, cfg.generator.shift)

    def test_every_known_key_emitted(self, tmp_path):
        path = write_config(tmp_path, "seed = 1\n")
        text = emit_resolved(resolve_config(path))
        from bayesmtr.config import _KEY_PARSERS

        for key in _KEY_PARSERS:
            assert f"{key} = " in text, key
