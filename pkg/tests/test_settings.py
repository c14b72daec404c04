"""
Tests for run configuration loading
"""

import logging
import os
import sys
from pathlib import Path

import pytest
from pydantic import ValidationError

project_root = Path(__file__).parent.parent
sys.path.insert(0, str(project_root))

from lib.simplex_norm import Normalizer
from workbench.config.settings import DataConfig, WorkbenchSettings, create_settings


@pytest.fixture(autouse=True)
def clean_environment(monkeypatch, tmp_path):
    """Run from an empty directory with no ZODARTS_ variables set."""
    for key in list(os.environ):
        if key.upper().startswith("ZODARTS_"):
            monkeypatch.delenv(key)
    monkeypatch.chdir(tmp_path)


def write_config(tmp_path: Path, text: str) -> str:
    path = tmp_path / "run.toml"
    path.write_text(text, encoding="utf-8")
    return str(path)


class TestDefaults:
    def test_defaults(self):
        settings = create_settings()
        assert settings.search.epochs == 50
        assert settings.search.theta == 20
        assert settings.search.normalizer is Normalizer.SPARSEMAX
        assert settings.supernet.kernel_sizes == (3, 5, 7)
        assert settings.threads == 1
        assert settings.preset is None

    def test_direct_override(self):
        assert create_settings(threads=4).threads == 4

    def test_missing_file_warns(self, caplog):
        with caplog.at_level(logging.WARNING):
            settings = create_settings(config_file="missing.toml")
        assert settings.search.epochs == 50
        assert "missing.toml" in caplog.text

    def test_echo_is_json_ready(self):
        echo = create_settings().echo()
        assert echo["search"]["normalizer"] == "sparsemax"
        assert echo["supernet"]["depths"] == [1, 2, 3]


class TestConfigFile:
    def test_sections(self, tmp_path):
        path = write_config(
            tmp_path,
            """
threads = 2

[supernet]
num_stages = 2
cells_per_stage = 2
depths = [1, 2]

[search]
epochs = 10
theta = 4
c_upper = 20000

[data]
train = "data/train.zdx"
""",
        )
        settings = create_settings(config_file=path)
        assert settings.threads == 2
        assert settings.supernet.num_stages == 2
        assert settings.search.bounds == (0.0, 20000.0)
        assert settings.search.c_upper == 20000
        assert settings.data.train == Path("data/train.zdx")

    def test_default_file_name(self, tmp_path):
        (tmp_path / "zodarts.toml").write_text("[search]\nepochs = 30\n", encoding="utf-8")
        assert create_settings().search.epochs == 30

    def test_unknown_key_rejected(self, tmp_path):
        path = write_config(tmp_path, "[search]\nbogus = 1\n")
        with pytest.raises(ValidationError):
            create_settings(config_file=path)

    def test_unknown_section_rejected(self, tmp_path):
        path = write_config(tmp_path, "[tracing]\nenabled = true\n")
        with pytest.raises(ValidationError):
            create_settings(config_file=path)

    def test_out_of_range_rejected(self, tmp_path):
        path = write_config(tmp_path, "[search]\nepochs = 5\ntheta = 6\n")
        with pytest.raises(ValidationError):
            create_settings(config_file=path)


class TestPrecedence:
    def test_environment_beats_file(self, tmp_path, monkeypatch):
        path = write_config(tmp_path, "[search]\nepochs = 10\ntheta = 4\n")
        monkeypatch.setenv("ZODARTS_SEARCH__EPOCHS", "7")
        settings = create_settings(config_file=path)
        assert settings.search.epochs == 7
        assert settings.search.theta == 4

    def test_threads_from_environment(self, monkeypatch):
        monkeypatch.setenv("ZODARTS_THREADS", "3")
        assert create_settings().threads == 3

    def test_dotenv(self, tmp_path):
        (tmp_path / ".env").write_text("ZODARTS_THREADS=5\n", encoding="utf-8")
        assert create_settings().threads == 5


class TestPresets:
    def test_ci_preset(self, tmp_path):
        settings = create_settings(config_file=write_config(tmp_path, 'preset = "ci"\n'))
        assert (settings.search.epochs, settings.search.theta, settings.search.inner_steps) == (10, 4, 2)
        assert (settings.search.anneal_factor, settings.search.anneal_interval) == (0.4, 1)
        assert settings.search.lr_alpha == 0.05

    def test_file_values_beat_preset(self, tmp_path):
        path = write_config(tmp_path, 'preset = "ci"\n\n[search]\ninner_steps = 3\n')
        settings = create_settings(config_file=path)
        assert settings.search.inner_steps == 3
        assert settings.search.theta == 4

    def test_full_preset(self):
        settings = WorkbenchSettings.model_validate({"preset": "full"})
        assert (settings.search.epochs, settings.search.theta, settings.search.inner_steps) == (50, 20, 10)

    def test_shipped_ci_config(self):
        settings = create_settings(config_file=str(project_root / "configs" / "ci.toml"))
        assert (settings.search.epochs, settings.search.theta, settings.search.inner_steps) == (10, 4, 2)
        assert settings.retrain.rules.checkpoint_epoch == 4
        assert settings.threads == 2

    def test_unknown_preset_rejected(self, tmp_path):
        with pytest.raises(ValidationError):
            create_settings(config_file=write_config(tmp_path, 'preset = "huge"\n'))


class TestDataConfig:
    def test_split_bounds(self):
        with pytest.raises(ValidationError):
            DataConfig(split=1.0)
        assert DataConfig(split=0.8).split == 0.8
