import json
import os
from pathlib import Path

import pytest

from mnprobit.config.manager import ConfigManager
from mnprobit.config.models import RunConfig
from mnprobit.utils.errors import MnprobitConfigError


@pytest.fixture(autouse=True)
def clean_environment(monkeypatch):
    for key in list(os.environ):
        if key.startswith("MNPROBIT_"):
            monkeypatch.delenv(key)


def test_defaults():
    config = ConfigManager().load_config()
    assert config.method == "both"
    assert config.nu2 == 25.0
    assert config.sigma_source == "identity"
    assert config.eps == 1e-8
    assert config.max_sweeps == 1000
    assert config.moment_method is None
    assert config.quantiles == [0.025, 0.5, 0.975]
    assert config.runs_exact() and config.runs_vb()


def test_unknown_key_is_rejected(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text("nu2: 4\nprior_scale: 2\n")
    with pytest.raises(MnprobitConfigError, match="prior_scale"):
        ConfigManager(path).load_config()


def test_environment_then_file_then_cli(tmp_path, monkeypatch):
    monkeypatch.setenv("MNPROBIT_NU2", "4")
    monkeypatch.setenv("MNPROBIT_SEED", "7")
    assert ConfigManager().load_config().nu2 == 4.0

    path = tmp_path / "run.yaml"
    path.write_text("nu2: 9.0\nmethod: vb\n")
    manager = ConfigManager(path)
    config = manager.load_config()
    assert config.nu2 == 9.0
    assert config.seed == 7
    assert config.method == "vb"

    config = manager.load_config(cli_overrides={"nu2": 1.5, "method": None})
    assert config.nu2 == 1.5
    assert config.method == "vb"
    assert manager.get_config_summary()["sources"] == f"defaults, environment, file:{path}, cli"


def test_json_config_file(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"trunc_method": "gibbs", "n_shards": 4, "quantiles": [0.1, 0.9]}))
    config = ConfigManager().load_config(path)
    assert config.trunc_method == "gibbs"
    assert config.n_shards == 4
    assert config.quantiles == [0.1, 0.9]


@pytest.mark.parametrize(
    "overrides",
    [
        {"method": "laplace"},
        {"nu2": 0.0},
        {"eps": -1.0},
        {"cdf_tol": 1e-12},
        {"quantiles": [0.5, 1.0]},
        {"n_samples": 2, "n_shards": 3},
        {"moment_method": "quadrature"},
        {"n_classes": 1},
    ],
)
def test_invalid_values(overrides):
    with pytest.raises(MnprobitConfigError):
        ConfigManager().load_config(cli_overrides=overrides)


def test_missing_and_malformed_files(tmp_path):
    with pytest.raises(MnprobitConfigError):
        ConfigManager().load_config(tmp_path / "absent.yaml")
    bad = tmp_path / "bad.yaml"
    bad.write_text("- just\n- a list\n")
    with pytest.raises(MnprobitConfigError):
        ConfigManager().load_config(bad)


def test_empty_file_keeps_defaults(tmp_path):
    path = tmp_path / "empty.yaml"
    path.write_text("")
    assert ConfigManager().load_config(path).nu2 == 25.0


def test_saved_config_reloads_identically(tmp_path):
    manager = ConfigManager()
    config = manager.load_config(
        cli_overrides={"seed": 3, "nu2": 2.0, "data_path": Path("data.csv"), "moment_method": "mc"}
    )
    saved = tmp_path / "out" / "config.yaml"
    manager.save_config(saved)
    reloaded = ConfigManager(saved).load_config()
    assert reloaded == config


def test_nothing_loaded_yet():
    assert ConfigManager().get_config_summary() == {"status": "No configuration loaded"}
    with pytest.raises(MnprobitConfigError):
        ConfigManager().save_config(Path("never.yaml"))


def test_log_level_is_normalized():
    assert RunConfig(log_level="debug").log_level == "DEBUG"
