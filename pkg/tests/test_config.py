import pytest

from rana_compress.config import (
    AllocationSettings,
    ToolkitConfig,
    get_env_int,
    load_config,
    resolve_run_config,
    resolve_threads,
)
from rana_compress.errors import ConfigError


def _write_config_toml(path, content):
    path.write_text(content, encoding="utf-8")


def test_missing_config_file_uses_defaults(tmp_path, capsys):
    config = load_config(str(tmp_path / "absent.toml"))

    assert config == ToolkitConfig()
    assert "not found" in capsys.readouterr().err


def test_config_sections_override_defaults(tmp_path):
    config_path = tmp_path / "config.toml"
    _write_config_toml(
        config_path,
        """
seed = 7

[masker]
kind = "sigmoid"
epochs = 5

[allocation]
grid_step = 0.25
""",
    )

    config = load_config(str(config_path))

    assert config.seed == 7
    assert config.masker.kind == "sigmoid"
    assert config.masker.epochs == 5
    assert config.allocation.grid_step == 0.25
    assert config.allocation.budget_tolerance == 0.01


def test_grid_step_must_divide_one(tmp_path):
    config_path = tmp_path / "config.toml"
    _write_config_toml(
        config_path,
        """
[allocation]
grid_step = 0.3
""",
    )

    with pytest.raises(ConfigError):
        load_config(str(config_path))


def test_bench_warmup_floor():
    with pytest.raises(ValueError):
        ToolkitConfig(bench={"warmup": 3})


def test_run_config_command_line_beats_file(tmp_path):
    config = ToolkitConfig(seed=3, masker={"kind": "sigmoid"})

    run = resolve_run_config(config, budget=0.4, seed=None, masker_kind="b", output_dir=str(tmp_path))

    assert run.seed == 3
    assert run.budget == 0.4
    assert run.masker_kind == "b"
    assert run.grid_step == config.allocation.grid_step


@pytest.mark.parametrize("budget", [0.0, -0.2, 1.5])
def test_run_config_rejects_budget_outside_unit_interval(budget):
    with pytest.raises(ConfigError):
        resolve_run_config(ToolkitConfig(), budget=budget)


def test_run_config_rejects_missing_calibration(tmp_path):
    with pytest.raises(ConfigError):
        resolve_run_config(ToolkitConfig(), calibration_paths=[str(tmp_path / "nope")])


def test_config_hash_tracks_settings(tmp_path):
    first = resolve_run_config(ToolkitConfig(), budget=0.5, output_dir=str(tmp_path))
    again = resolve_run_config(ToolkitConfig(), budget=0.5, output_dir=str(tmp_path))
    other = resolve_run_config(ToolkitConfig(), budget=0.6, output_dir=str(tmp_path))

    assert first.config_hash() == again.config_hash()
    assert first.config_hash() != other.config_hash()
    assert len(first.config_hash()) == 64


def test_config_hash_ignores_output_dir(tmp_path):
    here = resolve_run_config(ToolkitConfig(), budget=0.5, output_dir=str(tmp_path / "a"))
    there = resolve_run_config(ToolkitConfig(), budget=0.5, output_dir=str(tmp_path / "b"))

    assert here.config_hash() == there.config_hash()


def test_get_env_int(monkeypatch):
    monkeypatch.setenv("RANA_TEST_THREADS", "3")
    assert get_env_int("RANA_TEST_THREADS", "threads") == 3

    monkeypatch.setenv("RANA_TEST_THREADS", "")
    assert get_env_int("RANA_TEST_THREADS", "threads") is None

    monkeypatch.setenv("RANA_TEST_THREADS", "many")
    with pytest.raises(ConfigError):
        get_env_int("RANA_TEST_THREADS", "threads")

    monkeypatch.setenv("RANA_TEST_THREADS", "0")
    with pytest.raises(ConfigError):
        get_env_int("RANA_TEST_THREADS", "threads")


def test_resolve_threads_respects_cap(monkeypatch):
    monkeypatch.setenv("RANA_THREADS", "1")
    assert resolve_threads(ToolkitConfig()) == 1


def test_allocation_settings_accept_exact_steps():
    for step in (0.1, 0.125, 0.25, 0.5, 1.0):
        assert AllocationSettings(grid_step=step).grid_step == step
