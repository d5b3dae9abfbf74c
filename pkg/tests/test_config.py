import logging

import pytest
from pydantic import ValidationError

from land_use_planner.config import (
    RunConfig,
    dump_config,
    load_config,
    parse_assignments,
    save_config,
    setup_logging,
)


def test_defaults():
    config = RunConfig()
    assert (config.grid_size, config.num_zones, config.num_categories) == (10, 4, 20)
    assert config.embed_dim == 16
    assert config.kl_weight == 1.0
    assert config.sweep_sizes == (5, 10, 25, 50, 100)
    assert config.bin_edges == ()
    assert not any([config.no_condaug, config.no_attention, config.no_instruction, config.no_context])


def test_unknown_key_rejected():
    with pytest.raises(ValidationError):
        RunConfig.model_validate({"grid_sise": "5"})


@pytest.mark.parametrize("values", [
    {"grid_size": "1"},
    {"num_categories": "12"},
    {"grid_size": "2", "num_zones": "5"},
    {"num_zones": "0"},
    {"heads": "0"},
    {"lr_gan": "0"},
    {"test_fraction": "1.0"},
    {"bin_edges": "0.2,0.1,0.5,0.7"},
    {"bin_edges": "0.2,0.4"},
    {"sweep_sizes": "5,1"},
    {"epochs_gan": "-1"},
])
def test_invalid_values_rejected(values):
    with pytest.raises(ValidationError):
        RunConfig.model_validate(values)


def test_lists_parse_from_commas():
    config = RunConfig.model_validate({"bin_edges": "0.1, 0.3,0.5,0.9", "sweep_sizes": "5,10"})
    assert config.bin_edges == (0.1, 0.3, 0.5, 0.9)
    assert config.sweep_sizes == (5, 10)


def test_config_is_frozen():
    with pytest.raises(ValidationError):
        RunConfig().grid_size = 3


def test_parse_assignments_skips_comments():
    values = parse_assignments(["# 注释", "", "grid_size = 6", "run_dir=a=b"])
    assert values == {"grid_size": "6", "run_dir": "a=b"}
    with pytest.raises(ValueError):
        parse_assignments(["grid_size 6"])


def test_file_then_overrides(tmp_path):
    path = tmp_path / "run.txt"
    path.write_text("grid_size=6\nnum_zones=3\n", encoding="utf-8")
    config = load_config(path, ["num_zones=2"])
    assert config.grid_size == 6
    assert config.num_zones == 2


def test_config_path_from_environment(tmp_path, monkeypatch):
    path = tmp_path / "env.txt"
    path.write_text("seed=42\n", encoding="utf-8")
    monkeypatch.setenv("LUP_CONFIG", str(path))
    assert load_config().seed == 42


def test_fields_are_not_read_from_environment(monkeypatch):
    monkeypatch.delenv("LUP_CONFIG", raising=False)
    for name in ("seed", "SEED", "LUP_SEED"):
        monkeypatch.setenv(name, "42")
    assert load_config().seed == RunConfig().seed


def test_dump_round_trips(tmp_path):
    config = RunConfig(grid_size=7, bin_edges=(0.1, 0.2, 0.3, 0.4), no_attention=True, kl_weight=0.25)
    text = dump_config(config)
    assert "no_attention=true\n" in text
    assert "bin_edges=0.1,0.2,0.3,0.4\n" in text
    keys = [line.split("=", 1)[0] for line in text.splitlines()]
    assert keys == sorted(keys)
    assert load_config(None, text.splitlines()) == config

    save_config(tmp_path / "out" / "config.txt", config)
    assert load_config(tmp_path / "out" / "config.txt") == config
    assert dump_config(load_config(tmp_path / "out" / "config.txt")) == text


def test_derived_paths():
    config = RunConfig(data_dir="d", run_dir="r")
    assert config.dataset_path.as_posix() == "d/dataset.jsonl"
    assert config.zones_dir.as_posix() == "d/zones"
    assert config.checkpoint_dir.as_posix() == "r/checkpoints"
    assert config.report_dir.as_posix() == "r/reports"
    assert config.plan_dir.as_posix() == "r/plans"


def test_logging_writes_file(tmp_path):
    log_file = tmp_path / "logs" / "run.log"
    listener = setup_logging("DEBUG", log_file)
    logging.getLogger("land_use_planner.test").info("写入日志文件")
    listener.stop()
    assert "写入日志文件" in log_file.read_text(encoding="utf-8")
    assert logging.getLogger("numba").level == logging.WARNING
