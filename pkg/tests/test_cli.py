import asyncio
import json
from pathlib import Path

import numpy as np
import pytest

from land_use_planner.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, EXIT_VALIDATION, main
from land_use_planner.evalmetrics import METRICS
from land_use_planner.export import PlanRecord, load_plan, save_plan
from land_use_planner.storage import read_dataset

SMALL = [
    "grid_size=4", "num_zones=2", "num_samples=30", "seed=5", "workers=2", "lda_iterations=10",
    "embed_dim=4", "encoder_hidden=4", "noise_dim=2", "gan_hidden=8",
    "epochs_encoder=2", "epochs_gan=2", "epochs_grid=2",
]


def _args(root: Path, *extra: str) -> list[str]:
    args = []
    for item in [*SMALL, f"data_dir={root / 'data'}", f"run_dir={root / 'run'}", *extra]:
        args += ["--set", item]
    return args


@pytest.fixture(scope="module")
def trained(tmp_path_factory) -> Path:
    root = tmp_path_factory.mktemp("cli")
    for command in ("synth", "zones", "train"):
        assert main([*_args(root), command]) == EXIT_OK
    return root


def test_training_writes_artifacts(trained):
    run = trained / "run"
    assert sorted(p.name for p in (run / "checkpoints").iterdir()) == ["encoder.ckpt", "grid.ckpt", "zonegan.ckpt"]
    for name in ("encoder_loss.csv", "zonegan_loss.csv", "grid_loss.csv", "zonegan_diagnostics.json"):
        assert (run / "logs" / name).exists()
    assert (trained / "data" / "zones" / "zone_00000.csv").exists()
    assert (run / "config.txt").read_text(encoding="utf-8").count("grid_size=4") == 1


def test_generate_and_export(trained):
    output = trained / "out" / "plan.json"
    code = main([*_args(trained), "generate", "--instruction", "3", "--context-id", "0", "--seed", "9",
                 "--output", str(output)])
    assert code == EXIT_OK
    record = load_plan(output)
    assert record.raw.shape == (4, 4, 20)
    assert record.zone_plan.shape == (4, 4)
    assert record.instruction == 3

    assert main([*_args(trained), "export", "--plan", str(output), "--format", "pgm",
                 "--output", str(trained / "pgm")]) == EXIT_OK
    assert len(list((trained / "pgm").glob("*.pgm"))) == 20


def test_generate_is_deterministic(trained):
    paths = [trained / "det" / f"{i}.json" for i in range(2)]
    for path in paths:
        main([*_args(trained), "generate", "--instruction", "1", "--context-id", "2", "--seed", "4",
              "--output", str(path)])
    assert paths[0].read_bytes() == paths[1].read_bytes()


def test_eval_writes_reports(trained):
    assert main([*_args(trained), "eval"]) == EXIT_OK
    reports = trained / "run" / "reports"
    loaded = json.loads((reports / "group_report.json").read_text(encoding="utf-8"))
    assert set(loaded["averages"]) == set(METRICS)
    for kind in METRICS:
        assert (reports / f"cross_{kind}.csv").exists()


def test_eval_of_originals_is_zero(trained, tmp_path):
    dataset = asyncio.run(read_dataset(trained / "data" / "dataset.jsonl"))
    for sample in dataset.test_samples():
        save_plan(tmp_path / f"{sample.index:05d}.json",
                  PlanRecord(zone_plan=sample.archetypes, raw=sample.configuration.astype(float),
                             instruction=sample.instruction, seed=0, context_id=sample.index))
    run = tmp_path / "run"
    code = main([*_args(trained), "--set", f"run_dir={run}", "eval", "--generated", str(tmp_path)])
    assert code == EXIT_OK
    averages = json.loads((run / "reports" / "group_report.json").read_text(encoding="utf-8"))["averages"]
    for metric in METRICS:
        assert averages[metric] == pytest.approx(0.0, abs=1e-6)


def test_synth_is_reproducible(tmp_path):
    path = tmp_path / "data" / "dataset.jsonl"
    assert main([*_args(tmp_path), "synth"]) == EXIT_OK
    first = path.read_bytes()
    assert main([*_args(tmp_path), "--force", "synth"]) == EXIT_OK
    assert path.read_bytes() == first


def test_without_instruction_levels_match(trained, tmp_path):
    args = _args(trained, f"run_dir={tmp_path}", "no_instruction=true")
    assert main([*args, "train"]) == EXIT_OK
    outputs = []
    for level in (0, 4):
        path = tmp_path / f"g{level}.json"
        assert main([*args, "generate", "--instruction", str(level), "--context-id", "1",
                     "--output", str(path)]) == EXIT_OK
        outputs.append(load_plan(path).raw)
    np.testing.assert_array_equal(outputs[0], outputs[1])


def test_invalid_grid_size_is_validation_error(tmp_path):
    assert main([*_args(tmp_path, "grid_size=1"), "synth"]) == EXIT_VALIDATION


def test_invalid_instruction_is_validation_error(trained):
    assert main([*_args(trained), "generate", "--instruction", "7", "--context-id", "0"]) == EXIT_VALIDATION


def test_existing_output_without_force(trained):
    assert main([*_args(trained), "synth"]) == EXIT_USAGE


def test_unknown_command(tmp_path):
    assert main([*_args(tmp_path), "plan-everything"]) == EXIT_USAGE


def test_unknown_setting(tmp_path):
    assert main([*_args(tmp_path, "grid_sise=4"), "synth"]) == EXIT_VALIDATION


def test_generate_without_checkpoints(trained, tmp_path):
    code = main([*_args(trained, f"run_dir={tmp_path}"), "generate", "--instruction", "0", "--context-id", "0"])
    assert code == EXIT_RUNTIME


def test_eval_rejects_out_of_range_context(trained, tmp_path):
    plans = tmp_path / "plans"
    save_plan(plans / "bad.json", PlanRecord(zone_plan=np.zeros((4, 4), dtype=np.int64), raw=np.zeros((4, 4, 20)),
                                             instruction=0, seed=0, context_id=10_000))
    code = main([*_args(trained, f"run_dir={tmp_path / 'run'}"), "eval", "--generated", str(plans)])
    assert code == EXIT_VALIDATION


def test_eval_rejects_plan_with_missing_key(trained, tmp_path):
    plans = tmp_path / "plans"
    plans.mkdir()
    (plans / "broken.json").write_text(json.dumps({"schema": "land-use-planner/plan", "version": 1,
                                                   "instruction": 0, "seed": 0, "context_id": 0}),
                                       encoding="utf-8")
    code = main([*_args(trained, f"run_dir={tmp_path / 'run'}"), "eval", "--generated", str(plans)])
    assert code == EXIT_VALIDATION


def test_unexpected_error_is_runtime(trained, monkeypatch):
    def explode(*args, **kwargs):
        raise LookupError("boom")

    monkeypatch.setattr("land_use_planner.cli.export_plan", explode)
    code = main([*_args(trained), "export", "--plan", "missing.json", "--format", "csv", "--output", "x"])
    assert code == EXIT_RUNTIME
