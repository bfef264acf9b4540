import csv
import json

import pytest

from trajlearn.cli import COMMANDS, generator_model, main
from trajlearn.config import RunConfig
from trajlearn.dataio import load_dataset


def last_json(capsys):
    out = capsys.readouterr().out.strip().splitlines()
    return json.loads(out[-1])


@pytest.fixture
def run_config(tmp_path):
    """Writes a small run configuration pointing at ``tmp_path/data``."""

    def write(**sections):
        content = {
            "generate": {"t_grid": [0.0, 0.4], "dt": 0.04, "dt_fine": 0.004, "shots_per_setting": 2, "seed": 5},
            "data": {"path": str(tmp_path / "data")},
            "train": {"epochs": 1, "ensemble_size": 1, "batch_size": 32, "lr": 0.01},
            "model": {"variant": "constrained"},
        }
        for name, values in sections.items():
            content.setdefault(name, {}).update(values)
        path = tmp_path / "run.json"
        path.write_text(json.dumps(content))
        return str(path)

    return write


def test_every_command_is_registered():
    """The parser offers the full command set."""
    assert set(COMMANDS) == {
        "generate",
        "train-sde",
        "train-rnn",
        "distill",
        "bin-fit",
        "spam-tomo",
        "evaluate",
        "coarse-study",
        "report",
    }


def test_generator_model_tilt():
    """The tilt adds a sigma_x part to the Lindblad operator."""
    cfg = RunConfig.model_validate({"generate": {"gamma_d": 2.0, "tilt": 0.5}})
    m = generator_model(cfg)
    assert m.lindblad[0, 0] == pytest.approx(1.0)
    assert m.lindblad[0, 1] == pytest.approx(0.5)


def test_generate_then_evaluate(run_config, tmp_path, capsys):
    """Generated data reloads and evaluates against its generator."""
    config = run_config()
    assert main(["generate", "--config", config, "--out", str(tmp_path / "data")]) == 0
    summary = last_json(capsys)
    assert summary["status"] == "ok" and summary["command"] == "generate"
    assert summary["n_shots"] == 72
    assert sum(summary["splits"].values()) == 72
    assert len(load_dataset(tmp_path / "data")) == 72

    assert main(["evaluate", "--config", config, "--out", str(tmp_path / "eval")]) == 0
    summary = last_json(capsys)
    assert summary["true_ce"] > 0 and summary["me_baseline_ce"] > 0
    assert summary["true_params"]["eta"] == pytest.approx(RunConfig().generate.eta)
    assert json.loads((tmp_path / "eval" / "evaluation.json").read_text())["n_test"] == summary["n_test"]

    assert main(["spam-tomo", "--config", config, "--out", str(tmp_path / "spam")]) == 0
    summary = last_json(capsys)
    assert len(summary["preps"]) == 6
    assert (tmp_path / "spam" / "spam.json").exists()


def test_train_then_report(run_config, tmp_path, capsys):
    """A training report converts to a per-epoch CSV."""
    config = run_config()
    assert main(["generate", "--config", config, "--out", str(tmp_path / "data")]) == 0
    assert main(["train-sde", "--config", config, "--out", str(tmp_path / "train"), "--seed", "3"]) == 0
    summary = last_json(capsys)
    assert set(summary["params"]) == {"omega_r", "gamma_d", "eta"}
    report = tmp_path / "train" / "train_sde.json"
    assert json.loads(report.read_text())["seed"] == 3

    target = tmp_path / "curve.csv"
    assert main(["report", "--input", str(report), "--out", str(target)]) == 0
    assert last_json(capsys)["csv"] == [str(target)]
    with target.open() as f:
        assert [row["epoch"] for row in csv.DictReader(f)] == ["1"]


def test_invalid_config_exits_with_two(tmp_path, capsys):
    """Configuration problems give exit code 2 and an error summary."""
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"train": {"epoch": 3}}))
    assert main(["train-sde", "--config", str(path)]) == 2
    summary = last_json(capsys)
    assert summary["status"] == "error"
    assert summary["error"] == "ConfigError"


def test_missing_inputs_are_configuration_errors(tmp_path, capsys):
    """Commands that need a dataset or reports say so."""
    assert main(["train-sde", "--out", str(tmp_path)]) == 2
    assert "data.path" in last_json(capsys)["message"]
    assert main(["report", "--out", str(tmp_path)]) == 2
    assert main(["generate", "--threads", "0", "--out", str(tmp_path)]) == 2


def test_runtime_errors_exit_with_one(run_config, tmp_path, capsys):
    """A missing dataset directory is a runtime failure."""
    assert main(["evaluate", "--config", run_config(), "--out", str(tmp_path / "eval")]) == 1
    assert last_json(capsys)["error"] == "DatasetFormatError"


@pytest.mark.slow
def test_outputs_do_not_depend_on_threads(run_config, tmp_path, capsys):
    """Generated data and trained reports are byte-identical for 1, 4 and 16 workers."""
    config = run_config(
        generate={"shots_per_setting": 6},
        train={"ensemble_size": 3, "epochs": 2},
        data={"path": str(tmp_path / "data-1")},
    )
    for threads in ("1", "4", "16"):
        flags = ["--config", config, "--threads", threads]
        assert main(["generate", *flags, "--out", str(tmp_path / f"data-{threads}")]) == 0
        assert main(["train-sde", *flags, "--out", str(tmp_path / f"train-{threads}")]) == 0
    capsys.readouterr()
    for name in ("meta.json", "records.bin", "truth.bin"):
        first = (tmp_path / "data-1" / name).read_bytes()
        assert (tmp_path / "data-4" / name).read_bytes() == first
        assert (tmp_path / "data-16" / name).read_bytes() == first
    report = (tmp_path / "train-1" / "train_sde.json").read_bytes()
    assert (tmp_path / "train-4" / "train_sde.json").read_bytes() == report
    assert (tmp_path / "train-16" / "train_sde.json").read_bytes() == report
