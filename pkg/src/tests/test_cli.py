import json
import math

import pandas as pd
import pytest

from main import main

RUN_TOML = """
[sampler]
seed = 5
n_chains = 2
n_iterations = 30
n_adapt = 10
thin = 5

[simulate.truth]
n_subjects = 30
dropout_rate = 0.1
"""

DATA_FILES = ("subjects.csv", "longitudinal.csv", "latent.csv", "config_echo.json")
POSTERIOR_FILES = ("samples.csv", "summary.json", "diagnostics.json", "config_echo.json")


def run_cli(capsys, *argv) -> tuple[int, object]:
    code = main([str(a) for a in argv])
    out = capsys.readouterr().out
    return code, json.loads(out) if out.strip() else None


@pytest.fixture
def run_toml(temp_directory):
    path = temp_directory / "run.toml"
    path.write_text(RUN_TOML)
    return path


@pytest.fixture
def simulated_dir(run_toml, temp_directory, capsys):
    data = temp_directory / "data"
    code, _ = run_cli(capsys, "simulate", "--config", run_toml, "--out", data)
    assert code == 0
    return data


def test_simulate_writes_dataset(simulated_dir):
    for name in DATA_FILES:
        assert (simulated_dir / name).exists()
    echo = json.loads((simulated_dir / "config_echo.json").read_text())
    assert echo["run_config"]["simulate"]["truth"]["dropout_rate"] == 0.1
    assert len(pd.read_csv(simulated_dir / "subjects.csv")) == 30


def test_simulate_rerun_is_byte_identical(simulated_dir, run_toml, capsys):
    before = {name: (simulated_dir / name).read_bytes() for name in DATA_FILES}
    code, _ = run_cli(capsys, "simulate", "--config", run_toml, "--out", simulated_dir)
    assert code == 0
    assert {name: (simulated_dir / name).read_bytes() for name in DATA_FILES} == before


def test_simulate_several_datasets(run_toml, temp_directory, capsys):
    out = temp_directory / "study"
    code, result = run_cli(
        capsys, "simulate", "--config", run_toml, "--out", out, "--n-datasets", 2, "--n-subjects", 10
    )
    assert code == 0
    assert [d["directory"] for d in result["datasets"]] == [str(out / "dataset_001"), str(out / "dataset_002")]
    assert result["datasets"][0]["seed"] != result["datasets"][1]["seed"]
    assert (out / "config_echo.json").exists()
    assert len(pd.read_csv(out / "dataset_002" / "subjects.csv")) == 10


def test_validate_reports_counts(simulated_dir, capsys):
    code, result = run_cli(capsys, "validate", "--data", simulated_dir)
    assert code == 0
    assert result["subjects"] == 30
    assert result["delta_0"] + result["delta_1"] + result["delta_2"] == 30
    latent = result["latent"]
    assert latent["subjects"] == 30
    assert latent["missed_progressions"] == latent["progressed"] - result["delta_1"]


def test_aj_writes_cumulative_incidence(simulated_dir, temp_directory, capsys):
    out = temp_directory / "cif.csv"
    code, result = run_cli(capsys, "aj", "--data", simulated_dir, "--out", out)
    assert code == 0
    frame = pd.read_csv(out)
    assert list(frame.columns) == ["cause", "time", "cif", "at_risk"]
    assert set(frame["cause"]) == {"prg", "trt"}
    assert 0.0 <= result["final"]["prg"] + result["final"]["trt"] <= 1.0


def test_fit_evaluate_and_rerun(simulated_dir, run_toml, temp_directory, capsys):
    fit_dir = temp_directory / "fit"
    argv = ("fit", "--config", run_toml, "--data", simulated_dir, "--out", fit_dir, "--knots", 4)
    code, result = run_cli(capsys, *argv)
    assert code == 0
    assert result["scenario"] == "fixed_0.75"
    for name in POSTERIOR_FILES:
        assert (fit_dir / name).exists()
    summary = json.loads((fit_dir / "summary.json").read_text())
    assert summary["n_chains"] == 2
    assert summary["n_draws"] == 4
    assert "exp_alpha_prg_2" in summary["hazard_ratios"]

    before = {name: (fit_dir / name).read_bytes() for name in POSTERIOR_FILES}
    assert run_cli(capsys, *argv)[0] == 0
    assert {name: (fit_dir / name).read_bytes() for name in POSTERIOR_FILES} == before

    report_dir = temp_directory / "report"
    code, result = run_cli(
        capsys,
        "evaluate",
        "--truth",
        simulated_dir / "config_echo.json",
        "--posteriors",
        fit_dir,
        "--out",
        report_dir,
    )
    assert code == 0
    assert (report_dir / "report.json").exists()
    assert (report_dir / "coverage.csv").exists()


def test_loglik_from_checkpoint(simulated_dir, run_toml, temp_directory, capsys):
    fit_dir, checkpoints = temp_directory / "fit", temp_directory / "checkpoints"
    code, _ = run_cli(
        capsys,
        "fit",
        "--config",
        run_toml,
        "--data",
        simulated_dir,
        "--out",
        fit_dir,
        "--chains",
        1,
        "--checkpoints",
        checkpoints,
    )
    assert code == 0
    assert (checkpoints / "chain_1.json").exists()

    out = temp_directory / "loglik.json"
    code, result = run_cli(
        capsys,
        "loglik",
        "--config",
        fit_dir / "config_echo.json",
        "--data",
        simulated_dir,
        "--params",
        checkpoints / "chain_1.json",
        "--out",
        out,
    )
    assert code == 0
    assert math.isfinite(result["log_posterior"])
    payload = json.loads(out.read_text())
    assert len(payload["subjects"]) == 30
    assert {s["factor"] for s in payload["subjects"]} <= {"F1", "F2", "F3"}


def test_invalid_rows_exit_with_validation_code(dataset_with_errors, capsys):
    code = main(["validate", "--data", str(dataset_with_errors)])
    err = capsys.readouterr().err
    assert code == 2
    assert "subjects.csv:3" in err
    assert "longitudinal.csv:3" in err


def test_empty_dataset_exits_with_validation_code(temp_directory, capsys):
    (temp_directory / "subjects.csv").write_text("subject_id,age,psad,delta,terminal_time,biopsy_times\n")
    (temp_directory / "longitudinal.csv").write_text("subject_id,time,log2_psa\n")
    assert main(["validate", "--data", str(temp_directory)]) == 2


def test_missing_required_flag_is_a_usage_error(capsys):
    with pytest.raises(SystemExit) as exc_info:
        main(["validate"])
    assert exc_info.value.code == 1


def test_fit_without_data_is_a_usage_error(temp_directory, capsys):
    assert main(["fit", "--seed", "1", "--out", str(temp_directory / "fit")]) == 1


def test_fit_without_seed(dataset_dir, temp_directory, capsys):
    code = main(["fit", "--data", str(dataset_dir), "--out", str(temp_directory / "fit")])
    assert code == 2
    assert "needs a seed" in capsys.readouterr().err


def test_invalid_sensitivity_flag(dataset_dir, temp_directory, capsys):
    argv = ["fit", "--data", str(dataset_dir), "--out", str(temp_directory / "fit"), "--seed", "1"]
    assert main([*argv, "--sensitivity", "normal:0,1"]) == 2


def test_unknown_scenario(dataset_dir, temp_directory, capsys):
    argv = ["compare", "--data", str(dataset_dir), "--out", str(temp_directory), "--scenarios", "fixed_0.9"]
    assert main(argv) == 2


def test_parameters_out_of_support_exit_with_numerical_code(dataset_dir, temp_directory, capsys):
    params = {
        "beta": [2.35, 0.27, 0.62, 1.0, 0.02],
        "u": [[0.0] * 4] * 3,
        "omega": [[1.0, 0, 0, 0], [0, 1.0, 0, 0], [0, 0, 1.0, 0], [0, 0, 0, 1.0]],
        "tau_eps": -1.0,
        "tau_u": 1.0,
        "gamma_h0": {"prg": [-2.0] * 12, "trt": [-4.0] * 12},
        "tau_h0": {"prg": 1.0, "trt": 1.0},
        "gamma": {"prg": 0.4, "trt": 0.25},
        "alpha": {"prg": [0.16, 1.79], "trt": [0.4, 2.22]},
        "rho": 0.75,
        "subject_ids": ["S1", "S2", "S3"],
    }
    path = temp_directory / "params.json"
    path.write_text(json.dumps(params))
    assert main(["loglik", "--data", str(dataset_dir), "--params", str(path)]) == 3
