import json

import pandas as pd
import pytest
from typer.testing import CliRunner

from mnprobit import __version__
from mnprobit.cli import ExitStatus, app

runner = CliRunner()

FAST_FIT = ["--seed", "1", "--L", "3", "--n-samples", "400", "--vb-draws", "400"]


def fit(dataset_file, output_dir, *extra):
    return runner.invoke(
        app, ["fit", "--data", str(dataset_file), "--output-dir", str(output_dir), *FAST_FIT, *extra]
    )


def test_app():
    result = runner.invoke(app, ["--help"])
    assert result.exit_code == 0
    assert "Usage: mnprobit [OPTIONS] COMMAND [ARGS]" in result.output


def test_version():
    result = runner.invoke(app, ["--version"])
    assert result.exit_code == 0
    assert f"mnprobit v{__version__}" in result.output


def test_simulate_is_reproducible(tmp_path):
    args = ["simulate", "--n", "25", "--L", "3", "--p", "2", "--seed", "4"]
    first = runner.invoke(app, [*args, "--out", str(tmp_path / "a.csv")])
    second = runner.invoke(app, [*args, "--out", str(tmp_path / "b.csv")])
    assert first.exit_code == 0 and second.exit_code == 0
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    truth = json.loads((tmp_path / "a_truth.json").read_text())
    assert truth["sigma"] == [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
    assert (tmp_path / "a.csv").read_text().splitlines()[0] == "y,x1,x2"


@pytest.mark.parametrize(
    "extra",
    [["--L", "1"], ["--L", "3", "--beta", "1,2"], ["--L", "3", "--beta", "a,b,c,d"]],
)
def test_simulate_rejects_bad_arguments(tmp_path, extra):
    result = runner.invoke(
        app, ["simulate", "--n", "5", "--p", "2", "--seed", "1", "--out", str(tmp_path / "d.csv"), *extra]
    )
    assert result.exit_code == ExitStatus.VALIDATION
    assert not (tmp_path / "d.csv").exists()


def test_fit_both_methods_writes_results(dataset_file, tmp_path):
    out = tmp_path / "fit"
    result = fit(dataset_file, out)
    assert result.exit_code == 0, result.output
    for name in (
        "result.json",
        "timing.json",
        "summary_exact.csv",
        "summary_vb.csv",
        "comparison.csv",
        "draws_exact.csv",
        "draws_vb.csv",
        "vb_state.json",
        "config.yaml",
    ):
        assert (out / name).exists(), name

    record = json.loads((out / "result.json").read_text())
    assert record["methods"] == ["exact", "vb"]
    assert record["model"]["q"] == 4
    assert record["diagnostics"]["vb"]["converged"]
    assert record["log_evidence"] < 0.0
    draws = pd.read_csv(out / "draws_exact.csv")
    assert list(draws.columns) == ["b_1", "b_2", "b_3", "b_4"]
    assert len(draws) == 400


@pytest.mark.parametrize(
    "method, names",
    [
        ("exact", ["result.json", "draws_exact.csv", "summary_exact.csv"]),
        ("vb", ["result.json", "draws_vb.csv", "summary_vb.csv", "vb_state.json"]),
        (
            "both",
            ["result.json", "draws_exact.csv", "draws_vb.csv", "summary_exact.csv", "summary_vb.csv", "comparison.csv"],
        ),
    ],
)
def test_fit_is_byte_reproducible(dataset_file, tmp_path, method, names):
    out = tmp_path / "fit"
    assert fit(dataset_file, out, "--method", method).exit_code == 0
    first = {name: (out / name).read_bytes() for name in names}
    assert fit(dataset_file, out, "--method", method).exit_code == 0
    for name, content in first.items():
        assert (out / name).read_bytes() == content, name


def test_fit_without_seed_is_a_config_error(dataset_file, tmp_path):
    result = runner.invoke(app, ["fit", "--data", str(dataset_file), "--output-dir", str(tmp_path / "o")])
    assert result.exit_code == ExitStatus.VALIDATION


def test_fit_missing_data_is_an_io_error(tmp_path):
    result = runner.invoke(
        app, ["fit", "--data", str(tmp_path / "absent.csv"), "--seed", "1", "--output-dir", str(tmp_path / "o")]
    )
    assert result.exit_code == ExitStatus.IO


def test_fit_unconverged_writes_results_and_exits_4(dataset_file, tmp_path):
    out = tmp_path / "fit"
    result = fit(dataset_file, out, "--method", "vb", "--max-sweeps", "1")
    assert result.exit_code == ExitStatus.NOT_CONVERGED
    record = json.loads((out / "result.json").read_text())
    assert record["diagnostics"]["vb"]["converged"] is False
    assert record["diagnostics"]["vb"]["sweeps"] == 1


def test_fit_resumes_from_stored_state(dataset_file, tmp_path):
    first = tmp_path / "first"
    assert fit(dataset_file, first, "--method", "vb").exit_code == 0
    second = tmp_path / "second"
    result = fit(dataset_file, second, "--method", "vb", "--resume", str(first / "vb_state.json"))
    assert result.exit_code == 0, result.output
    record = json.loads((second / "result.json").read_text())
    assert record["diagnostics"]["vb"]["sweeps"] <= 2


def test_summarize_matches_fit_summary(dataset_file, tmp_path):
    out = tmp_path / "fit"
    assert fit(dataset_file, out, "--method", "vb").exit_code == 0
    summary_path = tmp_path / "summary.csv"
    result = runner.invoke(app, ["summarize", str(out / "draws_vb.csv"), "--out", str(summary_path)])
    assert result.exit_code == 0, result.output
    assert summary_path.read_bytes() == (out / "summary_vb.csv").read_bytes()


def test_summarize_rejects_empty_draws(tmp_path):
    empty = tmp_path / "draws.csv"
    empty.write_text("b_1,b_2\n")
    result = runner.invoke(app, ["summarize", str(empty)])
    assert result.exit_code == ExitStatus.VALIDATION


def test_predict_rows_are_distributions(dataset_file, tmp_path):
    out = tmp_path / "fit"
    assert fit(dataset_file, out, "--method", "vb").exit_code == 0
    x_file = tmp_path / "x.csv"
    x_file.write_text("x1,x2\n0,0\n1.5,-0.5\n-2,1\n")
    result = runner.invoke(app, ["predict", "--result-dir", str(out), "--x", str(x_file), "--n-draws", "50"])
    assert result.exit_code == 0, result.output
    table = pd.read_csv(out / "predictions.csv")
    assert list(table.columns) == ["row", "p_1", "p_2", "p_3", "source"]
    assert (table["source"] == "vb").all()
    sums = table[["p_1", "p_2", "p_3"]].sum(axis=1)
    assert ((sums - 1.0).abs() < 1e-6).all()


def test_predict_rejects_wrong_covariate_count(dataset_file, tmp_path):
    out = tmp_path / "fit"
    assert fit(dataset_file, out, "--method", "vb").exit_code == 0
    x_file = tmp_path / "x.csv"
    x_file.write_text("x1\n0\n")
    result = runner.invoke(app, ["predict", "--result-dir", str(out), "--x", str(x_file)])
    assert result.exit_code == ExitStatus.VALIDATION


def test_predict_without_fit_is_an_io_error(tmp_path):
    x_file = tmp_path / "x.csv"
    x_file.write_text("x1\n0\n")
    result = runner.invoke(app, ["predict", "--result-dir", str(tmp_path), "--x", str(x_file)])
    assert result.exit_code == ExitStatus.IO


def test_log_file_records_phases(dataset_file, tmp_path):
    log_file = tmp_path / "run.log"
    result = runner.invoke(
        app,
        [
            "--verbose",
            "--log-file",
            str(log_file),
            "fit",
            "--data",
            str(dataset_file),
            "--output-dir",
            str(tmp_path / "fit"),
            "--method",
            "vb",
            *FAST_FIT,
        ],
    )
    assert result.exit_code == 0, result.output
    text = log_file.read_text()
    assert "Run configuration: {'sources': 'defaults, cli'" in text
    assert "Starting vb" in text
    assert "CAVI converged" in text
