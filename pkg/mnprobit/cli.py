"""Command-line interface for mnprobit.

Commands:
    simulate   Draw a synthetic dataset (and its ground truth) from the model
    fit        Exact SUN posterior sampling and/or PFM-B variational inference
    summarize  Re-summarize a stored draw matrix
    predict    Posterior-averaged class probabilities for new covariates

Example:
    $ mnprobit simulate --n 100 --L 3 --p 2 --seed 7 --out data.csv
    $ mnprobit fit --data data.csv --method both --seed 1 --output-dir fit
    $ mnprobit predict --result-dir fit --x new_x.csv
"""

import sys
from enum import IntEnum
from pathlib import Path
from typing import Any, Dict, List, NoReturn, Optional

import numpy as np
import typer
from rich.markup import escape
from rich.panel import Panel
from rich.table import Table

from . import __description__, __version__
from .config.manager import ConfigManager
from .core.draws import PosteriorSummary, summarize as summarize_draws
from .core.model import predictive_probabilities, simulate_dataset
from .core.orchestrator import FitOrchestrator
from .data.io import (
    ResultRecord,
    read_covariates,
    read_draws,
    read_result,
    read_sigma,
    read_vb_state,
    write_dataset,
    write_predictions,
    write_results,
    write_summary,
    write_truth,
)
from .utils.errors import (
    MnprobitConfigError,
    MnprobitConvergenceError,
    MnprobitError,
    MnprobitIOError,
    MnprobitNumericError,
    MnprobitValidationError,
    handle_exception,
)
from .utils.logging import console, get_logger, setup_logging

app = typer.Typer(
    name="mnprobit",
    help=__description__,
    add_completion=False,
    rich_markup_mode="rich",
    context_settings={"help_option_names": ["-h", "--help"]},
)
logger = get_logger(__name__)


class ExitStatus(IntEnum):
    SUCCESS = 0
    UNEXPECTED = 1
    VALIDATION = 2
    NUMERIC = 3
    NOT_CONVERGED = 4
    IO = 5


def exit_status_for(error: Exception) -> ExitStatus:
    if isinstance(error, (MnprobitValidationError, MnprobitConfigError)):
        return ExitStatus.VALIDATION
    if isinstance(error, MnprobitNumericError):
        return ExitStatus.NUMERIC
    if isinstance(error, MnprobitConvergenceError):
        return ExitStatus.NOT_CONVERGED
    if isinstance(error, MnprobitIOError):
        return ExitStatus.IO
    return ExitStatus.UNEXPECTED


def _fail(error: Exception) -> NoReturn:
    """Render an error panel and exit with the matching status."""
    if isinstance(error, (ValueError, OSError)):
        error = handle_exception(error, context={"module": "cli"})
    status = exit_status_for(error)
    if isinstance(error, MnprobitError):
        module = error.context.get("module", "mnprobit")
        title = f"[bold red]{type(error).__name__}[/bold red] [dim]({escape(str(module))})[/dim]"
        body = f"[red]{escape(str(error))}[/red]"
    else:
        title = "[bold red]Unexpected Error[/bold red]"
        body = f"[red]{escape(str(error))}[/red]\n\n[dim]Rerun with --verbose for the traceback.[/dim]"
    console.print(Panel(body, title=title, border_style="red", padding=(1, 2)))
    logger.debug("Failure details", exc_info=error)
    sys.exit(int(status))


def version_callback(value: bool) -> None:
    if value:
        console.print(f"mnprobit v{__version__}")
        raise typer.Exit()


@app.callback()
def main_callback(
    ctx: typer.Context,
    verbose: bool = typer.Option(False, "--verbose", "-v", help="Enable debug logging"),
    log_file: Optional[Path] = typer.Option(None, "--log-file", help="Also log to this file", metavar="FILE"),
    version: Optional[bool] = typer.Option(
        None, "--version", callback=version_callback, is_eager=True, help="Show version and exit"
    ),
) -> None:
    """Exact and variational Bayesian inference for multinomial probit models."""
    ctx.obj = {"verbose": verbose, "log_file": log_file}
    setup_logging(level="DEBUG" if verbose else "WARNING", log_file=log_file, verbose=verbose)


def _parse_floats(text: str, what: str) -> List[float]:
    text = text.strip()
    if not text:
        return []
    try:
        return [float(item) for item in text.split(",") if item.strip()]
    except ValueError as e:
        raise MnprobitValidationError(f"Cannot parse {what} '{text}' as comma-separated numbers") from e


def _summary_table(summary: PosteriorSummary, title: str) -> Table:
    frame = summary.to_frame()
    table = Table(title=title, title_style="bold cyan")
    for column in frame.columns:
        table.add_column(str(column), justify="left" if column == "coef" else "right")
    for row in frame.itertuples(index=False):
        table.add_row(*[str(row[0])] + [f"{value:.5g}" for value in row[1:]])
    return table


def _display_fit(record: ResultRecord, output_dir: Path) -> None:
    for name in record.methods:
        console.print(_summary_table(record.summaries[name], f"Posterior summary ({name})"))
    lines = []
    if record.log_evidence is not None:
        lines.append(f"log evidence: [bold]{record.log_evidence:.8g}[/bold]")
    if "exact" in record.diagnostics:
        diag = record.diagnostics["exact"]
        exactness = "i.i.d." if diag.get("exact") else "[yellow]Gibbs, not i.i.d.[/yellow]"
        lines.append(f"exact sampler: {diag.get('sampler')} ({exactness})")
    if "vb" in record.diagnostics:
        diag = record.diagnostics["vb"]
        state = "[green]converged[/green]" if diag["converged"] else "[red]not converged[/red]"
        lines.append(f"CAVI: {state} after {diag['sweeps']} sweeps")
    if record.comparison is not None:
        worst = float(np.max(np.abs(record.comparison["z_mean_diff"])))
        lines.append(f"max |mean_vb - mean_exact| / MC SE: {worst:.3g}")
    lines.append(f"results: {escape(str(output_dir))}")
    console.print(Panel("\n".join(lines), title="[bold green]Fit complete[/bold green]", border_style="green"))


@app.command("simulate")
def cmd_simulate(
    n: int = typer.Option(..., "--n", help="Number of observations"),
    n_classes: int = typer.Option(..., "--L", help="Number of classes"),
    p: int = typer.Option(..., "--p", help="Number of covariates"),
    seed: int = typer.Option(..., "--seed", help="Random seed"),
    out: Path = typer.Option(Path("data.csv"), "--out", "-o", help="Dataset CSV to write"),
    truth: Optional[Path] = typer.Option(None, "--truth", help="Truth JSON (default: <out>_truth.json)"),
    beta: str = typer.Option(
        "from-prior", "--beta", help="Comma-separated p(L-1) coefficients or 'from-prior'"
    ),
    nu2: Optional[float] = typer.Option(None, "--nu2", help="Prior variance for 'from-prior'"),
    sigma: Optional[str] = typer.Option(None, "--sigma", help="'identity' or an L x L CSV"),
    intercept: bool = typer.Option(False, "--intercept", help="First covariate column is 1"),
    config: Optional[Path] = typer.Option(None, "--config", "-c", help="Config file for nu2/sigma"),
) -> None:
    """Simulate a dataset from the multinomial probit model."""
    try:
        if n_classes < 2:
            raise MnprobitValidationError(f"Need at least 2 classes, got --L {n_classes}")
        settings = ConfigManager().load_config(config, {"nu2": nu2, "sigma_source": sigma})
        sigma_matrix = read_sigma(settings.sigma_source, n_classes)
        beta_spec: Any = beta if beta == "from-prior" else _parse_floats(beta, "--beta")
        data, truth_record = simulate_dataset(
            beta_spec,
            n=n,
            p=p,
            sigma=sigma_matrix,
            nu2=settings.nu2,
            seed=seed,
            covariates="intercept" if intercept else "normal",
        )
        truth_record.extra["sigma"] = sigma_matrix.tolist()
        truth_path = truth or out.with_name(f"{out.stem}_truth.json")
        write_dataset(data, out)
        write_truth(truth_record, truth_path)
    except Exception as e:  # noqa: BLE001
        _fail(e)
    counts = np.bincount(data.y, minlength=n_classes + 1)[1:]
    console.print(
        f"[green]Wrote {data.n} observations to {escape(str(out))}[/green] "
        f"(class counts {counts.tolist()}); truth in {escape(str(truth_path))}"
    )


@app.command("fit")
def cmd_fit(
    ctx: typer.Context,
    config: Optional[Path] = typer.Option(None, "--config", "-c", help="YAML/JSON run configuration"),
    data: Optional[Path] = typer.Option(None, "--data", "-d", help="Dataset CSV"),
    method: Optional[str] = typer.Option(None, "--method", "-m", help="exact, vb or both"),
    seed: Optional[int] = typer.Option(None, "--seed", help="Random seed (required)"),
    nu2: Optional[float] = typer.Option(None, "--nu2", help="Prior variance"),
    sigma: Optional[str] = typer.Option(None, "--sigma", help="'identity' or an L x L CSV"),
    n_classes: Optional[int] = typer.Option(None, "--L", help="Override the number of classes"),
    n_samples: Optional[int] = typer.Option(None, "--n-samples", help="Exact posterior draws"),
    trunc_method: Optional[str] = typer.Option(None, "--trunc-method", help="auto, rejection or gibbs"),
    n_shards: Optional[int] = typer.Option(None, "--n-shards", help="Sampling substreams"),
    eps: Optional[float] = typer.Option(None, "--eps", help="CAVI convergence threshold"),
    max_sweeps: Optional[int] = typer.Option(None, "--max-sweeps", help="CAVI sweep budget"),
    moment_method: Optional[str] = typer.Option(None, "--moment-method", help="analytic or mc"),
    vb_draws: Optional[int] = typer.Option(None, "--vb-draws", help="Variational posterior draws"),
    quantiles: Optional[str] = typer.Option(None, "--quantiles", help="Comma-separated levels"),
    output_dir: Optional[Path] = typer.Option(None, "--output-dir", "-o", help="Results directory"),
    no_draws: bool = typer.Option(False, "--no-draws", help="Do not write draws_*.csv"),
    resume: Optional[Path] = typer.Option(None, "--resume", help="Start CAVI from a stored vb_state.json"),
) -> None:
    """Fit the model with the exact sampler, the variational approximation, or both.

    With --method both a comparison table reports, per coefficient, the difference of
    the posterior means in units of the exact sampler's Monte Carlo standard error.
    A CAVI run that hits --max-sweeps still writes its results but exits with status 4.
    """
    overrides: Dict[str, Any] = {
        "data_path": data,
        "method": method,
        "seed": seed,
        "nu2": nu2,
        "sigma_source": sigma,
        "n_classes": n_classes,
        "n_samples": n_samples,
        "trunc_method": trunc_method,
        "n_shards": n_shards,
        "eps": eps,
        "max_sweeps": max_sweeps,
        "moment_method": moment_method,
        "vb_draws": vb_draws,
        "output_dir": output_dir,
        "save_draws": False if no_draws else None,
    }
    try:
        if quantiles is not None:
            overrides["quantiles"] = _parse_floats(quantiles, "--quantiles")
        manager = ConfigManager()
        run_config = manager.load_config(config, overrides)
        options = ctx.obj or {}
        setup_logging(
            level=run_config.log_level,
            log_file=options.get("log_file"),
            verbose=bool(options.get("verbose")),
        )
        logger.info(f"Run configuration: {manager.get_config_summary()}")
        init_means = read_vb_state(resume).state.m if resume is not None else None
        record = FitOrchestrator(run_config).execute(init_means=init_means)
        write_results(record, run_config.output_dir, save_draws=run_config.save_draws)
        manager.save_config(run_config.output_dir / "config.yaml")
    except Exception as e:  # noqa: BLE001
        _fail(e)

    _display_fit(record, run_config.output_dir)
    if record.vb is not None and not record.vb.converged:
        _fail(
            MnprobitConvergenceError(
                f"CAVI stopped after {record.vb.state.sweep_count} sweeps without converging",
                recovery_hint="Increase --max-sweeps or loosen --eps; results were written but are flagged.",
                context={"module": "pfm_vb"},
            )
        )


@app.command("summarize")
def cmd_summarize(
    draws_file: Path = typer.Argument(..., help="Draw CSV with header b_1..b_q", metavar="DRAWS"),
    quantiles: str = typer.Option("0.025,0.5,0.975", "--quantiles", "-q", help="Comma-separated levels"),
    out: Optional[Path] = typer.Option(None, "--out", "-o", help="Write the summary CSV here"),
) -> None:
    """Summarize stored posterior draws."""
    try:
        levels = _parse_floats(quantiles, "--quantiles")
        summary = summarize_draws(read_draws(draws_file), levels)
        if out is not None:
            write_summary(summary, out)
    except Exception as e:  # noqa: BLE001
        _fail(e)
    console.print(_summary_table(summary, f"Summary of {draws_file.name} ({summary.n_draws} draws)"))


@app.command("predict")
def cmd_predict(
    result_dir: Path = typer.Option(..., "--result-dir", "-r", help="Output directory of a fit"),
    x_file: Path = typer.Option(..., "--x", help="Covariate CSV with header x1..xp"),
    method: Optional[str] = typer.Option(None, "--method", "-m", help="exact or vb draws"),
    n_draws: int = typer.Option(1000, "--n-draws", help="Posterior draws averaged per row"),
    cdf_tol: float = typer.Option(1e-6, "--cdf-tol", help="Orthant CDF tolerance"),
    out: Optional[Path] = typer.Option(None, "--out", "-o", help="Predictions CSV"),
) -> None:
    """Posterior class probabilities for new covariate rows.

    Each row's probabilities are the plug-in Monte Carlo average of the model's
    choice probabilities over the first --n-draws stored posterior draws.
    """
    try:
        if n_draws < 1:
            raise MnprobitValidationError(f"--n-draws must be positive, got {n_draws}")
        result = read_result(result_dir)
        source = method or ("exact" if "exact" in result["methods"] else "vb")
        if source not in ("exact", "vb"):
            raise MnprobitValidationError(f"--method must be exact or vb, got '{source}'")
        draws_path = result_dir / f"draws_{source}.csv"
        draws = read_draws(draws_path, source=source)
        model_info = result["model"]
        X = read_covariates(x_file, int(model_info["p"]))
        sigma = np.asarray(model_info["sigma"], dtype=float)
        probs = predictive_probabilities(draws.samples[:n_draws], X, sigma, tol=cdf_tol)
        out_path = out or result_dir / "predictions.csv"
        write_predictions(probs, source, out_path)
    except Exception as e:  # noqa: BLE001
        _fail(e)

    table = Table(title=f"Class probabilities ({source} draws)", title_style="bold cyan")
    table.add_column("row", justify="right")
    for ell in range(probs.shape[1]):
        table.add_column(f"p_{ell + 1}", justify="right")
    for r, row in enumerate(probs[:20]):
        table.add_row(str(r + 1), *[f"{value:.4f}" for value in row])
    console.print(table)
    if probs.shape[0] > 20:
        console.print(f"[dim]... {probs.shape[0] - 20} more rows in {escape(str(out_path))}[/dim]")


def main() -> None:
    app()


if __name__ == "__main__":
    main()
