"""Fit orchestrator: data loading, exact posterior, variational posterior, comparison."""

import time
from contextlib import contextmanager
from typing import Any, Dict, Iterator, Optional

import numpy as np

from ..config.models import RunConfig
from ..data.io import ResultRecord, comparison_table, read_dataset, read_sigma
from ..utils.errors import MnprobitCapacityError, MnprobitConfigError, MnprobitError
from ..utils.logging import get_logger, log_phase_complete, log_phase_error, log_phase_start
from .draws import summarize
from .model import DesignExpansion, MnpModel, build_design_expansion
from .pfm import run_cavi, vb_beta_moments, vb_sample_beta
from .sun import log_evidence, posterior_params, sun_sample

logger = get_logger(__name__)

# Substream keys below the run seed; changing them changes every stored draw.
EXACT_STREAM = 0
VB_STREAM = 1


class FitOrchestrator:
    """Runs the fitting pipeline described by a RunConfig."""

    def __init__(self, config: RunConfig):
        if config.seed is None:
            raise MnprobitConfigError(
                "A seed is required for fitting", context={"module": "cli"}
            )
        if config.data_path is None:
            raise MnprobitConfigError("data_path is required for fitting", context={"module": "cli"})
        self.config = config
        self.timing: Dict[str, float] = {}
        self.model: Optional[MnpModel] = None
        self.expansion: Optional[DesignExpansion] = None

    @contextmanager
    def _phase(self, name: str, details: Optional[Dict[str, Any]] = None) -> Iterator[None]:
        log_phase_start(name, details)
        start = time.perf_counter()
        try:
            yield
        except MnprobitError as e:
            log_phase_error(name, e)
            raise
        finally:
            self.timing[name] = time.perf_counter() - start
        log_phase_complete(name, self.timing[name])

    def _stream(self, key: int) -> np.random.SeedSequence:
        return np.random.SeedSequence(self.config.seed, spawn_key=(key,))

    def execute(self, init_means: Optional[np.ndarray] = None) -> ResultRecord:
        """Fit the configured method(s).

        Args:
            init_means: Stored CAVI block means to resume from (overrides ``init``)

        Returns:
            The result record (not yet written to disk)
        """
        config = self.config
        self.timing = {}

        with self._phase("load", {"data": str(config.data_path)}):
            data = read_dataset(config.data_path, n_classes=config.n_classes)  # type: ignore[arg-type]
            sigma = read_sigma(config.sigma_source, data.L)
            self.model = MnpModel(data=data, sigma=sigma, nu2=config.nu2)
            self.expansion = build_design_expansion(self.model)
        model, expansion = self.model, self.expansion

        record = ResultRecord(
            config=config.echo(),
            model={
                "n": data.n,
                "p": data.p,
                "L": data.L,
                "q": model.q,
                "nu2": model.nu2,
                "sigma": model.sigma_pd.values.tolist(),
            },
        )

        with self._phase("evidence", {"dim": model.h}):
            try:
                record.log_evidence = log_evidence(model, expansion, config.cdf_tol)
            except MnprobitCapacityError as e:
                logger.warning(f"Skipping evidence: {e.message}")

        if config.runs_exact():
            with self._phase("exact", {"draws": config.n_samples}):
                params = posterior_params(model, expansion, cdf_tol=config.cdf_tol)
                draws = sun_sample(
                    params,
                    config.n_samples,
                    self._stream(EXACT_STREAM),
                    trunc_method=config.trunc_method,
                    n_shards=config.n_shards,
                    burn_in=config.gibbs_burn_in,
                    thin=config.gibbs_thin,
                    min_acceptance=config.min_acceptance,
                )
                draws.seed = config.seed
                record.draws["exact"] = draws
                record.summaries["exact"] = summarize(draws, config.quantiles)
                record.diagnostics["exact"] = draws.sampler_diag

        if config.runs_vb():
            with self._phase("vb", {"eps": config.eps}):
                vb = run_cavi(
                    model,
                    eps=config.eps,
                    max_sweeps=config.max_sweeps,
                    init=init_means if init_means is not None else config.init,
                    moment_method=config.moment_method,
                    expansion=expansion,
                    seed=config.seed,
                    track_elbo=config.track_elbo,
                    cdf_tol=config.cdf_tol,
                )
                mean, cov = vb_beta_moments(vb, allow_unconverged=True)
                vb_draws = vb_sample_beta(
                    vb,
                    config.vb_draws,
                    self._stream(VB_STREAM),
                    trunc_method=config.trunc_method,
                    allow_unconverged=True,
                )
                vb_draws.seed = config.seed
                record.vb = vb
                record.draws["vb"] = vb_draws
                record.summaries["vb"] = summarize(vb_draws, config.quantiles)
                trace = vb.state.elbo_trace
                record.diagnostics["vb"] = {
                    "converged": vb.converged,
                    "sweeps": vb.state.sweep_count,
                    "last_delta": vb.state.last_delta,
                    "elbo": trace[-1] if trace else None,
                    "elbo_trace": trace,
                    "moment_mean": mean.tolist(),
                    "moment_sd": np.sqrt(np.diag(cov)).tolist(),
                    "sampler": vb_draws.sampler_diag,
                }

        if "exact" in record.summaries and "vb" in record.summaries:
            with self._phase("compare"):
                record.comparison = comparison_table(record.summaries["exact"], record.summaries["vb"])

        record.timing = dict(self.timing)
        return record
