"""Pydantic models for mnprobit run configuration."""

from pathlib import Path
from typing import Any, Dict, List, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

METHODS = ("exact", "vb", "both")
TRUNC_METHODS = ("auto", "rejection", "gibbs")
MOMENT_METHODS = ("analytic", "mc")
INIT_POLICIES = ("default", "ones")
LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL")


class RunConfig(BaseModel):
    """Flat run configuration; unknown keys are rejected."""

    model_config = ConfigDict(extra="forbid", validate_assignment=True)

    # Data and model
    data_path: Optional[Path] = Field(default=None, description="Dataset CSV with header y,x1..xp")
    method: str = Field(default="both", description="exact, vb or both")
    nu2: float = Field(default=25.0, description="Prior variance of every coefficient")
    sigma_source: str = Field(default="identity", description="'identity' or path to an L x L CSV")
    n_classes: Optional[int] = Field(default=None, description="Number of classes (inferred when unset)")

    # Exact posterior sampler
    n_samples: int = Field(default=10_000, description="Exact posterior draws")
    trunc_method: str = Field(default="auto", description="auto, rejection or gibbs")
    gibbs_burn_in: int = Field(default=500, description="Gibbs burn-in sweeps")
    gibbs_thin: int = Field(default=5, description="Gibbs thinning")
    min_acceptance: float = Field(default=0.01, description="Rejection threshold used by auto")
    n_shards: int = Field(default=1, description="Independent sampling substreams")

    # Variational approximation
    eps: float = Field(default=1e-8, description="CAVI convergence threshold")
    max_sweeps: int = Field(default=1000, description="CAVI sweep budget")
    moment_method: Optional[str] = Field(
        default=None, description="analytic or mc truncated moments (unset: by block size)"
    )
    init: str = Field(default="default", description="CAVI initialization policy")
    vb_draws: int = Field(default=10_000, description="Draws from the variational posterior")
    track_elbo: bool = Field(default=True, description="Record the ELBO after every sweep")

    # Shared
    cdf_tol: float = Field(default=1e-6, description="Orthant CDF tolerance")
    seed: Optional[int] = Field(default=None, description="Random seed (required for runs)")
    quantiles: List[float] = Field(default_factory=lambda: [0.025, 0.5, 0.975])
    output_dir: Path = Field(default=Path("mnprobit_output"), description="Results directory")
    save_draws: bool = Field(default=True, description="Write draws_*.csv")
    log_level: str = Field(default="WARNING", description="Console logging level for fit runs")

    @field_validator("method")
    @classmethod
    def validate_method(cls, v: str) -> str:
        if v not in METHODS:
            raise ValueError(f"Invalid method. Must be one of: {list(METHODS)}")
        return v

    @field_validator("trunc_method")
    @classmethod
    def validate_trunc_method(cls, v: str) -> str:
        if v not in TRUNC_METHODS:
            raise ValueError(f"Invalid truncated sampler. Must be one of: {list(TRUNC_METHODS)}")
        return v

    @field_validator("moment_method")
    @classmethod
    def validate_moment_method(cls, v: Optional[str]) -> Optional[str]:
        if v is not None and v not in MOMENT_METHODS:
            raise ValueError(f"Invalid moment method. Must be one of: {list(MOMENT_METHODS)}")
        return v

    @field_validator("init")
    @classmethod
    def validate_init(cls, v: str) -> str:
        if v not in INIT_POLICIES:
            raise ValueError(f"Invalid init policy. Must be one of: {list(INIT_POLICIES)}")
        return v

    @field_validator("nu2", "eps", "cdf_tol", "min_acceptance")
    @classmethod
    def validate_positive(cls, v: float) -> float:
        if not v > 0.0:
            raise ValueError("must be positive")
        return v

    @field_validator("n_samples", "max_sweeps", "vb_draws", "n_shards", "gibbs_thin")
    @classmethod
    def validate_count(cls, v: int) -> int:
        if v < 1:
            raise ValueError("must be a positive integer")
        return v

    @field_validator("gibbs_burn_in")
    @classmethod
    def validate_burn_in(cls, v: int) -> int:
        if v < 0:
            raise ValueError("must be non-negative")
        return v

    @field_validator("n_classes")
    @classmethod
    def validate_n_classes(cls, v: Optional[int]) -> Optional[int]:
        if v is not None and v < 2:
            raise ValueError("need at least 2 classes")
        return v

    @field_validator("cdf_tol")
    @classmethod
    def validate_cdf_tol(cls, v: float) -> float:
        if v < 1e-10:
            raise ValueError("CDF tolerance must be >= 1e-10")
        return v

    @field_validator("quantiles")
    @classmethod
    def validate_quantiles(cls, v: List[float]) -> List[float]:
        for level in v:
            if not 0.0 < level < 1.0:
                raise ValueError(f"quantile level {level} outside (0, 1)")
        return v

    @field_validator("log_level")
    @classmethod
    def validate_level(cls, v: str) -> str:
        if v.upper() not in LOG_LEVELS:
            raise ValueError(f"Invalid logging level. Must be one of: {list(LOG_LEVELS)}")
        return v.upper()

    @model_validator(mode="after")
    def validate_sharding(self) -> "RunConfig":
        if self.n_shards > self.n_samples:
            raise ValueError("n_shards cannot exceed n_samples")
        return self

    def runs_exact(self) -> bool:
        return self.method in ("exact", "both")

    def runs_vb(self) -> bool:
        return self.method in ("vb", "both")

    def echo(self) -> Dict[str, Any]:
        """JSON-ready copy used in result records."""
        return self.model_dump(mode="json")


class ConfigDefaults:
    """Default configuration values."""

    @staticmethod
    def get_default_config() -> Dict[str, Any]:
        return RunConfig().model_dump(exclude_none=True)
