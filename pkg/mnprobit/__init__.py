"""mnprobit - exact and variational Bayesian inference for multinomial probit models."""

__version__ = "0.1.0"
__description__ = (
    "Unified skew-normal posterior sampling and partially-factorized variational "
    "Bayes for multinomial probit regression"
)
