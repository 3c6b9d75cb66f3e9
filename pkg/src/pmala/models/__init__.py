"""Concrete state-space models."""

from .lgss import (
    TRUE_PARAMS,
    LgssParams,
    LgssPrior,
    LinearGaussianSSM,
    kalman_loglik,
    kalman_loglik_and_score,
    kalman_score,
    lgss_moments,
    lgss_simulate,
)

__all__ = [
    "TRUE_PARAMS",
    "LgssParams",
    "LgssPrior",
    "LinearGaussianSSM",
    "kalman_loglik",
    "kalman_loglik_and_score",
    "kalman_score",
    "lgss_moments",
    "lgss_simulate",
]

from .mixture import (  # noqa: E402
    DEFAULT_PARAMS as MIXTURE_DEFAULT_PARAMS,
    MixtureExpertsParams,
    MixtureExpertsSSM,
    gate_probability,
    mixture_simulate,
    satisfies_ordering,
)

__all__ += [
    "MIXTURE_DEFAULT_PARAMS",
    "MixtureExpertsParams",
    "MixtureExpertsSSM",
    "gate_probability",
    "mixture_simulate",
    "satisfies_ordering",
]
