"""Early stopping of EM (Richardson-Lucy) reconstructions of Poisson data
by KL predictive-risk estimation and the Poisson discrepancy principle."""

from .core import (
    DomainError,
    NumericalFailure,
    RngStream,
    SingularityError,
    kl_divergence,
    sample_poisson,
    sample_poisson_image,
    sample_rademacher,
    sample_standard_normal,
)
from .em import EmProblem, EmState, em_step, reconstruct, run_coupled, run_trajectory
from .harness import ExperimentConfig, lemma5_demo, load_config, run_sweep, run_trial, simulate_data
from .metrics import (
    RiskCurve,
    aggregate_risks,
    argmin_iteration,
    predictive_error,
    reconstruction_errors,
)
from .operators import (
    ConvolutionOperator,
    DenseOperator,
    ForwardOperator,
    Psf,
    convolution_operator,
    count_noise_psf,
    dense_operator,
    gaussian_psf,
)
from .risk import (
    half_m_identity_check,
    paukl,
    poisson_discrepancy,
    pukla_approx,
    rekl,
    stein_lemma_check,
)

__all__ = [
    "DomainError",
    "NumericalFailure",
    "RngStream",
    "SingularityError",
    "kl_divergence",
    "sample_poisson",
    "sample_poisson_image",
    "sample_rademacher",
    "sample_standard_normal",
    "EmProblem",
    "EmState",
    "em_step",
    "reconstruct",
    "run_coupled",
    "run_trajectory",
    "ExperimentConfig",
    "lemma5_demo",
    "load_config",
    "run_sweep",
    "run_trial",
    "simulate_data",
    "RiskCurve",
    "aggregate_risks",
    "argmin_iteration",
    "predictive_error",
    "reconstruction_errors",
    "ConvolutionOperator",
    "DenseOperator",
    "ForwardOperator",
    "Psf",
    "convolution_operator",
    "count_noise_psf",
    "dense_operator",
    "gaussian_psf",
    "half_m_identity_check",
    "paukl",
    "poisson_discrepancy",
    "pukla_approx",
    "rekl",
    "stein_lemma_check",
]

__version__ = "0.1.0"
