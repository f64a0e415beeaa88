"""Experiment pipelines: phantoms, data simulation, trials, sweeps and the
discrepancy-scaling demonstration for data outside the range cone.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .core import (
    DomainError,
    NumericalFailure,
    RngStream,
    SingularityError,
    as_image,
    kl_divergence,
    sample_poisson_image,
)
from .em import DEFAULT_EPSILON, EmProblem, run_coupled, run_trajectory
from .metrics import (
    RiskCurve,
    aggregate_risks,
    argmin_iteration,
    first_crossing,
    predictive_error,
    reconstruction_errors,
)
from .operators import convolution_operator, count_noise_psf, gaussian_psf
from .risk import RiskSample, paukl, poisson_discrepancy, pukla_approx, rekl

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

log = logging.getLogger(__name__)

__all__ = [
    "MODES",
    "RULES",
    "ExperimentConfig",
    "load_config",
    "synthetic_phantom",
    "SimulatedData",
    "simulate_data",
    "TrialReport",
    "run_trial",
    "trial_stream",
    "SweepResult",
    "run_sweep",
    "ScalingDemoResult",
    "lemma5_demo",
]

MODES = ("inverse_crime", "mismatched_psf")

# Table columns, mapped to the risk-curve column each one minimizes.
RULES = {
    "PE": "pe",
    "PAUKL": "paukl",
    "PUKLA": "pukla",
    "REKL": "rekl",
    "PDP": "pdp",
    "err_KL": "err_kl",
    "err_l2": "err_l2",
}


@dataclass(frozen=True)
class ExperimentConfig:
    """One experiment. ``seed`` has no default: every run is reproducible."""

    seed: int
    flux: float
    mode: str = "inverse_crime"
    phantom: str = "synthetic"
    size: int = 64
    psf_sigma: float = 3.0
    background_level: float = 100.0
    n_realizations: int = 25
    k_max: int = 2000
    epsilon: float = DEFAULT_EPSILON
    psf_noise_scale: float = 1e4
    shared_rekl_probe: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise DomainError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not self.flux > 0:
            raise DomainError("flux must be positive")
        if not self.background_level >= 0:
            raise DomainError("background_level must be nonnegative")
        if self.n_realizations < 1:
            raise DomainError("n_realizations must be at least 1")
        if self.k_max < 1:
            raise DomainError("k_max must be at least 1")
        if not self.epsilon > 0:
            raise DomainError("epsilon must be positive")
        if not self.psf_sigma > 0:
            raise DomainError("psf_sigma must be positive")
        if not self.psf_noise_scale > 0:
            raise DomainError("psf_noise_scale must be positive")
        if not 0 <= self.seed < 2**64:
            raise DomainError("seed must be a 64-bit unsigned integer")

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise DomainError(f"unknown config keys: {', '.join(sorted(unknown))}")
        for key in ("seed", "flux"):
            if key not in data:
                raise DomainError(f"config is missing required key {key!r}")
        for key in ("seed", "size", "n_realizations", "k_max"):
            if key in data:
                data[key] = int(data[key])
        for key in ("flux", "psf_sigma", "background_level", "epsilon", "psf_noise_scale"):
            if key in data:
                data[key] = float(data[key])
        return cls(**data)

    def to_dict(self):
        return dataclasses.asdict(self)

    def digest(self):
        """SHA-256 of the canonical JSON form."""
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


def load_config(path):
    """Read an :class:`ExperimentConfig` from a TOML file."""
    with open(path, "rb") as fh:
        try:
            data = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise DomainError(f"{path}: {exc}") from None
    return ExperimentConfig.from_dict(data.get("experiment", data))


def synthetic_phantom(size=64):
    """A few Gaussian blobs and one point source on a dark field.

    Geometry scales with ``size``; values are relative (rescale to a flux).
    """
    n = int(size)
    yy, xx = np.mgrid[0:n, 0:n] / n

    def blob(cy, cx, sy, sx, amp):
        return amp * np.exp(-0.5 * (((yy - cy) / sy) ** 2 + ((xx - cx) / sx) ** 2))

    img = (
        blob(0.50, 0.50, 0.16, 0.12, 1.0)
        + blob(0.60, 0.62, 0.06, 0.06, 1.0)
        + blob(0.32, 0.66, 0.05, 0.10, 0.7)
    )
    img[img < 1e-3 * img.max()] = 0.0
    img[int(0.75 * n), int(0.25 * n)] += 1.5
    return img


def _phantom(config):
    if config.phantom == "synthetic":
        return synthetic_phantom(config.size)
    from .io import load_image

    return load_image(config.phantom)


@dataclass
class SimulatedData:
    y: np.ndarray
    operator: object
    generator: object
    lambda_true: np.ndarray
    x_true: np.ndarray
    background: float
    psf: object
    psf_exact: object = None


def simulate_data(config, rng, psf_rng=None):
    """Draw one Poisson data realization for ``config``.

    The reconstruction operator always uses the smooth Gaussian PSF. In
    ``mismatched_psf`` mode the data are generated with a count-noise version
    of it, drawn from ``psf_rng`` (default: stream 0 of the config seed, so
    every realization shares the same instrument).
    """
    phantom = as_image(_phantom(config), name="phantom")
    if np.any(phantom < 0):
        raise DomainError("phantom has negative pixels")
    if phantom.ndim != 2 or phantom.sum() <= 0:
        raise DomainError("phantom must be a nonzero 2-D image")
    shape = phantom.shape
    x_true = phantom * (config.flux / phantom.sum())
    psf = gaussian_psf(shape, config.psf_sigma)
    operator = convolution_operator(psf, shape)
    psf_exact = None
    generator = operator
    if config.mode == "mismatched_psf":
        if psf_rng is None:
            psf_rng = RngStream(config.seed, 0)
        psf_exact = count_noise_psf(psf, config.psf_noise_scale, psf_rng)
        generator = convolution_operator(psf_exact, shape)
    lam = np.maximum(generator.apply(x_true), 0.0) + config.background_level
    y = sample_poisson_image(lam, rng)
    return SimulatedData(
        y=y,
        operator=operator,
        generator=generator,
        lambda_true=lam,
        x_true=x_true,
        background=config.background_level,
        psf=psf,
        psf_exact=psf_exact,
    )


@dataclass
class TrialReport:
    """Stopping iterations (``None`` = not reached) and minimized values."""

    index: int
    stops: dict = field(default_factory=dict)
    values: dict = field(default_factory=dict)
    failed: bool = False
    error: str = ""
    floored: int = 0

    @property
    def not_reached(self):
        return {rule: k is None for rule, k in self.stops.items()}


def trial_stream(config, index):
    """RNG stream for realization ``index`` (stream 0 is the PSF noise)."""
    return RngStream(config.seed, 1 + int(index))


class _Recorder:
    """Observer collecting one risk sample (and oracle metrics) per iteration."""

    def __init__(self, y, lambda_true=None, x_true=None):
        self.y = y
        self.m = y.size
        self.lambda_true = lambda_true
        self.x_true = x_true
        self.samples = []
        self.oracle = []

    def __call__(self, k, c):
        y, eps = self.y, c.epsilon
        log_main = c.log_prediction("main")
        pred = c.prediction_of("main")
        d = float(kl_divergence(y, pred))
        p = paukl(y, log_main, c.log_prediction("normal"), c.eta, eps, self.m)
        u = pukla_approx(y, log_main, c.log_prediction("rademacher"), c.zeta, eps)
        r = rekl(y, pred, c.log_prediction("rekl_plus"), c.log_prediction("rekl_minus"), c.eta_rekl, eps, self.m)
        _, pdp = poisson_discrepancy(d, self.m)
        self.samples.append(RiskSample(k, d, p, u, r, pdp, self.m))
        if self.lambda_true is not None:
            pe = predictive_error(self.lambda_true, pred)
            err_l2, err_kl = reconstruction_errors(self.x_true, c.x[c.index("main")])
            self.oracle.append((pe, err_kl, err_l2))

    def curve(self):
        return RiskCurve.from_samples(self.samples, self.oracle if self.lambda_true is not None else None)


def risk_curve(problem, k_max, epsilon, rng, lambda_true=None, x_true=None, shared_rekl_probe=False):
    """Coupled EM run scored at every iteration; returns ``(curve, coupled)``."""
    rec = _Recorder(problem.data, lambda_true, x_true)
    coupled = run_coupled(
        problem, k_max, epsilon, rng, rec, shared_rekl_probe=shared_rekl_probe
    )
    return rec.curve(), coupled


def stopping_report(curve, index=0):
    report = TrialReport(index=index)
    for rule, col in RULES.items():
        values = curve.column(col)
        if values is None:
            continue
        k = argmin_iteration(values, curve.k)
        report.stops[rule] = k
        report.values[rule] = float(values[k - 1]) if k is not None else float(values[-1])
    return report


def run_trial(config, rng, index=0):
    """Simulate one realization, run coupled EM to ``k_max`` and score it.

    Returns ``(curve, report)``; on a numerical failure ``curve`` is ``None``
    and the report is marked failed.
    """
    try:
        sim = simulate_data(config, rng.child(0))
        problem = EmProblem(sim.operator, sim.y, sim.background)
        curve, coupled = risk_curve(
            problem,
            config.k_max,
            config.epsilon,
            rng.child(1),
            sim.lambda_true,
            sim.x_true,
            config.shared_rekl_probe,
        )
    except (NumericalFailure, SingularityError, FloatingPointError) as exc:
        log.warning("trial %d failed: %s", index, exc)
        return None, TrialReport(index=index, failed=True, error=str(exc))
    report = stopping_report(curve, index)
    report.floored = coupled.floored
    return curve, report


def _trial_job(args):
    config, index = args
    return run_trial(config, trial_stream(config, index), index)


@dataclass
class SweepResult:
    config: ExperimentConfig
    reports: list
    curves: list
    aggregate: object

    @property
    def n_failed(self):
        return sum(r.failed for r in self.reports)

    def summary(self):
        """Rows ``(rule, mean_k, std_k, n_failed, n_not_reached)``.

        Means and sample standard deviations are over the trials in which
        the rule's minimum was reached.
        """
        rows = []
        ok = [r for r in self.reports if not r.failed]
        for rule in RULES:
            ks = [r.stops.get(rule) for r in ok]
            reached = np.array([k for k in ks if k is not None], dtype=np.float64)
            mean = float(reached.mean()) if reached.size else float("nan")
            std = float(reached.std(ddof=1)) if reached.size > 1 else (0.0 if reached.size else float("nan"))
            rows.append((rule, mean, std, self.n_failed, len(ks) - reached.size))
        return rows


def run_sweep(config, workers=1):
    """Run ``n_realizations`` independent trials and aggregate them.

    Trial ``i`` always uses stream ``1 + i`` of the seed, so results do not
    depend on ``workers`` or on which other trials are run.
    """
    jobs = [(config, i) for i in range(config.n_realizations)]
    if workers and workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_trial_job, jobs))
    else:
        results = [_trial_job(job) for job in jobs]
    curves = [c for c, _ in results]
    reports = [r for _, r in results]
    good = [c for c in curves if c is not None]
    if not good:
        raise NumericalFailure("every trial of the sweep failed")
    return SweepResult(config, reports, curves, aggregate_risks(good))


@dataclass
class ScalingDemoResult:
    """Discrepancy of scaled data ``L*y`` against the ``M/2`` threshold.

    ``rows`` hold ``(L, min_k d_kl(k, L*y), first k with d_kl < M/2 or None,
    max relative deviation from L * d_kl(k, y))``.
    """

    m: int
    d_kl: np.ndarray
    rows: list

    @property
    def plateau(self):
        return float(self.d_kl[-1])

    @property
    def critical_scale(self):
        """Scale beyond which ``d_kl`` stays above ``M/2`` for the whole budget."""
        return 0.5 * self.m / self.plateau

    @property
    def max_scaling_error(self):
        return max(r[3] for r in self.rows) if self.rows else 0.0


def _dkl_track(problem, k_max):
    out = np.empty(k_max)

    def observe(k, state):
        out[k - 1] = kl_divergence(problem.data, state.prediction)

    run_trajectory(problem, k_max, observe)
    return out


def lemma5_demo(config, scales, rng=None, feasible=False):
    """Run EM without background on ``L*y`` for each scale ``L``.

    ``y`` is a noisy realization from ``config`` (generally outside the cone
    of the reconstruction operator) or, with ``feasible``, the noiseless image
    ``H x*`` which lies inside it.
    """
    if config.background_level != 0:
        raise DomainError("the scaling demonstration needs background_level = 0")
    if rng is None:
        rng = trial_stream(config, 0)
    sim = simulate_data(config, rng.child(0))
    y = sim.operator.apply(sim.x_true) if feasible else sim.y
    y = np.maximum(y, 0.0)
    base = EmProblem(sim.operator, y, 0.0)
    d_base = _dkl_track(base, config.k_max)
    m = y.size
    rows = []
    for scale in scales:
        d = _dkl_track(base.scaled(scale), config.k_max)
        ref = scale * d_base
        rel = float(np.max(np.abs(d - ref) / np.maximum(np.abs(ref), np.finfo(float).tiny)))
        rows.append((float(scale), float(d.min()), first_crossing(d, m), rel))
    return ScalingDemoResult(m=m, d_kl=d_base, rows=rows)
