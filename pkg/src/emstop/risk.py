"""KL predictive-risk estimators, the Poisson discrepancy principle, and
Monte-Carlo checks of the asymptotic identities behind them.

The estimators take log-predictions rather than EM states, so any estimator
of the Poisson mean can be scored, not only EM iterates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import DomainError, NumericalFailure, as_generator, kl_divergence, kl_terms

__all__ = [
    "RiskSample",
    "divergence_probe",
    "paukl",
    "pukla_approx",
    "rekl",
    "poisson_discrepancy",
    "SteinCheck",
    "stein_lemma_check",
    "log_sum_test_function",
    "half_m_identity_check",
]


@dataclass(frozen=True)
class RiskSample:
    k: int
    d_kl: float
    paukl: float
    pukla: float
    rekl: float
    pdp: float
    m: int


def _finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericalFailure("non-finite log prediction")


def divergence_probe(y, log_pred, log_pred_perturbed, probe, epsilon):
    """Monte-Carlo estimate of ``(y grad) . log lambda_hat`` from one probe.

    ``sum(y * probe * (log_pred_perturbed - log_pred) / epsilon)``
    """
    if not epsilon > 0:
        raise DomainError("epsilon must be positive")
    y = np.asarray(y, dtype=np.float64)
    _finite(log_pred, log_pred_perturbed)
    diff = (np.asarray(log_pred_perturbed) - np.asarray(log_pred)) / epsilon
    return float(np.sum(y * np.asarray(probe) * diff))


def paukl(y, log_pred, log_pred_eta, eta, epsilon, m=None):
    """Asymptotically unbiased KL risk estimate with a normal-probe divergence.

    ``D_KL(y, lambda_hat) + divergence - M/2``.
    """
    y = np.asarray(y, dtype=np.float64)
    m = y.size if m is None else int(m)
    _finite(log_pred)
    d_kl = float(kl_divergence(y, np.exp(log_pred)))
    return d_kl + divergence_probe(y, log_pred, log_pred_eta, eta, epsilon) - 0.5 * m


def pukla_approx(y, log_pred, log_pred_zeta, zeta, epsilon):
    """Two-reconstruction approximation of PUKLA with a +/-1 probe.

    ``||lambda_hat||_1 - (y . log lambda_hat - divergence)``; the result is
    only defined up to an unknown additive constant.
    """
    y = np.asarray(y, dtype=np.float64)
    log_pred = np.asarray(log_pred, dtype=np.float64)
    _finite(log_pred)
    correction = divergence_probe(y, log_pred, log_pred_zeta, zeta, epsilon)
    return float(np.sum(np.exp(log_pred)) - (np.sum(y * log_pred) - correction))


def rekl(y, pred, log_pred_plus, log_pred_minus, eta, epsilon, m=None):
    """Centered-difference KL risk estimate, defined up to an additive constant."""
    if not epsilon > 0:
        raise DomainError("epsilon must be positive")
    y = np.asarray(y, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    eta = np.asarray(eta, dtype=np.float64)
    m = y.size if m is None else int(m)
    scale = float(np.max(np.abs(eta))) if eta.size else 0.0
    if scale == 0:
        raise DomainError("probe has zero norm")
    # rescale so tiny probes do not underflow the squared norm
    unit = eta / scale
    norm2 = float(np.sum(unit * unit))
    if not np.all(pred > 0):
        raise DomainError("prediction must be strictly positive")
    _finite(log_pred_plus, log_pred_minus)
    log_pred = np.log(pred)
    diff = np.asarray(log_pred_plus) - np.asarray(log_pred_minus)
    trace = m * np.sum(y * unit * diff) / (2.0 * epsilon * norm2 * scale)
    return float(np.sum(pred - y * log_pred) + trace)


def poisson_discrepancy(d_kl, m):
    """``(d_kl < M/2, |d_kl - M/2|)``."""
    half = 0.5 * m
    return bool(d_kl < half), abs(d_kl - half)


@dataclass(frozen=True)
class SteinCheck:
    """Both sides of the Poisson Stein identity, per component.

    ``stderr`` is the standard error of ``lhs - rhs`` estimated from the
    paired per-draw differences.
    """

    lhs: np.ndarray
    rhs: np.ndarray
    stderr: np.ndarray

    @property
    def gap(self):
        return np.abs(self.lhs - self.rhs)


def log_sum_test_function(m, c=1.0):
    """``f(y) = log((1.y + c) / M)`` and its gradient, vectorized over rows."""

    def f(y):
        return np.log((np.sum(y, axis=-1) + c) / m)

    def grad(y):
        s = np.sum(y, axis=-1, keepdims=True) + c
        return np.broadcast_to(1.0 / s, np.shape(y))

    return f, grad


def _chunks(n, size):
    while n > 0:
        step = min(n, size)
        yield step
        n -= step


def stein_lemma_check(f, grad, lam, n_draws, rng, index=None, chunk=100_000):
    """Monte-Carlo estimates of ``E[(Y_i - lam_i) f(Y)]`` and ``E[Y_i d_i f(Y)]``.

    ``f`` maps an ``(n, M)`` array of draws to ``n`` values and ``grad`` to an
    ``(n, M)`` array of partial derivatives.

    Both sides use first-order Taylor control variates around ``lam``: the
    left side averages ``(Y_i - lam_i)(f(Y) - f(lam) - grad f(lam).(Y - lam))``
    and the right side ``Y_i (d_i f(Y) - d_i f(lam))``. The subtracted terms
    have the same known mean ``lam_i d_i f(lam)``, which is added back to
    each side. Expectations are unchanged; the variance of the difference
    drops far enough to resolve gaps of order ``1/||lam||``.
    """
    lam = np.asarray(lam, dtype=np.float64).ravel()
    if not np.all(lam > 0):
        raise DomainError("lambda must be strictly positive")
    if int(n_draws) < 1:
        raise DomainError("n_draws must be at least 1")
    gen = as_generator(rng)
    idx = np.arange(lam.size) if index is None else np.atleast_1d(index)
    f_lam = float(f(lam[None, :])[0])
    g_lam = np.asarray(grad(lam[None, :]), dtype=np.float64)[0]
    shift = lam[idx] * g_lam[idx]
    sums = np.zeros((3, idx.size))
    sq = np.zeros((3, idx.size))
    for n in _chunks(int(n_draws), chunk):
        y = gen.poisson(lam, size=(n, lam.size)).astype(np.float64)
        dy = y - lam
        resid = (f(y) - f_lam - dy @ g_lam)[:, None]
        left = dy[:, idx] * resid
        right = y[:, idx] * (grad(y)[:, idx] - g_lam[idx])
        for j, t in enumerate((left, right, left - right)):
            sums[j] += t.sum(axis=0)
            sq[j] += (t * t).sum(axis=0)
    n = int(n_draws)
    mean = sums / n
    var = np.maximum(sq / n - mean**2, 0.0) * n / max(n - 1, 1)
    stderr = np.sqrt(var[2] / n)
    lhs, rhs = mean[0] + shift, mean[1] + shift
    if index is not None and np.ndim(index) == 0:
        return SteinCheck(lhs[0], rhs[0], stderr[0])
    return SteinCheck(lhs, rhs, stderr)


def half_m_identity_check(lam, n_draws, rng, chunk=100_000):
    """Monte-Carlo estimate of ``E[sum_i Y_i log(Y_i / lam_i)]`` (about M/2).

    Each draw contributes ``D_KL(Y, lam)``, which differs from the target sum
    by ``sum(lam - Y)``, a mean-zero term whose removal leaves the expectation
    unchanged and keeps the variance bounded as ``lam`` grows.

    Returns ``(estimate, stderr)``.
    """
    lam = np.asarray(lam, dtype=np.float64).ravel()
    if not np.all(lam > 0):
        raise DomainError("lambda must be strictly positive")
    if int(n_draws) < 1:
        raise DomainError("n_draws must be at least 1")
    gen = as_generator(rng)
    total = 0.0
    total_sq = 0.0
    for n in _chunks(int(n_draws), chunk):
        y = gen.poisson(lam, size=(n, lam.size)).astype(np.float64)
        d = kl_terms(y, lam).sum(axis=1)
        total += d.sum()
        total_sq += (d * d).sum()
    n = int(n_draws)
    mean = total / n
    var = max(total_sq / n - mean * mean, 0.0) * n / max(n - 1, 1)
    return float(mean), float(np.sqrt(var / n))
