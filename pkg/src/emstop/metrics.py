"""Ground-truth error metrics, risk curves and minimum-iteration extraction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import DomainError, kl_divergence

__all__ = [
    "ESTIMATOR_FIELDS",
    "ORACLE_FIELDS",
    "PATIENCE",
    "RiskCurve",
    "RiskAggregate",
    "predictive_error",
    "reconstruction_errors",
    "aggregate_risks",
    "argmin_iteration",
    "online_argmin",
    "first_crossing",
]

ESTIMATOR_FIELDS = ("d_kl", "paukl", "pukla", "rekl", "pdp")
ORACLE_FIELDS = ("pe", "err_kl", "err_l2")

# Iterations without a new global minimum before an online rule stops.
PATIENCE = 50


def predictive_error(lambda_true, pred):
    """``D_KL(lambda, lambda_hat_k(y))``."""
    return float(kl_divergence(lambda_true, pred))


def reconstruction_errors(x_true, x_k):
    """``(||x* - x_k||_2, D_KL(x*, x_k))``."""
    x_true = np.asarray(x_true, dtype=np.float64)
    x_k = np.asarray(x_k, dtype=np.float64)
    if x_true.shape != x_k.shape:
        raise DomainError("image shapes differ")
    return float(np.linalg.norm((x_true - x_k).ravel())), float(kl_divergence(x_true, x_k))


@dataclass
class RiskCurve:
    """Per-iteration estimator values, with an optional ground-truth track.

    Columns are numpy arrays indexed by position; ``k`` holds the iteration
    numbers (1, 2, ...). The oracle columns are ``None`` when no ground
    truth was available.
    """

    k: np.ndarray
    d_kl: np.ndarray
    paukl: np.ndarray
    pukla: np.ndarray
    rekl: np.ndarray
    pdp: np.ndarray
    m: int
    pe: np.ndarray | None = None
    err_kl: np.ndarray | None = None
    err_l2: np.ndarray | None = None

    def __post_init__(self):
        self.k = np.asarray(self.k, dtype=np.int64)
        n = self.k.size
        if n and (self.k[0] != 1 or np.any(np.diff(self.k) != 1)):
            raise DomainError("iterations must run 1, 2, 3, ...")
        for name in ESTIMATOR_FIELDS + ORACLE_FIELDS:
            col = getattr(self, name)
            if col is None:
                continue
            col = np.asarray(col, dtype=np.float64)
            if col.shape != (n,):
                raise DomainError(f"column {name} has length {col.size}, expected {n}")
            setattr(self, name, col)
        present = [getattr(self, name) is not None for name in ORACLE_FIELDS]
        if any(present) and not all(present):
            raise DomainError("oracle columns must be given together")

    @classmethod
    def from_samples(cls, samples, oracle=None):
        """Build from :class:`~emstop.risk.RiskSample` rows and optional
        ``(pe, err_kl, err_l2)`` tuples aligned with them."""
        samples = list(samples)
        m = samples[0].m if samples else 0
        cols = {name: [getattr(s, name) for s in samples] for name in ("k",) + ESTIMATOR_FIELDS}
        if oracle is not None:
            oracle = np.asarray(oracle, dtype=np.float64).reshape(-1, 3)
            cols.update(pe=oracle[:, 0], err_kl=oracle[:, 1], err_l2=oracle[:, 2])
        return cls(m=m, **cols)

    def __len__(self):
        return int(self.k.size)

    @property
    def has_oracle(self):
        return self.pe is not None

    @property
    def fields(self):
        return ESTIMATOR_FIELDS + (ORACLE_FIELDS if self.has_oracle else ())

    def column(self, name):
        return getattr(self, name)


@dataclass
class RiskAggregate:
    """Per-iteration means and standard deviations over realizations."""

    k: np.ndarray
    n: int
    mean: dict = field(default_factory=dict)
    std: dict = field(default_factory=dict)

    @property
    def spr(self):
        """Sample predictive risk: the mean predictive error."""
        return self.mean.get("pe")

    @property
    def er_kl(self):
        return self.mean.get("err_kl")

    @property
    def er_l2(self):
        return self.mean.get("err_l2")


def aggregate_risks(curves):
    """Average ``n`` risk curves from independent realizations, per iteration."""
    curves = list(curves)
    if not curves:
        raise DomainError("no curves to aggregate")
    k = curves[0].k
    for c in curves[1:]:
        if not np.array_equal(c.k, k):
            raise DomainError("curves cover different iteration ranges")
    names = list(ESTIMATOR_FIELDS)
    if all(c.has_oracle for c in curves):
        names += list(ORACLE_FIELDS)
    agg = RiskAggregate(k=k.copy(), n=len(curves))
    for name in names:
        stack = np.stack([c.column(name) for c in curves])
        agg.mean[name] = stack.mean(axis=0)
        agg.std[name] = stack.std(axis=0)
    return agg


def argmin_iteration(values, k=None, patience=PATIENCE):
    """Iteration of the global minimum of ``values`` (earliest on ties).

    Returns ``None`` ("not reached") when the minimum sits at the last
    iteration and the curve is still strictly decreasing over the final
    ``patience`` steps.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise DomainError("empty curve")
    k = np.arange(1, values.size + 1) if k is None else np.asarray(k)
    i = int(np.argmin(values))
    if i == values.size - 1 and values.size > 1:
        tail = values[-(patience + 1):]
        if np.all(np.diff(tail) < 0):
            return None
    return int(k[i])


def online_argmin(values, k=None, patience=PATIENCE):
    """Stopping rule run on the fly: the running minimum, declared once
    ``patience`` further iterations bring no new minimum.

    Returns ``(k_min, k_stop)``, or ``None`` if the curve ends first.
    """
    values = np.asarray(values, dtype=np.float64)
    k = np.arange(1, values.size + 1) if k is None else np.asarray(k)
    best = 0
    for i in range(values.size):
        if values[i] < values[best]:
            best = i
        elif i - best >= patience:
            return int(k[best]), int(k[i])
    return None


def first_crossing(d_kl, m, k=None):
    """First iteration with ``d_kl < M/2``, or ``None``."""
    d_kl = np.asarray(d_kl, dtype=np.float64)
    k = np.arange(1, d_kl.size + 1) if k is None else np.asarray(k)
    hits = np.flatnonzero(d_kl < 0.5 * m)
    return int(k[hits[0]]) if hits.size else None
