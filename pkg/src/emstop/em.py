"""EM (Richardson-Lucy) iteration for Poisson data with background.

The update is ``x <- x / H^T 1 * H^T(y / (H x + b))``. Coupled runs advance
the main trajectory together with trajectories on probe-perturbed data, which
is what the Monte-Carlo risk estimators in :mod:`emstop.risk` consume.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .core import (
    DomainError,
    NumericalFailure,
    RngStream,
    SingularityError,
    as_image,
    kl_divergence,
    sample_rademacher,
    sample_standard_normal,
)

__all__ = [
    "EmProblem",
    "EmState",
    "CoupledTrajectories",
    "DEFAULT_K_MAX",
    "DEFAULT_EPSILON",
    "initial_state",
    "em_step",
    "run_trajectory",
    "run_coupled",
    "reconstruct",
]

DEFAULT_K_MAX = 20_000
DEFAULT_EPSILON = 1e-3

# Iterate pixels below this are raised to it; keeps x > 0 under rounding.
X_FLOOR = 1e-300
PRED_FLOOR = 1e-300


@dataclass
class EmProblem:
    """Data ``y``, operator ``H``, background ``b`` and starting point ``x0``.

    ``background`` may be a scalar or an image. A background with zero
    pixels puts the problem in relaxed mode, where ``H x + b > 0`` is checked
    on every iteration instead of being guaranteed.
    """

    operator: object
    data: np.ndarray
    background: object = 0.0
    initial: np.ndarray | None = None

    def __post_init__(self):
        op = self.operator
        self.data = as_image(self.data, nonnegative=True, name="data")
        if self.data.shape != tuple(op.output_shape):
            raise DomainError(
                f"data shape {self.data.shape} does not match operator output {op.output_shape}"
            )
        b = as_image(self.background, nonnegative=True, name="background")
        self.background = np.broadcast_to(b, op.output_shape).copy()
        if self.initial is None:
            self.initial = np.ones(op.input_shape)
        self.initial = as_image(self.initial, positive=True, name="initial")
        if self.initial.shape != tuple(op.input_shape):
            raise DomainError("initial image does not match operator input shape")

    @property
    def relaxed(self):
        return bool(np.any(self.background == 0))

    @property
    def size(self):
        return self.data.size

    def scaled(self, factor):
        """Same problem with data multiplied by ``factor``."""
        return EmProblem(self.operator, factor * self.data, self.background, self.initial)


@dataclass
class EmState:
    k: int
    x: np.ndarray
    prediction: np.ndarray
    floored: int = 0

    @property
    def log_prediction(self):
        return np.log(self.prediction)


def _predict(problem, x, data, k):
    pred = problem.operator.apply(x) + problem.background
    bad = pred <= 0
    if np.any(bad):
        if np.any(bad & (data > 0)):
            raise SingularityError(f"zero prediction on a pixel with counts at iteration {k}")
        pred = np.where(bad, PRED_FLOOR, pred)
    return pred


def _update(problem, x, pred, data, k):
    """One EM step on (possibly stacked) iterates; returns (x, pred, n_floored)."""
    op = problem.operator
    with np.errstate(over="ignore", invalid="ignore"):
        ratio = np.divide(data, pred, out=np.zeros_like(pred), where=data > 0)
        x_new = x / op.column_sums * op.apply_adjoint(ratio)
    if not np.all(np.isfinite(x_new)):
        raise NumericalFailure(f"non-finite iterate at iteration {k}", iteration=k)
    low = x_new < X_FLOOR
    n_low = int(np.count_nonzero(low))
    if n_low:
        x_new[low] = X_FLOOR
    return x_new, _predict(problem, x_new, data, k), n_low


def initial_state(problem):
    x0 = problem.initial.copy()
    return EmState(0, x0, _predict(problem, x0, problem.data, 0))


def em_step(problem, state):
    x, pred, n_low = _update(problem, state.x, state.prediction, problem.data, state.k + 1)
    return EmState(state.k + 1, x, pred, state.floored + (n_low > 0))


def _checkpoint(directory, stride, k, x):
    if directory and stride and k % stride == 0:
        from .io import save_image

        save_image(os.path.join(directory, f"x_{k:06d}.txt"), x)


def run_trajectory(problem, k_max, observer=None, *, checkpoint_dir=None, checkpoint_stride=0):
    """Iterate ``k_max`` times, calling ``observer(k, state)`` after each step.

    With ``checkpoint_dir`` and a positive ``checkpoint_stride`` every
    ``stride``-th iterate is written there as a plain-text image.
    """
    if k_max < 0:
        raise DomainError("k_max must be nonnegative")
    state = initial_state(problem)
    for _ in range(int(k_max)):
        state = em_step(problem, state)
        if observer is not None:
            observer(state.k, state)
        _checkpoint(checkpoint_dir, checkpoint_stride, state.k, state.x)
    return state


def reconstruct(problem, k):
    """``R_k(y)``: the k-th EM iterate."""
    return run_trajectory(problem, k).x


@dataclass
class CoupledTrajectories:
    """Main EM trajectory advanced in lockstep with probe-perturbed replicas.

    Replica names: ``main`` on ``y``; ``normal`` on ``y + eps*eta``;
    ``rademacher`` on ``y + eps*zeta``; ``rekl_plus`` / ``rekl_minus`` on
    ``y +/- eps*eta_rekl``. Perturbed data are clamped at zero.
    """

    problem: EmProblem
    epsilon: float
    eta: np.ndarray
    zeta: np.ndarray
    eta_rekl: np.ndarray
    names: tuple
    data: np.ndarray
    k: int = 0
    x: np.ndarray = field(default=None, repr=False)
    prediction: np.ndarray = field(default=None, repr=False)
    floored: int = 0
    aliases: dict = field(default_factory=dict)
    _logs: dict = field(default_factory=dict, repr=False)

    def index(self, name):
        name = self.aliases.get(name, name)
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"trajectory {name!r} was not run") from None

    def state(self, name="main"):
        i = self.index(name)
        return EmState(self.k, self.x[i], self.prediction[i], self.floored)

    def prediction_of(self, name="main"):
        return self.prediction[self.index(name)]

    def log_prediction(self, name="main"):
        i = self.index(name)
        if i not in self._logs:
            self._logs[i] = np.log(self.prediction[i])
        return self._logs[i]

    @property
    def main(self):
        return self.state("main")

    def d_kl(self):
        """Discrepancy ``D_KL(y, H x_k + b)`` of the main trajectory."""
        return float(kl_divergence(self.problem.data, self.prediction_of("main")))

    def step(self):
        k = self.k + 1
        self.x, self.prediction, n_low = _update(self.problem, self.x, self.prediction, self.data, k)
        self.k = k
        self.floored += n_low > 0
        self._logs = {}


_ALL_PROBES = ("normal", "rademacher", "rekl")


def run_coupled(
    problem,
    k_max,
    epsilon=DEFAULT_EPSILON,
    rng=None,
    observer=None,
    *,
    probes=_ALL_PROBES,
    shared_rekl_probe=False,
    eta=None,
    zeta=None,
    eta_rekl=None,
):
    """Run the main trajectory and the requested perturbed replicas to ``k_max``.

    The probes ``eta`` (normal), ``zeta`` (+/-1) and ``eta_rekl`` (normal) are
    drawn once, in that order, from ``rng`` unless given explicitly. With
    ``shared_rekl_probe`` the REKL difference reuses ``eta`` and its ``+``
    replica coincides with ``normal``. ``observer(k, coupled)`` is called after
    every step with all replicas at the same iteration.
    """
    if not epsilon > 0:
        raise DomainError("epsilon must be positive")
    if k_max < 0:
        raise DomainError("k_max must be nonnegative")
    unknown = set(probes) - set(_ALL_PROBES)
    if unknown:
        raise DomainError(f"unknown probes: {sorted(unknown)}")

    shape = problem.data.shape
    m = problem.size
    if rng is None:
        rng = RngStream(0)
    draws = {
        "eta": sample_standard_normal(m, rng).reshape(shape),
        "zeta": sample_rademacher(m, rng).reshape(shape),
        "eta_rekl": sample_standard_normal(m, rng).reshape(shape),
    }
    if eta is not None:
        draws["eta"] = np.broadcast_to(np.asarray(eta, dtype=np.float64), shape).copy()
    if zeta is not None:
        draws["zeta"] = np.broadcast_to(np.asarray(zeta, dtype=np.float64), shape).copy()
    if eta_rekl is not None:
        draws["eta_rekl"] = np.broadcast_to(np.asarray(eta_rekl, dtype=np.float64), shape).copy()
    if shared_rekl_probe:
        draws["eta_rekl"] = draws["eta"]

    y = problem.data
    names = ["main"]
    stack = [y]
    if "normal" in probes or ("rekl" in probes and shared_rekl_probe):
        names.append("normal")
        stack.append(np.maximum(y + epsilon * draws["eta"], 0.0))
    if "rademacher" in probes:
        names.append("rademacher")
        stack.append(np.maximum(y + epsilon * draws["zeta"], 0.0))
    if "rekl" in probes:
        if not shared_rekl_probe:
            names.append("rekl_plus")
            stack.append(np.maximum(y + epsilon * draws["eta_rekl"], 0.0))
        names.append("rekl_minus")
        stack.append(np.maximum(y - epsilon * draws["eta_rekl"], 0.0))

    data = np.stack(stack)
    x0 = np.broadcast_to(problem.initial, (len(names), *problem.initial.shape)).copy()
    coupled = CoupledTrajectories(
        problem=problem,
        epsilon=float(epsilon),
        eta=draws["eta"],
        zeta=draws["zeta"],
        eta_rekl=draws["eta_rekl"],
        names=tuple(names),
        data=data,
        aliases={"rekl_plus": "normal"} if shared_rekl_probe else {},
        x=x0,
        prediction=_predict(problem, x0, data, 0),
    )
    for _ in range(int(k_max)):
        coupled.step()
        if observer is not None:
            observer(coupled.k, coupled)
    return coupled
