"""Shared primitives: KL divergence, seeded random streams and samplers."""

from __future__ import annotations

import math

import numpy as np
from scipy.special import xlogy

__all__ = [
    "DomainError",
    "SingularityError",
    "NumericalFailure",
    "RngStream",
    "as_generator",
    "as_image",
    "kl_divergence",
    "kl_terms",
    "sample_poisson",
    "sample_poisson_image",
    "sample_standard_normal",
    "sample_rademacher",
]


class DomainError(ValueError):
    """An argument lies outside the domain of the operation."""


class SingularityError(ArithmeticError):
    """A division by a zero prediction was required."""


class NumericalFailure(ArithmeticError):
    """An iterate became non-finite."""

    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration


def as_image(values, *, nonnegative=False, positive=False, name="image"):
    """Validate an image-like array and return it as a float64 ndarray.

    Images are plain 2-D (or flat) arrays in row-major order; the checks
    performed here are the ones every role (object, data, background, PSF)
    has in common, plus optional sign constraints.
    """
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise DomainError(f"{name} is empty")
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"{name} has non-finite values")
    if positive and not np.all(arr > 0):
        raise DomainError(f"{name} must be strictly positive")
    if nonnegative and not np.all(arr >= 0):
        raise DomainError(f"{name} must be nonnegative")
    return arr


def kl_terms(u, v):
    """Per-component terms ``u log(u/v) + v - u`` with ``0 log 0 = 0``.

    Near ``u == v`` the terms are evaluated as ``v * ((1 + r) log1p(r) - r)``
    with ``r = (u - v) / v``, which avoids cancellation; elsewhere as
    ``v * (q log q - q + 1)`` with ``q = u / v``.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    q = u / v
    r = q - 1.0
    with np.errstate(divide="ignore", invalid="ignore"):
        near = (1.0 + r) * np.log1p(r) - r
    far = xlogy(q, q) - r
    return v * np.where(np.abs(r) < 0.5, near, far)


def kl_divergence(u, v, axis=None):
    """Kullback-Leibler divergence between a nonnegative and a positive vector.

    Parameters
    ----------
    u : array_like
        Nonnegative values (typically data counts).
    v : array_like
        Strictly positive values of the same shape.
    axis : int or tuple of int, optional
        Axes to sum over. Defaults to all axes.

    Returns
    -------
    float or ndarray
        ``sum(u log(u/v) + v - u)``, which is zero iff ``u == v``.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise DomainError(f"shape mismatch: {u.shape} vs {v.shape}")
    if np.any(u < 0) or not np.all(np.isfinite(u)):
        raise DomainError("first argument must be finite and nonnegative")
    if not np.all(v > 0) or not np.all(np.isfinite(v)):
        raise DomainError("second argument must be finite and strictly positive")
    return np.sum(kl_terms(u, v), axis=axis)


class RngStream:
    """A reproducible random stream identified by ``(seed, stream_id)``.

    Streams are PCG64 generators keyed through :class:`numpy.random.SeedSequence`
    with ``stream_id`` (and any child indices) as the spawn key, so distinct
    ids give independent streams and equal ids give bit-identical output on
    every platform. A stream holds mutable generator state: confine each
    instance to one worker and use :meth:`child` to fan out.
    """

    def __init__(self, seed, stream_id=0, _path=()):
        seed = int(seed)
        stream_id = int(stream_id)
        if not (0 <= seed < 2**64) or not (0 <= stream_id < 2**64):
            raise DomainError("seed and stream_id must be 64-bit unsigned integers")
        self.seed = seed
        self.stream_id = stream_id
        self._path = tuple(int(p) for p in _path)
        key = (stream_id, *self._path)
        self.generator = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence(seed, spawn_key=key))
        )

    def child(self, index):
        """Independent sub-stream ``index`` of this stream (fresh state)."""
        return RngStream(self.seed, self.stream_id, (*self._path, index))

    def __repr__(self):
        path = "".join(f"/{p}" for p in self._path)
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id}{path})"


def as_generator(rng):
    if isinstance(rng, RngStream):
        return rng.generator
    if isinstance(rng, np.random.Generator):
        return rng
    raise TypeError(f"expected RngStream or numpy Generator, got {type(rng).__name__}")


def sample_poisson(mean, rng):
    """One Poisson draw. ``mean == 0`` returns 0 deterministically."""
    mean = float(mean)
    if not math.isfinite(mean) or mean < 0:
        raise DomainError(f"Poisson mean must be finite and nonnegative, got {mean}")
    if mean == 0:
        return 0
    return int(as_generator(rng).poisson(mean))


def sample_poisson_image(mean, rng):
    """Independent per-pixel Poisson counts with the given mean image."""
    mean = np.asarray(mean, dtype=np.float64)
    if not np.all(np.isfinite(mean)) or np.any(mean < 0):
        raise DomainError("Poisson mean image must be finite and nonnegative")
    return as_generator(rng).poisson(mean).astype(np.float64)


def sample_standard_normal(n, rng):
    if int(n) < 1:
        raise DomainError("n must be at least 1")
    return as_generator(rng).standard_normal(int(n))


def sample_rademacher(n, rng):
    """``n`` independent signs, each +1 or -1 with probability 1/2."""
    if int(n) < 1:
        raise DomainError("n must be at least 1")
    bits = as_generator(rng).integers(0, 2, size=int(n))
    return 2.0 * bits - 1.0
