"""Linear forward models: operator contract, FFT convolution, dense matrices, PSFs."""

from __future__ import annotations

import abc
from dataclasses import dataclass

import numpy as np
import scipy.fft

from .core import DomainError, RngStream, as_image, sample_poisson_image

__all__ = [
    "ForwardOperator",
    "ConvolutionOperator",
    "DenseOperator",
    "Psf",
    "gaussian_psf",
    "count_noise_psf",
    "convolution_operator",
    "dense_operator",
]


class ForwardOperator(abc.ABC):
    """Linear map from object space to data space with a nonnegative kernel.

    ``apply`` and ``apply_adjoint`` accept arrays with arbitrary leading batch
    axes followed by ``input_shape`` (resp. ``output_shape``).
    """

    input_shape: tuple
    output_shape: tuple

    @abc.abstractmethod
    def apply(self, x):
        ...

    @abc.abstractmethod
    def apply_adjoint(self, y):
        ...

    @property
    def column_sums(self):
        """``H^T 1``, cached on first use."""
        cs = getattr(self, "_column_sums", None)
        if cs is None:
            cs = self.apply_adjoint(np.ones(self.output_shape))
            if not np.all(cs > 0):
                raise DomainError("operator has a non-positive column sum")
            self._column_sums = cs
        return cs

    def to_dense(self):
        """Explicit matrix, built column by column from basis vectors."""
        n = int(np.prod(self.input_shape))
        basis = np.eye(n).reshape((n, *self.input_shape))
        cols = self.apply(basis).reshape(n, -1)
        return cols.T


@dataclass(frozen=True)
class Psf:
    """Nonnegative unit-sum kernel with its center pixel ``(row, col)``."""

    values: np.ndarray
    center: tuple

    def __post_init__(self):
        vals = as_image(self.values, nonnegative=True, name="PSF")
        if vals.ndim != 2:
            raise DomainError("PSF must be a 2-D image")
        total = vals.sum()
        if not abs(total - 1.0) <= 1e-12:
            raise DomainError(f"PSF must sum to 1, got {total!r}")
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "center", tuple(int(c) for c in self.center))

    @classmethod
    def from_image(cls, values, center=None):
        """Normalize a nonnegative image to unit sum; center defaults to the grid center."""
        vals = as_image(values, nonnegative=True, name="PSF")
        total = vals.sum()
        if total <= 0:
            raise DomainError("PSF image has zero total")
        if center is None:
            center = (vals.shape[0] // 2, vals.shape[1] // 2)
        return cls(vals / total, center)

    @property
    def shape(self):
        return self.values.shape


def gaussian_psf(shape, sigma):
    """Isotropic Gaussian sampled at pixel centers, normalized to unit sum.

    ``shape`` is ``(rows, cols)``; the center pixel is ``(rows // 2, cols // 2)``.
    """
    rows, cols = (int(s) for s in shape)
    if rows < 1 or cols < 1:
        raise DomainError("PSF dimensions must be positive")
    if not sigma > 0:
        raise DomainError(f"sigma must be positive, got {sigma}")
    cy, cx = rows // 2, cols // 2
    yy = np.arange(rows) - cy
    xx = np.arange(cols) - cx
    g = np.exp(-(yy[:, None] ** 2 + xx[None, :] ** 2) / (2.0 * sigma**2))
    return Psf(g / g.sum(), (cy, cx))


def count_noise_psf(base, scale, rng):
    """Irregular PSF: scale ``base`` to counts, draw Poisson noise, renormalize.

    An all-zero draw is redrawn.
    """
    if not scale > 0:
        raise DomainError(f"scale must be positive, got {scale}")
    if isinstance(rng, int):
        rng = RngStream(rng)
    mean = scale * base.values
    while True:
        counts = sample_poisson_image(mean, rng)
        total = counts.sum()
        if total > 0:
            return Psf(counts / total, base.center)


class ConvolutionOperator(ForwardOperator):
    """Circular convolution with a PSF, computed with real FFTs.

    The PSF is embedded in the image grid with its center moved to the
    origin, so a centered unit spike gives the identity. The adjoint is
    correlation with the same kernel.
    """

    def __init__(self, psf, shape):
        shape = tuple(int(s) for s in shape)
        if len(shape) != 2:
            raise DomainError("convolution operates on 2-D images")
        if psf.shape[0] > shape[0] or psf.shape[1] > shape[1]:
            raise DomainError(f"PSF {psf.shape} larger than image {shape}")
        self.psf = psf
        self.input_shape = self.output_shape = shape
        kernel = np.zeros(shape)
        kernel[: psf.shape[0], : psf.shape[1]] = psf.values
        kernel = np.roll(kernel, (-psf.center[0], -psf.center[1]), axis=(0, 1))
        self._otf = scipy.fft.rfft2(kernel)
        self._otf_conj = np.conj(self._otf)

    def _filter(self, x, otf):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-2:] != self.input_shape:
            raise DomainError(f"expected trailing shape {self.input_shape}, got {x.shape}")
        return scipy.fft.irfft2(scipy.fft.rfft2(x) * otf, s=self.input_shape)

    def apply(self, x):
        return self._filter(x, self._otf)

    def apply_adjoint(self, y):
        return self._filter(y, self._otf_conj)


class DenseOperator(ForwardOperator):
    """Explicit nonnegative matrix; the small-instance oracle.

    With ``strict`` every entry must be positive, as the convergence theory
    assumes; the default only requires nonnegative entries and no zero column.
    """

    def __init__(self, matrix, input_shape=None, output_shape=None, strict=False):
        mat = as_image(matrix, nonnegative=True, positive=strict, name="matrix")
        if mat.ndim != 2:
            raise DomainError("matrix must be 2-D")
        if not np.all(mat.sum(axis=0) > 0):
            raise DomainError("matrix has a zero column")
        self.matrix = mat
        self.input_shape = tuple(input_shape) if input_shape else (mat.shape[1],)
        self.output_shape = tuple(output_shape) if output_shape else (mat.shape[0],)
        if int(np.prod(self.input_shape)) != mat.shape[1]:
            raise DomainError("input_shape does not match matrix columns")
        if int(np.prod(self.output_shape)) != mat.shape[0]:
            raise DomainError("output_shape does not match matrix rows")
        self._column_sums = mat.sum(axis=0).reshape(self.input_shape)

    def _matvec(self, mat, x, in_shape, out_shape):
        x = np.asarray(x, dtype=np.float64)
        nd = len(in_shape)
        if x.shape[x.ndim - nd:] != in_shape:
            raise DomainError(f"expected trailing shape {in_shape}, got {x.shape}")
        batch = x.shape[: x.ndim - nd]
        flat = x.reshape(*batch, -1)
        return (flat @ mat.T).reshape(*batch, *out_shape)

    def apply(self, x):
        return self._matvec(self.matrix, x, self.input_shape, self.output_shape)

    def apply_adjoint(self, y):
        return self._matvec(self.matrix.T, y, self.output_shape, self.input_shape)


def convolution_operator(psf, dims):
    return ConvolutionOperator(psf, dims)


def dense_operator(matrix, input_shape=None, output_shape=None, strict=False):
    return DenseOperator(matrix, input_shape, output_shape, strict)
