"""Centered orthonormal 2-D Fourier operators and the masked encoding operator.

The encoding operator maps an image to per-coil masked k-space:
per coil c, ``mask * fft2c(S_c * x)``. Its adjoint combines coil k-space
back into an image with conjugate sensitivities. With orthonormal FFT
scaling the adjoint equals the inverse on a full mask, which keeps the
operator tests exact.
"""

from dataclasses import dataclass

import numpy as np

from .masks import SamplingMask, apply_mask


def fft2c(img):
    """Centered, orthonormally scaled 2-D DFT (DC at the array center)."""
    img = np.asarray(img)
    if img.ndim != 2:
        raise ValueError(f"fft2c expects a 2-D array, got shape {img.shape}")
    return np.fft.fftshift(np.fft.fft2(np.fft.ifftshift(img), norm="ortho"))


def ifft2c(ks):
    """Exact inverse of :func:`fft2c` under the same scaling."""
    ks = np.asarray(ks)
    if ks.ndim != 2:
        raise ValueError(f"ifft2c expects a 2-D array, got shape {ks.shape}")
    return np.fft.fftshift(np.fft.ifft2(np.fft.ifftshift(ks), norm="ortho"))


@dataclass(frozen=True)
class EncodingOperator:
    """Coil sensitivities plus a column mask, tied to one image geometry."""

    sens: np.ndarray             # complex, (coils, rows, cols)
    mask: SamplingMask
    rows: int
    cols: int

    def __post_init__(self):
        sens = np.asarray(self.sens, dtype=np.complex128)
        object.__setattr__(self, "sens", sens)
        if sens.ndim != 3 or sens.shape[1:] != (self.rows, self.cols):
            raise ValueError(
                f"sens shape {sens.shape} does not match {self.rows}x{self.cols}"
            )
        if self.mask.width != self.cols:
            raise ValueError(
                f"mask width {self.mask.width} does not match cols {self.cols}"
            )

    @property
    def n_coils(self):
        return self.sens.shape[0]


def encode(x, op):
    """Forward encoding: per-coil masked k-space of an image."""
    x = np.asarray(x)
    if x.shape != (op.rows, op.cols):
        raise ValueError(f"image shape {x.shape} does not match operator")
    out = np.empty((op.n_coils, op.rows, op.cols), dtype=np.complex128)
    for c in range(op.n_coils):
        out[c] = fft2c(op.sens[c] * x)
    return apply_mask(out, op.mask)


def encode_adjoint(y, op):
    """Adjoint encoding: sum_c conj(S_c) * ifft2c(mask * y_c).

    Coil sum runs in fixed order so parallel callers see identical
    reductions.
    """
    y = np.asarray(y)
    if y.shape != (op.n_coils, op.rows, op.cols):
        raise ValueError(f"k-space shape {y.shape} does not match operator")
    ym = apply_mask(y, op.mask)
    out = np.zeros((op.rows, op.cols), dtype=np.complex128)
    for c in range(op.n_coils):
        out += np.conj(op.sens[c]) * ifft2c(ym[c])
    return out


def zero_filled(y, op):
    """Zero-filled SENSE combine of masked k-space (the no-learning baseline)."""
    return encode_adjoint(y, op)


def add_measurement_noise(y, std, seed=0):
    """Add complex Gaussian noise with per-component standard deviation `std`."""
    if std < 0:
        raise ValueError("noise std must be >= 0")
    if std == 0:
        return np.asarray(y, dtype=np.complex128)
    rng = np.random.default_rng(seed)
    y = np.asarray(y, dtype=np.complex128)
    noise = rng.normal(scale=std, size=y.shape) + 1j * rng.normal(scale=std, size=y.shape)
    return y + noise
