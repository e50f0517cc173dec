"""Image quality metrics: NMSE, PSNR, and windowed SSIM.

Complex images are compared on their magnitudes. SSIM uses a Gaussian
11x11 window (sigma 1.5) over the valid interior, with the stabilizing
constants squared by default; ``squared_constants=False`` keeps them
linear for compatibility with the unsquared convention.
"""

import numpy as np

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


def _magnitudes(y, y_hat):
    y = np.asarray(y)
    y_hat = np.asarray(y_hat)
    if y.shape != y_hat.shape:
        raise ValueError(f"shape mismatch {y.shape} vs {y_hat.shape}")
    return np.abs(y).astype(float), np.abs(y_hat).astype(float)


def nmse(y, y_hat):
    """Squared error of the magnitudes normalized by the reference energy."""
    ym, yhm = _magnitudes(y, y_hat)
    denom = float(np.sum(ym**2))
    if denom == 0.0:
        raise ValueError("reference image has zero norm")
    return float(np.sum((ym - yhm) ** 2)) / denom


def psnr(y, y_hat):
    """Peak signal-to-noise ratio in dB; identical images give +inf."""
    ym, yhm = _magnitudes(y, y_hat)
    peak = float(ym.max())
    if peak <= 0.0:
        raise ValueError("reference maximum must be positive")
    mse = float(np.mean((ym - yhm) ** 2))
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(peak**2 / mse))


def _gaussian_window(size, sigma):
    half = (size - 1) / 2.0
    g = np.exp(-((np.arange(size) - half) ** 2) / (2.0 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def _window_means(img, window):
    """Weighted window means over all fully interior positions."""
    k = window.shape[0]
    win = np.lib.stride_tricks.sliding_window_view(img, (k, k))
    return np.einsum("hwij,ij->hw", win, window)


def ssim(y, y_hat, squared_constants=True):
    """Mean structural similarity over Gaussian-weighted sliding windows."""
    ym, yhm = _magnitudes(y, y_hat)
    if ym.ndim != 2:
        raise ValueError("ssim expects 2-D images")
    if min(ym.shape) < SSIM_WINDOW:
        raise ValueError(
            f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW} for ssim"
        )
    peak = float(ym.max())
    c1 = 0.01 * peak
    c2 = 0.03 * peak
    if squared_constants:
        c1, c2 = c1**2, c2**2

    w = _gaussian_window(SSIM_WINDOW, SSIM_SIGMA)
    mu_y = _window_means(ym, w)
    mu_h = _window_means(yhm, w)
    ey2 = _window_means(ym * ym, w)
    eh2 = _window_means(yhm * yhm, w)
    eyh = _window_means(ym * yhm, w)
    var_y = ey2 - mu_y**2
    var_h = eh2 - mu_h**2
    cov = eyh - mu_y * mu_h

    num = (2.0 * mu_y * mu_h + c1) * (2.0 * cov + c2)
    den = (mu_y**2 + mu_h**2 + c1) * (var_y + var_h + c2)
    return float(np.mean(num / den))
