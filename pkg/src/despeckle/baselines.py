"""Classical despeckling filters: SRAD, non-local means and the Lee filter.

All three are deterministic and use mirror (edge-repeating) boundaries.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import uniform_filter

from .errors import ImageTooSmall, NonPositivePixels, UnstableStep
from .imagecore import as_image


# ---------------------------------------------------------------------------
# SRAD
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SradConfig:
    iterations: int = 100
    dt: float = 0.05
    rho: float = 1.0
    q0: float = 1.0

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not 0 < self.dt <= 0.25:
            raise UnstableStep(f"dt must lie in (0, 0.25] for a stable explicit step, got {self.dt}")
        if self.q0 <= 0:
            raise ValueError("q0 must be > 0")
        if self.rho < 0:
            raise ValueError("rho must be >= 0")


def _neighbours(a):
    p = np.pad(a, 1, mode="symmetric")
    return p[:-2, 1:-1], p[2:, 1:-1], p[1:-1, :-2], p[1:-1, 2:]  # north, south, west, east


def srad_coefficient(image, q_t: float) -> np.ndarray:
    """Diffusion coefficient ``c(q)`` from the instantaneous coefficient of variation."""
    north, south, west, east = _neighbours(image)
    dn, ds, dw, de = north - image, south - image, west - image, east - image
    grad2 = (dn ** 2 + ds ** 2 + dw ** 2 + de ** 2) / image ** 2
    lap = (dn + ds + dw + de) / image
    q2 = (0.5 * grad2 - lap ** 2 / 16.0) / (1.0 + 0.25 * lap) ** 2
    qt2 = q_t ** 2
    c = 1.0 / (1.0 + (q2 - qt2) / (qt2 * (1.0 + qt2)))
    return np.clip(c, 0.0, 1.0)


def srad(image, config: SradConfig = SradConfig(), callback=None) -> np.ndarray:
    """Speckle reducing anisotropic diffusion.

    Explicit update ``I <- I + dt/4 * div(c(q) grad I)`` where the speckle
    scale decays as ``q_t = q0 * exp(-rho * n * dt)``. ``callback(n, I)`` is
    called after each iteration ``n = 1..iterations``.
    """
    img = as_image(image)
    if np.any(img <= 0):
        raise NonPositivePixels("SRAD needs strictly positive pixels; apply clamp_floor first")
    for n in range(config.iterations):
        q_t = config.q0 * np.exp(-config.rho * n * config.dt)
        c = srad_coefficient(img, q_t)
        north, south, west, east = _neighbours(img)
        _, c_south, _, c_east = _neighbours(c)
        div = c_south * (south - img) + c * (north - img) + c_east * (east - img) + c * (west - img)
        img = img + 0.25 * config.dt * div
        if callback is not None:
            callback(n + 1, img)
    return img


# ---------------------------------------------------------------------------
# non-local means
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NlmConfig:
    patch_radius: int = 2
    search_radius: int = 7
    h: float = 0.1
    sigma: float = 0.0  # noise std compensating the patch distance

    def __post_init__(self):
        if self.patch_radius < 1:
            raise ValueError("patch_radius must be >= 1")
        if self.search_radius < self.patch_radius:
            raise ValueError("search_radius must be >= patch_radius")
        if self.h <= 0:
            raise ValueError("h must be > 0")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")


def _box_mean(a, r):
    """Mean over every ``(2r+1)^2`` window fully inside ``a``."""
    k = 2 * r + 1
    s = np.pad(a, ((1, 0), (1, 0))).cumsum(axis=0).cumsum(axis=1)
    return (s[k:, k:] - s[:-k, k:] - s[k:, :-k] + s[:-k, :-k]) / (k * k)


def nlmeans(image, config: NlmConfig = NlmConfig()) -> np.ndarray:
    """Non-local means with weights ``exp(-max(d2 - 2 sigma^2, 0) / h^2)``.

    ``d2`` is the mean squared difference between the patch around a pixel
    and the patch around each candidate in the search window. The pixel's
    own weight is the largest weight among the other candidates.
    """
    img = as_image(image)
    pr, sr = config.patch_radius, config.search_radius
    h, w = img.shape
    if min(h, w) <= 2 * (pr + sr):
        raise ImageTooSmall(f"image {img.shape} must exceed {2 * (pr + sr)} pixels in each dimension")
    pad = pr + sr
    padded = np.pad(img, pad, mode="symmetric")
    centre = padded[sr:sr + h + 2 * pr, sr:sr + w + 2 * pr]
    acc = np.zeros_like(img)
    wsum = np.zeros_like(img)
    wmax = np.zeros_like(img)
    h2 = config.h ** 2
    bias = 2.0 * config.sigma ** 2
    for dy in range(-sr, sr + 1):
        for dx in range(-sr, sr + 1):
            if dy == 0 and dx == 0:
                continue
            shifted = padded[sr + dy:sr + dy + h + 2 * pr, sr + dx:sr + dx + w + 2 * pr]
            d2 = _box_mean((centre - shifted) ** 2, pr)
            weight = np.exp(-np.maximum(d2 - bias, 0.0) / h2)
            acc += weight * shifted[pr:pr + h, pr:pr + w]
            wsum += weight
            np.maximum(wmax, weight, out=wmax)
    acc += wmax * img
    wsum += wmax
    out = img.copy()
    ok = wsum > 0
    out[ok] = acc[ok] / wsum[ok]
    return out


# ---------------------------------------------------------------------------
# Lee
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LeeConfig:
    window_radius: int = 3
    noise_variance_estimate: float = 0.04

    def __post_init__(self):
        if self.window_radius < 1:
            raise ValueError("window_radius must be >= 1")
        if self.noise_variance_estimate < 0:
            raise ValueError("noise_variance_estimate must be >= 0")


def lee(image, config: LeeConfig = LeeConfig()) -> np.ndarray:
    """Lee filter: blend of the window mean and the centre pixel.

    ``out = mean + k (centre - mean)`` with
    ``k = var / (var + noise_var * mean^2)`` clipped to ``[0, 1]``.
    """
    img = as_image(image)
    size = 2 * config.window_radius + 1
    mean = uniform_filter(img, size=size, mode="reflect")
    var = np.maximum(uniform_filter(img * img, size=size, mode="reflect") - mean * mean, 0.0)
    denom = var + config.noise_variance_estimate * mean * mean
    k = np.divide(var, denom, out=np.zeros_like(var), where=denom > 0)
    k = np.clip(k, 0.0, 1.0)
    return mean + k * (img - mean)


def reverse_speckle_count(denoised, clean, threshold: float = 0.15) -> int:
    """Pixels where ``denoised`` exceeds the clean value by more than ``threshold``."""
    d = np.asarray(denoised, dtype=np.float64)
    c = np.asarray(clean, dtype=np.float64)
    return int(np.count_nonzero(d - c > threshold))
