"""PSNR and windowed SSIM for single-channel images."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ImageTooSmall, ShapeMismatch


def _pair(reference, test):
    a = np.asarray(reference, dtype=np.float64)
    b = np.asarray(test, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def mse(reference, test) -> float:
    a, b = _pair(reference, test)
    return float(np.mean((a - b) ** 2))


def psnr(reference, test, i_max: float = 1.0) -> float:
    """``10 log10(i_max**2 / MSE)`` in dB; ``inf`` for identical images."""
    if i_max <= 0:
        raise ValueError("i_max must be > 0")
    err = mse(reference, test)
    if err == 0:
        return math.inf
    return 10.0 * math.log10(i_max ** 2 / err)


@dataclass(frozen=True)
class SsimConfig:
    """SSIM window and stabilising constants.

    ``window`` is ``"gaussian"`` (``size`` 11, ``sigma`` 1.5 by default) or
    ``"uniform"`` (use ``size=8`` for the common 8x8 box).
    """

    window: str = "gaussian"
    size: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    dynamic_range: float = 1.0

    def __post_init__(self):
        if self.window not in ("gaussian", "uniform"):
            raise ValueError(f"unknown window {self.window!r}")
        if self.size < 1:
            raise ValueError("window size must be >= 1")
        if self.k1 <= 0 or self.k2 <= 0 or self.dynamic_range <= 0:
            raise ValueError("k1, k2 and dynamic_range must be > 0")

    @property
    def c1(self) -> float:
        return (self.k1 * self.dynamic_range) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.dynamic_range) ** 2

    def kernel(self) -> np.ndarray:
        if self.window == "uniform":
            w = np.ones((self.size, self.size))
        else:
            r = np.arange(self.size) - (self.size - 1) / 2.0
            g = np.exp(-(r ** 2) / (2 * self.sigma ** 2))
            w = np.outer(g, g)
        return w / w.sum()


UNIFORM_8 = SsimConfig(window="uniform", size=8)


def _local_mean(img, w):
    win = sliding_window_view(img, w.shape)
    return np.tensordot(win, w, axes=((2, 3), (0, 1)))


def ssim_map(reference, test, config: SsimConfig = SsimConfig()) -> np.ndarray:
    """Per-window SSIM over every window position fully inside the image."""
    a, b = _pair(reference, test)
    if a.ndim != 2 or min(a.shape) < config.size:
        raise ImageTooSmall(f"image {a.shape} smaller than the {config.size}x{config.size} window")
    w = config.kernel()
    mu_a, mu_b = _local_mean(a, w), _local_mean(b, w)
    var_a = _local_mean(a * a, w) - mu_a * mu_a
    var_b = _local_mean(b * b, w) - mu_b * mu_b
    cov = _local_mean(a * b, w) - mu_a * mu_b
    c1, c2 = config.c1, config.c2
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return num / den


def ssim(reference, test, config: SsimConfig = SsimConfig()) -> float:
    """Mean SSIM over window positions; symmetric in its arguments."""
    value = float(np.mean(ssim_map(reference, test, config)))
    # rounding in the variance terms can overshoot the bound by ~1 ulp
    return min(1.0, max(-1.0, value))
