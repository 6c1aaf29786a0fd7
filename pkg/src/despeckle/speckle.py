"""Multiplicative speckle, the log-domain forward process and its Gaussian posterior.

Corruption of a clean image ``I0`` at noise level ``alpha``::

    I_t = I0 * (1 + alpha * eps)            # exact multiplicative model
    log I_t = log I0 + alpha * eps          # log-domain form used in training

with ``eps`` i.i.d. standard normal per pixel. A schedule holds the ordered
noise levels ``alpha_1 < ... < alpha_T``; consecutive levels differ by the
step size ``delta``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import IndexOutOfRange, InvalidRange, NegativeAlpha, TooFewSteps
from .imagecore import DEFAULT_FLOOR, as_image

_LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Noise standard deviations ``alphas[t - 1]`` for ``t = 1..T``.

    ``kind`` is ``"linear"`` (constant step ``delta``, each step adds
    ``delta`` to the standard deviation) or ``"variance"`` (each step adds
    ``delta_t**2`` to the variance, so composed steps reproduce the marginals).
    """

    alphas: np.ndarray
    kind: str = "linear"

    def __post_init__(self):
        a = np.asarray(self.alphas, dtype=np.float64)
        a.setflags(write=False)
        object.__setattr__(self, "alphas", a)
        if a.ndim != 1 or a.size < 2:
            raise TooFewSteps("a schedule needs at least 2 steps")
        if not (a[0] > 0 and a[-1] < 1 and np.all(np.diff(a) > 0)):
            raise InvalidRange("alphas must be strictly increasing inside (0, 1)")
        if self.kind not in ("linear", "variance"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")

    @property
    def T(self) -> int:
        return int(self.alphas.size)

    @property
    def alpha_min(self) -> float:
        return float(self.alphas[0])

    @property
    def alpha_max(self) -> float:
        return float(self.alphas[-1])

    @property
    def delta(self) -> float:
        """Constant per-step increment of a linear schedule."""
        if self.kind != "linear":
            raise AttributeError("delta is only constant for linear schedules; use step_std(t)")
        return (self.alpha_max - self.alpha_min) / (self.T - 1)

    def alpha(self, t: int) -> float:
        if not 1 <= t <= self.T:
            raise IndexOutOfRange(f"t={t} outside 1..{self.T}")
        return float(self.alphas[t - 1])

    def step_std(self, t: int) -> float:
        """Standard deviation of the log-domain increment from step ``t - 1`` to ``t``."""
        if not 2 <= t <= self.T:
            raise IndexOutOfRange(f"transition t={t} outside 2..{self.T}")
        if self.kind == "linear":
            return self.delta
        return float(np.sqrt(self.alphas[t - 1] ** 2 - self.alphas[t - 2] ** 2))

    def __eq__(self, other):
        if not isinstance(other, NoiseSchedule):
            return NotImplemented
        return self.kind == other.kind and np.array_equal(self.alphas, other.alphas)

    def __hash__(self):
        return hash((self.kind, self.alphas.tobytes()))


def _check_range(alpha_min, alpha_max, T):
    if T < 2:
        raise TooFewSteps(f"T must be >= 2, got {T}")
    if not 0 < alpha_min < alpha_max < 1:
        raise InvalidRange(f"need 0 < alpha_min < alpha_max < 1, got ({alpha_min}, {alpha_max})")


def linear_schedule(alpha_min: float = 0.005, alpha_max: float = 0.5, T: int = 200) -> NoiseSchedule:
    """``alpha_t = alpha_min + (t - 1) * delta`` with ``delta = (alpha_max - alpha_min) / (T - 1)``."""
    _check_range(alpha_min, alpha_max, T)
    delta = (alpha_max - alpha_min) / (T - 1)
    alphas = alpha_min + np.arange(T) * delta
    alphas[-1] = alpha_max
    return NoiseSchedule(alphas, kind="linear")


def variance_consistent_schedule(alpha_min: float = 0.005, alpha_max: float = 0.5,
                                 T: int = 200) -> NoiseSchedule:
    """Same noise levels as :func:`linear_schedule`, but steps add variance.

    Step ``t`` has standard deviation ``sqrt(alpha_t**2 - alpha_{t-1}**2)``,
    so ``t - 1`` composed steps from level 1 land exactly on ``alpha_t**2``.
    """
    return NoiseSchedule(linear_schedule(alpha_min, alpha_max, T).alphas, kind="variance")


# ---------------------------------------------------------------------------
# corruption kernels
# ---------------------------------------------------------------------------

def standard_noise(shape, seed) -> np.ndarray:
    """The ``eps`` field every kernel draws for a given seed."""
    return np.random.default_rng(seed).standard_normal(shape)


def _prepare(image, alpha, floor):
    if alpha < 0:
        raise NegativeAlpha(f"alpha must be >= 0, got {alpha}")
    return np.maximum(as_image(image), floor)


def corrupt_multiplicative(image, alpha: float, seed=0, floor: float = DEFAULT_FLOOR) -> np.ndarray:
    """Speckle ``I0 * (1 + alpha * eps)``, clamped to ``[floor, 1]``.

    Input pixels below ``floor`` are raised to it first.
    """
    img = _prepare(image, alpha, floor)
    if alpha == 0:
        return np.minimum(img, 1.0)
    eps = standard_noise(img.shape, seed)
    return np.clip(img * (1.0 + alpha * eps), floor, 1.0)


def corrupt_log(image, alpha: float, seed=0, floor: float = DEFAULT_FLOOR) -> np.ndarray:
    """Log-domain speckle ``exp(log I0 + alpha * eps)``, clamped to ``[floor, 1]``."""
    img = _prepare(image, alpha, floor)
    if alpha == 0:
        return np.minimum(img, 1.0)
    eps = standard_noise(img.shape, seed)
    return np.clip(np.exp(np.log(img) + alpha * eps), floor, 1.0)


def log_step(image, step_std: float, seed=0, floor: float = DEFAULT_FLOOR) -> np.ndarray:
    """One forward transition ``log I_t = log I_{t-1} + step_std * eps``."""
    return corrupt_log(image, step_std, seed=seed, floor=floor)


def single_step(image_prev, schedule: NoiseSchedule, seed=0, t: int = 2,
                floor: float = DEFAULT_FLOOR) -> np.ndarray:
    """Advance ``image_prev`` (at level ``t - 1``) by one step of ``schedule``."""
    return log_step(image_prev, schedule.step_std(t), seed=seed, floor=floor)


# ---------------------------------------------------------------------------
# posterior q(log I_{t-1} | log I_t, log I0)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PosteriorParams:
    mu_q: np.ndarray | float
    sigma_q2: float


def _posterior_terms(schedule: NoiseSchedule, t: int):
    if not 2 <= t <= schedule.T:
        raise IndexOutOfRange(f"posterior needs 2 <= t <= {schedule.T}, got t={t}")
    a2 = schedule.alphas[t - 2] ** 2
    d2 = schedule.step_std(t) ** 2
    return a2, d2


def posterior_params(schedule: NoiseSchedule, t: int, log_It, log_I0) -> PosteriorParams:
    """Mean and variance of the Gaussian posterior over ``log I_{t-1}``.

    ``mu_q = (a**2 log I_t + d**2 log I0) / (a**2 + d**2)`` and
    ``sigma_q2 = a**2 d**2 / (a**2 + d**2)``, with ``a = alpha_{t-1}`` and
    ``d`` the step size into ``t``. Works elementwise on arrays.
    """
    a2, d2 = _posterior_terms(schedule, t)
    mu = (a2 * np.asarray(log_It, dtype=np.float64) + d2 * np.asarray(log_I0, dtype=np.float64)) / (a2 + d2)
    if mu.ndim == 0:
        mu = float(mu)
    return PosteriorParams(mu_q=mu, sigma_q2=float(a2 * d2 / (a2 + d2)))


def gaussian_logpdf(x, mean, var):
    x = np.asarray(x, dtype=np.float64)
    return -0.5 * (_LOG_2PI + np.log(var) + (x - mean) ** 2 / var)


def posterior_log_density_unnormalized(schedule: NoiseSchedule, t: int, x, log_It, log_I0):
    """``log N(log I_t; x, d**2) + log N(x; log I0, a**2)`` at candidate ``x = log I_{t-1}``.

    This is the Bayes numerator; it differs from the log posterior density by
    a term that depends on ``(log I_t, log I0)`` only.
    """
    a2, d2 = _posterior_terms(schedule, t)
    return gaussian_logpdf(log_It, x, d2) + gaussian_logpdf(x, log_I0, a2)
