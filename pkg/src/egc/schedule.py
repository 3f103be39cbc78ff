"""Diffusion noise schedules and the closed-form Gaussian forward process."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step noise levels for ``T`` steps, indexed 1..T.

    Arrays are stored with a leading entry for t=0 (``alpha_bar[0] == 1``,
    ``beta[0] == 0``) so that ``alpha_bar[t]`` reads like the maths.
    """

    kind: str
    beta: np.ndarray = field(repr=False)

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64)
        if beta.ndim != 1 or beta.size < 2:
            raise ScheduleError("schedule needs at least 2 steps")
        if not np.all((beta > 0) & (beta < 1)):
            raise ScheduleError("every beta must lie in (0, 1)")
        beta = np.concatenate([[0.0], beta])
        alpha = 1.0 - beta
        alpha_bar = np.cumprod(alpha)
        beta_tilde = np.zeros_like(beta)
        beta_tilde[1:] = (1.0 - alpha_bar[:-1]) / (1.0 - alpha_bar[1:]) * beta[1:]
        for arr in (beta, alpha, alpha_bar, beta_tilde):
            arr.setflags(write=False)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "alpha_bar", alpha_bar)
        object.__setattr__(self, "beta_tilde", beta_tilde)

    @property
    def T(self) -> int:
        return self.beta.size - 1

    def betas(self) -> np.ndarray:
        """The T betas without the t=0 padding entry."""
        return self.beta[1:]

    def check_t(self, t, allow_zero: bool = False) -> np.ndarray:
        arr = np.asarray(t)
        lo = 0 if allow_zero else 1
        if arr.dtype.kind not in "iu" and not np.all(arr == np.round(arr)):
            raise ScheduleError(f"timestep must be an integer, got {t!r}")
        arr = arr.astype(np.int64)
        if np.any(arr < lo) or np.any(arr > self.T):
            raise ScheduleError(f"timestep {t!r} outside [{lo}, {self.T}]")
        return arr

    def sigma(self, t) -> np.ndarray:
        """Marginal noise standard deviation ``sqrt(1 - alpha_bar_t)``."""
        return np.sqrt(1.0 - self.alpha_bar[self.check_t(t, allow_zero=True)])


def linear_schedule(T: int) -> NoiseSchedule:
    if T < 2:
        raise ScheduleError(f"T must be >= 2, got {T}")
    s = 1000.0 / T
    beta = np.clip(np.linspace(1e-4 * s, 0.02 * s, T), 1e-12, 0.999)
    return NoiseSchedule("linear", beta)


def _cos_g(u):
    return np.cos((u + 0.008) / 1.008 * np.pi / 2) ** 2


def cosine_schedule(T: int) -> NoiseSchedule:
    if T < 2:
        raise ScheduleError(f"T must be >= 2, got {T}")
    steps = np.arange(T + 1) / T
    abar = _cos_g(steps) / _cos_g(0.0)
    beta = np.clip(1.0 - abar[1:] / abar[:-1], 1e-12, 0.999)
    return NoiseSchedule("cosine", beta)


def make_schedule(kind: str, T: int) -> NoiseSchedule:
    if kind == "linear":
        return linear_schedule(T)
    if kind == "cosine":
        return cosine_schedule(T)
    raise ScheduleError(f"unknown schedule kind {kind!r}")


def _per_sample(coef: np.ndarray, like: np.ndarray) -> np.ndarray:
    """Reshape per-sample coefficients so they broadcast over trailing dims."""
    coef = np.asarray(coef, dtype=np.float64)
    if coef.ndim == 0:
        return coef
    return coef.reshape(coef.shape + (1,) * (like.ndim - coef.ndim))


def _arr(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def q_sample(sched: NoiseSchedule, x0, t, eps) -> np.ndarray:
    """Draw from q(x_t | x_0) given the noise: ``sqrt(abar)*x0 + sqrt(1-abar)*eps``.

    ``t`` may be a scalar or one timestep per leading-axis sample; t=0 returns x0.
    """
    x0, eps = _arr(x0), _arr(eps)
    if x0.shape != eps.shape:
        raise ScheduleError(f"noise shape {eps.shape} does not match data {x0.shape}")
    ab = sched.alpha_bar[sched.check_t(t, allow_zero=True)]
    return _per_sample(np.sqrt(ab), x0) * x0 + _per_sample(np.sqrt(1.0 - ab), x0) * eps


def q_step(sched: NoiseSchedule, x_prev, t: int, eps) -> np.ndarray:
    """One Markov noising step q(x_t | x_{t-1})."""
    t = int(sched.check_t(t))
    return np.sqrt(sched.alpha[t]) * _arr(x_prev) + np.sqrt(sched.beta[t]) * _arr(eps)


def score_target(sched: NoiseSchedule, eps, t) -> np.ndarray:
    """Score of q(x_t | x_0) expressed through the noise that produced x_t."""
    eps = _arr(eps)
    ab = sched.alpha_bar[sched.check_t(t)]
    return -eps / _per_sample(np.sqrt(1.0 - ab), eps)


def posterior_params(sched: NoiseSchedule, x0, xt, t: int) -> tuple[np.ndarray, float]:
    """Mean and variance of q(x_{t-1} | x_t, x_0)."""
    t = int(sched.check_t(t))
    c0, ct = posterior_coefficients(sched, t)
    mean = c0 * _arr(x0) + ct * _arr(xt)
    return mean, float(sched.beta_tilde[t])


def posterior_coefficients(sched: NoiseSchedule, t: int) -> tuple[float, float]:
    t = int(sched.check_t(t))
    ab, ab_prev = sched.alpha_bar[t], sched.alpha_bar[t - 1]
    c0 = np.sqrt(ab_prev) * sched.beta[t] / (1.0 - ab)
    ct = np.sqrt(sched.alpha[t]) * (1.0 - ab_prev) / (1.0 - ab)
    return float(c0), float(ct)


def tweedie_x0(sched: NoiseSchedule, xt, score, t) -> np.ndarray:
    """Posterior-mean estimate of x_0 from x_t and the score at x_t."""
    xt, score = _arr(xt), _arr(score)
    if xt.shape != score.shape:
        raise ScheduleError(f"score shape {score.shape} does not match x_t {xt.shape}")
    ab = sched.alpha_bar[sched.check_t(t, allow_zero=True)]
    return (xt + _per_sample(1.0 - ab, xt) * score) / _per_sample(np.sqrt(ab), xt)
