"""Ancestral, guided, and Langevin samplers plus interpolation and inpainting."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as tn
from .model import EGCModel, guidance_gradient, logits, unconditional_score
from .schedule import NoiseSchedule, q_sample
from .tensor import Tensor

ScoreFn = Callable[[np.ndarray, int], np.ndarray]


class SamplingError(RuntimeError):
    pass


@dataclass
class SampleConfig:
    sampler: str = "ancestral"
    num_samples: int = 1000
    label: int | None = None
    guidance_scale: float = 0.0
    langevin_step: float = 1e-3
    langevin_steps: int = 1000
    seed: int = 0
    mask: np.ndarray | None = field(default=None, repr=False)
    known: np.ndarray | None = field(default=None, repr=False)
    lambdas: tuple[float, ...] = (0.0, 0.25, 0.5, 0.75, 1.0)

    def __post_init__(self):
        if self.sampler not in ("ancestral", "langevin"):
            raise ValueError(f"unknown sampler {self.sampler!r}")
        if self.guidance_scale < 0:
            raise ValueError("guidance scale must be >= 0")
        if self.sampler == "langevin" and self.langevin_step <= 0:
            raise ValueError("langevin step size must be > 0")
        if self.mask is not None and not np.all(np.isin(self.mask, (0.0, 1.0))):
            raise ValueError("mask values must be 0 or 1")


def score_scale(model: EGCModel, schedule: NoiseSchedule, t: int) -> float:
    """Factor turning the network's input gradient into a score estimate.

    A network trained to regress ``-eps`` has an input gradient of
    ``sigma_t`` times the score, so it is divided back out here.
    """
    if model.config.parameterization == "eps":
        return 1.0 / float(schedule.sigma(t))
    return 1.0


def model_score_fn(
    model: EGCModel,
    schedule: NoiseSchedule,
    label=None,
    guidance_scale: float = 0.0,
) -> ScoreFn:
    """Score used for generation: unconditional, or classifier-guided when ``label`` is set."""
    s = float(guidance_scale)

    def fn(x: np.ndarray, t: int) -> np.ndarray:
        k = score_scale(model, schedule, t)
        base = unconditional_score(model, x, t).data * k
        if label is None or s == 0.0:
            return base
        return base + s * guidance_gradient(model, x, t, label).data

    return fn


def ancestral_step(
    schedule: NoiseSchedule,
    xt: np.ndarray,
    t: int,
    score_fn: ScoreFn,
    rng: np.random.Generator,
) -> np.ndarray:
    """One reverse step: posterior-mean update from the score plus fresh noise (none at t=1)."""
    t = int(schedule.check_t(t))
    a, b = schedule.alpha[t], schedule.beta[t]
    mean = (xt + (1.0 - a) * score_fn(xt, t)) / np.sqrt(a)
    if t > 1:
        return mean + np.sqrt(b) * rng.standard_normal(xt.shape)
    return mean


def run_chain(
    schedule: NoiseSchedule,
    xT: np.ndarray,
    score_fn: ScoreFn,
    rng: np.random.Generator,
    t_stop: int = 0,
) -> np.ndarray:
    x = np.asarray(xT, dtype=np.float64)
    for t in range(schedule.T, t_stop, -1):
        try:
            x = ancestral_step(schedule, x, t, score_fn, rng)
        except tn.NonFiniteError as exc:
            raise SamplingError(f"non-finite state at t={t}: {exc}") from exc
        if not np.all(np.isfinite(x)):
            raise SamplingError(f"non-finite state at t={t}")
    return x


def generate(
    model: EGCModel,
    schedule: NoiseSchedule,
    config: SampleConfig,
    xT: np.ndarray | None = None,
) -> np.ndarray:
    """Draw ``x_T ~ N(0, I)`` (unless given) and denoise to ``x_0``."""
    rng = np.random.default_rng(config.seed)
    shape = (config.num_samples,) + model.config.input_shape
    if xT is None:
        xT = rng.standard_normal(shape)
    fn = model_score_fn(model, schedule, config.label, config.guidance_scale)
    return run_chain(schedule, xT, fn, rng)


def langevin_sample(
    score_fn: Callable[[np.ndarray], np.ndarray],
    x_init: np.ndarray,
    c: float,
    steps: int,
    rng: np.random.Generator,
    bound: float = 1e6,
    noise: bool = True,
    trace: list | None = None,
) -> np.ndarray:
    """Unadjusted Langevin: ``x <- x + c*score(x) + sqrt(2c)*eps``."""
    if c <= 0:
        raise ValueError("Langevin step size must be > 0")
    x = np.array(x_init, dtype=np.float64)
    amp = np.sqrt(2.0 * c)
    for i in range(steps):
        x = x + c * score_fn(x)
        if noise:
            x = x + amp * rng.standard_normal(x.shape)
        if not np.all(np.isfinite(x)) or np.max(np.abs(x)) > bound:
            raise SamplingError(f"Langevin chain diverged at step {i + 1}")
        if trace is not None:
            trace.append(x)
    return x


def fixed_t_score(model: EGCModel, schedule: NoiseSchedule, t: int) -> Callable[[np.ndarray], np.ndarray]:
    k = score_scale(model, schedule, t)
    return lambda x: unconditional_score(model, x, t).data * k


def slerp(a: np.ndarray, b: np.ndarray, lam: float) -> np.ndarray:
    """Spherical interpolation per sample (leading axis); linear when an endpoint has zero norm."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError("interpolation weight must lie in [0, 1]")
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"endpoint shapes differ: {a.shape} vs {b.shape}")
    if lam == 0.0:
        return a.copy()
    if lam == 1.0:
        return b.copy()
    fa = a.reshape(len(a), -1)
    fb = b.reshape(len(b), -1)
    na = np.linalg.norm(fa, axis=1)
    nb = np.linalg.norm(fb, axis=1)
    out = (1.0 - lam) * fa + lam * fb
    ok = (na > 0) & (nb > 0)
    if np.any(ok):
        cos = np.clip(np.sum(fa[ok] * fb[ok], axis=1) / (na[ok] * nb[ok]), -1.0, 1.0)
        omega = np.arccos(cos)
        so = np.sin(omega)
        good = so > 1e-12
        wa = np.where(good, np.sin((1.0 - lam) * omega) / np.where(good, so, 1.0), 1.0 - lam)
        wb = np.where(good, np.sin(lam * omega) / np.where(good, so, 1.0), lam)
        out[ok] = wa[:, None] * fa[ok] + wb[:, None] * fb[ok]
    return out.reshape(a.shape)


def interpolate(
    model: EGCModel,
    schedule: NoiseSchedule,
    xT_a: np.ndarray,
    xT_b: np.ndarray,
    lambdas,
    config: SampleConfig,
) -> list[np.ndarray]:
    """Generate from slerped starting noise; every weight reuses the same sampling seed."""
    outs = []
    for lam in lambdas:
        cfg = SampleConfig(num_samples=len(xT_a), label=config.label, guidance_scale=config.guidance_scale, seed=config.seed)
        outs.append(generate(model, schedule, cfg, xT=slerp(xT_a, xT_b, float(lam))))
    return outs


def inpaint(
    model: EGCModel,
    schedule: NoiseSchedule,
    known: np.ndarray,
    mask: np.ndarray,
    config: SampleConfig,
) -> np.ndarray:
    """Fill entries where ``mask == 0``; entries where ``mask == 1`` are held to ``known``.

    Known entries are re-noised to the current level each step with a
    separate random stream, so an all-zero mask reproduces :func:`generate`.
    """
    known = np.asarray(known, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != known.shape:
        raise ValueError(f"mask shape {mask.shape} does not match data {known.shape}")
    if not np.all(np.isin(mask, (0.0, 1.0))):
        raise ValueError("mask values must be 0 or 1")
    keep = mask == 1.0
    rng = np.random.default_rng(config.seed)
    rng_known = np.random.default_rng([config.seed, 1])
    fn = model_score_fn(model, schedule, config.label, config.guidance_scale)
    x = rng.standard_normal(known.shape)
    x = np.where(keep, q_sample(schedule, known, schedule.T, rng_known.standard_normal(known.shape)), x)
    for t in range(schedule.T, 0, -1):
        x = ancestral_step(schedule, x, t, fn, rng)
        if not np.all(np.isfinite(x)):
            raise SamplingError(f"non-finite state at t={t}")
        if t - 1 > 0:
            renoised = q_sample(schedule, known, t - 1, rng_known.standard_normal(known.shape))
        else:
            renoised = known
        x = np.where(keep, renoised, x)
    return x


def classifier_confidence(model: EGCModel, x: np.ndarray, label) -> np.ndarray:
    """p(label | x) at t=0 for each sample."""
    with tn.no_grad():
        f = logits(model, Tensor(x), 0)
        p = tn.softmax(f, axis=1).data
    label = np.broadcast_to(np.asarray(label), (len(x),))
    return p[np.arange(len(x)), label]
