"""Accuracy, adversarial attacks, sample-quality distance and energy-landscape probes."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as tn
from .model import EGCModel, guidance_gradient, logits
from .schedule import NoiseSchedule
from .tensor import Tensor

DEFAULT_EPSILONS = tuple(np.round(np.arange(0.0, 0.2001, 0.02), 10))


@dataclass
class AttackConfig:
    kind: str = "pgd"
    epsilon: float = 0.1
    step_size: float = 0.01
    steps: int = 20
    clip_min: float = -1.0
    clip_max: float = 1.0

    def __post_init__(self):
        if self.kind not in ("fgsm", "pgd"):
            raise ValueError(f"unknown attack {self.kind!r}")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.steps < 1:
            raise ValueError("PGD needs at least one step")
        if self.kind == "pgd" and self.step_size <= 0:
            raise ValueError("PGD step size must be > 0")


def _batched(n: int, size: int):
    for lo in range(0, n, size):
        yield slice(lo, min(n, lo + size))


def predict(model: EGCModel, x: np.ndarray, t: int = 0, batch: int = 4096) -> np.ndarray:
    out = np.empty(len(x), dtype=np.int64)
    with tn.no_grad():
        for sl in _batched(len(x), batch):
            out[sl] = np.argmax(logits(model, Tensor(x[sl]), t).data, axis=1)
    return out


def accuracy(model: EGCModel, x: np.ndarray, y: np.ndarray, t: int = 0) -> float:
    if len(x) == 0:
        raise ValueError("accuracy of an empty dataset")
    return float(np.mean(predict(model, x, t) == np.asarray(y)))


# ---------------------------------------------------------------------------
# attacks (cross-entropy at t=0, L-infinity ball)
# ---------------------------------------------------------------------------


def _ce_grad(model: EGCModel, x: np.ndarray, y) -> np.ndarray:
    # d CE / dx = -d log p(y|x) / dx
    return -guidance_gradient(model, x, 0, y).data


def _project(x_adv, x, epsilon, cfg: AttackConfig):
    x_adv = np.clip(x_adv, cfg.clip_min, cfg.clip_max)
    return np.clip(x_adv, x - epsilon, x + epsilon)


def fgsm(model: EGCModel, x: np.ndarray, y, epsilon: float, clip=(-1.0, 1.0)) -> np.ndarray:
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    x = np.asarray(x, dtype=np.float64)
    cfg = AttackConfig("fgsm", epsilon, clip_min=clip[0], clip_max=clip[1])
    if epsilon == 0:
        return x.copy()
    return _project(x + epsilon * np.sign(_ce_grad(model, x, y)), x, epsilon, cfg)


def pgd(model: EGCModel, x: np.ndarray, y, config: AttackConfig, trace: list | None = None) -> np.ndarray:
    """Iterated gradient-sign ascent on the loss, projected after every step."""
    x = np.asarray(x, dtype=np.float64)
    eps = config.epsilon
    x_adv = x.copy()
    if eps == 0:
        return x_adv
    for _ in range(config.steps):
        x_adv = _project(x_adv + config.step_size * np.sign(_ce_grad(model, x_adv, y)), x, eps, config)
        if trace is not None:
            trace.append(x_adv)
    return x_adv


def attack(model: EGCModel, x, y, config: AttackConfig) -> np.ndarray:
    if config.kind == "fgsm":
        return fgsm(model, x, y, config.epsilon, (config.clip_min, config.clip_max))
    return pgd(model, x, y, config)


def robustness_sweep(
    models: dict[str, EGCModel],
    x: np.ndarray,
    y: np.ndarray,
    epsilons=DEFAULT_EPSILONS,
    attacks=("fgsm", "pgd"),
    pgd_steps: int = 20,
    pgd_step_size: float | None = None,
    clip=(-1.0, 1.0),
) -> list[dict]:
    """Accuracy under attack for every (model, attack, epsilon)."""
    rows = []
    for name, model in models.items():
        for kind in attacks:
            for eps in epsilons:
                step = pgd_step_size if pgd_step_size is not None else max(float(eps) / 4.0, 1e-12)
                cfg = AttackConfig(kind, float(eps), step, pgd_steps, clip[0], clip[1])
                x_adv = attack(model, x, y, cfg)
                rows.append({"model": name, "attack": kind, "epsilon": float(eps), "accuracy": accuracy(model, x_adv, y)})
    return rows


# ---------------------------------------------------------------------------
# sample quality
# ---------------------------------------------------------------------------


def wasserstein_1d(a: np.ndarray, b: np.ndarray) -> float:
    """Exact W1 between two 1-D empirical distributions (any sizes)."""
    a = np.sort(np.asarray(a, dtype=np.float64))
    b = np.sort(np.asarray(b, dtype=np.float64))
    if len(a) == 0 or len(b) == 0:
        raise ValueError("empty point set")
    if len(a) == len(b):
        return float(np.mean(np.abs(a - b)))
    # integrate |Fa^-1(u) - Fb^-1(u)| over the merged quantile breakpoints
    u = np.union1d(np.arange(1, len(a)) / len(a), np.arange(1, len(b)) / len(b))
    edges = np.concatenate([[0.0], u, [1.0]])
    mid = 0.5 * (edges[:-1] + edges[1:])
    qa = a[np.minimum((mid * len(a)).astype(int), len(a) - 1)]
    qb = b[np.minimum((mid * len(b)).astype(int), len(b) - 1)]
    return float(np.sum(np.diff(edges) * np.abs(qa - qb)))


def random_directions(dim: int, n: int, rng: np.random.Generator) -> np.ndarray:
    d = rng.standard_normal((n, dim))
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def sliced_wasserstein(a: np.ndarray, b: np.ndarray, projections=128, rng: np.random.Generator | None = None) -> float:
    """Mean 1-D W1 over unit projection directions.

    ``projections`` is a count (random directions from ``rng``) or an explicit
    (k, dim) array of directions.
    """
    a = np.asarray(a, dtype=np.float64).reshape(len(a), -1)
    b = np.asarray(b, dtype=np.float64).reshape(len(b), -1)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("empty point set")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch {a.shape[1]} vs {b.shape[1]}")
    if np.isscalar(projections):
        rng = rng if rng is not None else np.random.default_rng(0)
        dirs = random_directions(a.shape[1], int(projections), rng)
    else:
        dirs = np.asarray(projections, dtype=np.float64).reshape(-1, a.shape[1])
        dirs = dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
    pa, pb = a @ dirs.T, b @ dirs.T
    return float(np.mean([wasserstein_1d(pa[:, k], pb[:, k]) for k in range(len(dirs))]))


# ---------------------------------------------------------------------------
# energy landscape
# ---------------------------------------------------------------------------


def _lse(model: EGCModel, x: np.ndarray, t: int, batch: int = 8192) -> np.ndarray:
    out = np.empty(len(x))
    with tn.no_grad():
        for sl in _batched(len(x), batch):
            out[sl] = tn.logsumexp(logits(model, Tensor(x[sl]), t), axis=1).data
    return out


def energy_noise_profile(
    model: EGCModel,
    schedule: NoiseSchedule,
    x0: np.ndarray,
    t: int,
    noise_scales,
    rng: np.random.Generator,
) -> list[tuple[float, float]]:
    """Mean ``logsumexp f(x_t, t)`` against the per-coordinate mean absolute noise ``k``.

    Each sample gets one noise direction, rescaled so that mean(|eps|) == k.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    eps = rng.standard_normal(x0.shape)
    flat = eps.reshape(len(eps), -1)
    unit = (flat / np.mean(np.abs(flat), axis=1, keepdims=True)).reshape(x0.shape)
    base = np.sqrt(schedule.alpha_bar[t]) * x0
    rows = []
    for k in noise_scales:
        if k < 0:
            raise ValueError("noise scales must be >= 0")
        rows.append((float(k), float(np.mean(_lse(model, base + k * unit, t)))))
    return rows


def folded_normal_mean(schedule: NoiseSchedule, t: int) -> float:
    """E|N(0, sigma_t^2)| = sigma_t * sqrt(2/pi)."""
    return float(schedule.sigma(t)) * np.sqrt(2.0 / np.pi)


def gram_schmidt(u: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Make ``v`` orthogonal to ``u`` and give it ``u``'s norm."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu = np.linalg.norm(u)
    if nu == 0:
        raise ValueError("zero-norm direction")
    w = v - (np.sum(u * v) / nu**2) * u
    nw = np.linalg.norm(w)
    if nw <= 1e-12 * np.linalg.norm(v):
        raise ValueError("directions are parallel")
    return u, w * (nu / nw)


def density_grid_2d(
    model: EGCModel,
    schedule: NoiseSchedule,
    x0: np.ndarray,
    t: int,
    eps_u: np.ndarray,
    eps_v: np.ndarray,
    grid_a,
    grid_b,
) -> np.ndarray:
    """``logsumexp f`` at ``sqrt(abar_t) x0 + a*eps_u + b*eps_v`` for every (a, b)."""
    u, v = gram_schmidt(eps_u, eps_v)
    ga, gb = np.asarray(grid_a, dtype=np.float64), np.asarray(grid_b, dtype=np.float64)
    base = np.sqrt(schedule.alpha_bar[t]) * np.asarray(x0, dtype=np.float64)
    A, Bm = np.meshgrid(ga, gb, indexing="ij")
    pts = base[None] + A.reshape(-1, *([1] * base.ndim)) * u[None] + Bm.reshape(-1, *([1] * base.ndim)) * v[None]
    return _lse(model, pts, t).reshape(len(ga), len(gb))


def _trapezoid_log_weights(n: int, h: float) -> np.ndarray:
    w = np.full(n, h)
    w[0] = w[-1] = h / 2
    return np.log(w)


def grid_points(bounds, resolution: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    (x0, x1), (y0, y1) = bounds
    gx = np.linspace(x0, x1, resolution)
    gy = np.linspace(y0, y1, resolution)
    X, Y = np.meshgrid(gx, gy, indexing="ij")
    return gx, gy, np.stack([X.ravel(), Y.ravel()], axis=1)


def grid_log_integral(logf: np.ndarray, gx: np.ndarray, gy: np.ndarray) -> float:
    """log of the 2-D trapezoid integral of exp(logf), logf shaped (len(gx), len(gy))."""
    lw = _trapezoid_log_weights(len(gx), gx[1] - gx[0])[:, None] + _trapezoid_log_weights(len(gy), gy[1] - gy[0])[None, :]
    z = logf + lw
    m = np.max(z)
    return float(m + np.log(np.sum(np.exp(z - m))))


def grid_partition_estimate(
    log_density: EGCModel | Callable[[np.ndarray], np.ndarray],
    t: int,
    bounds=((-2.0, 2.0), (-2.0, 2.0)),
    resolution: int = 128,
    temperature: float = 1.0,
) -> float:
    """log Z by trapezoid quadrature of exp(log_density) over a 2-D box.

    ``log_density`` is a 2-D model (its ``logsumexp f`` is used, multiplied by
    ``temperature``) or a callable mapping (n, 2) points to log-densities.
    """
    if resolution < 8:
        raise ValueError("resolution must be >= 8")
    gx, gy, pts = grid_points(bounds, resolution)
    if isinstance(log_density, EGCModel):
        if log_density.config.input_shape != (2,):
            raise ValueError("partition estimate needs a 2-D model")
        vals = _lse(log_density, pts, t) * temperature
    else:
        vals = np.asarray(log_density(pts), dtype=np.float64)
    return grid_log_integral(vals.reshape(resolution, resolution), gx, gy)


def analytic_noisy_logdensity(x0_samples: np.ndarray, schedule: NoiseSchedule, t: int) -> Callable[[np.ndarray], np.ndarray]:
    """log of the data distribution convolved with the forward-process Gaussian at t."""
    ab = schedule.alpha_bar[t]
    var = 1.0 - ab
    centres = np.sqrt(ab) * np.asarray(x0_samples, dtype=np.float64)
    d = centres.shape[1]

    def fn(pts: np.ndarray) -> np.ndarray:
        out = np.empty(len(pts))
        for sl in _batched(len(pts), 256):
            sq = np.sum((pts[sl, None, :] - centres[None]) ** 2, axis=2)
            z = -sq / (2 * var)
            m = np.max(z, axis=1, keepdims=True)
            out[sl] = (m[:, 0] + np.log(np.mean(np.exp(z - m), axis=1))) - 0.5 * d * np.log(2 * np.pi * var)
        return out

    return fn


def grid_kl(
    model: EGCModel,
    schedule: NoiseSchedule,
    x0_samples: np.ndarray,
    t: int,
    bounds=((-2.0, 2.0), (-2.0, 2.0)),
    resolution: int = 64,
) -> float:
    """KL(true || learned) between grid-normalised densities of x_t."""
    from .sample import score_scale

    gx, gy, pts = grid_points(bounds, resolution)
    shape = (resolution, resolution)
    learned = (_lse(model, pts, t) * score_scale(model, schedule, t)).reshape(shape)
    true = analytic_noisy_logdensity(x0_samples, schedule, t)(pts).reshape(shape)
    lp = learned - grid_log_integral(learned, gx, gy)
    lq = true - grid_log_integral(true, gx, gy)
    w = np.exp(_trapezoid_log_weights(resolution, gx[1] - gx[0])[:, None] + _trapezoid_log_weights(resolution, gy[1] - gy[0])[None, :])
    return float(np.sum(w * np.exp(lq) * (lq - lp)))
