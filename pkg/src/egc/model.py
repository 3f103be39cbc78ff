"""Energy-based classifier over noisy inputs.

One network produces class logits ``f(x_t, t)``. Its log-sum-exp is an
unnormalised log-density of ``x_t``, so the input gradient of that quantity is
a denoising score, while the softmax of the same logits classifies ``x_t``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as tn
from .tensor import GradError, ShapeError, Tensor

__all__ = [
    "ArchConfig",
    "EGCModel",
    "LabelError",
    "time_embedding",
    "logits",
    "free_energy",
    "unconditional_score",
    "class_prob",
    "log_class_prob",
    "conditional_score",
    "guidance_gradient",
    "joint_unnormalized_logdensity",
    "init_model",
]


class LabelError(ValueError):
    pass


@dataclass
class ArchConfig:
    kind: str = "mlp"  # "mlp" or "conv"
    input_shape: tuple[int, ...] = (2,)
    num_classes: int = 2
    hidden: int = 128
    depth: int = 3
    channels: tuple[int, ...] = (16, 32, 64)
    groups: int = 4
    time_dim: int = 32
    T: int = 100
    # "eps": input gradient regresses -eps; "score": regresses -eps/sigma_t
    parameterization: str = "eps"

    def __post_init__(self):
        self.input_shape = tuple(int(n) for n in self.input_shape)
        self.channels = tuple(int(n) for n in self.channels)
        if self.kind not in ("mlp", "conv"):
            raise ValueError(f"unknown architecture {self.kind!r}")
        if self.parameterization not in ("eps", "score"):
            raise ValueError(f"unknown parameterization {self.parameterization!r}")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if self.kind == "conv" and len(self.input_shape) != 3:
            raise ValueError("conv architecture needs input_shape (c, h, w)")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ArchConfig":
        d = json.loads(text)
        return cls(**d)


def time_embedding(t, dim: int, base: float = 10000.0) -> np.ndarray:
    """Sinusoidal embedding, one row per timestep."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(base) * np.arange(half) / half)
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


@dataclass
class EGCModel:
    config: ArchConfig
    params: dict[str, Tensor] = field(default_factory=dict)

    @property
    def num_classes(self) -> int:
        return self.config.num_classes

    @property
    def T(self) -> int:
        return self.config.T

    def copy(self) -> "EGCModel":
        return EGCModel(
            self.config,
            {k: Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in self.params.items()},
        )

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            raise KeyError("parameter names do not match the architecture")
        for k, v in state.items():
            if v.shape != self.params[k].shape:
                raise ShapeError(f"parameter {k}: shape {v.shape} != {self.params[k].shape}")
            self.params[k] = Tensor(np.array(v, dtype=np.float64), requires_grad=True, name=k)

    def __call__(self, xt, t) -> Tensor:
        return logits(self, xt, t)


# ---------------------------------------------------------------------------
# initialisation
# ---------------------------------------------------------------------------


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _init_head(p: dict, width: int, config: ArchConfig) -> None:
    p["head.w"] = np.zeros((width, config.num_classes))
    p["head.b"] = np.zeros(config.num_classes)


def init_model(config: ArchConfig, seed: int = 0) -> EGCModel:
    """Fan-in uniform weights, zero biases, zero final logit layer."""
    rng = np.random.default_rng(seed)
    p: dict[str, np.ndarray] = {}
    H, E = config.hidden, config.time_dim
    p["temb.w1"] = _uniform(rng, (E, H), E)
    p["temb.b1"] = np.zeros(H)
    p["temb.w2"] = _uniform(rng, (H, H), H)
    p["temb.b2"] = np.zeros(H)
    if config.kind == "mlp":
        d_in = int(np.prod(config.input_shape))
        widths = [d_in] + [H] * config.depth
        for i in range(config.depth):
            p[f"layer{i}.w"] = _uniform(rng, (widths[i], widths[i + 1]), widths[i])
            p[f"layer{i}.b"] = np.zeros(H)
            p[f"layer{i}.tw"] = _uniform(rng, (H, H), H)
        _init_head(p, H, config)
    else:
        c_in = config.input_shape[0]
        ch = config.channels
        p["stem.w"] = _uniform(rng, (ch[0], c_in, 3, 3), c_in * 9)
        p["stem.b"] = np.zeros(ch[0])
        prev = ch[0]
        for i, c in enumerate(ch):
            p[f"stage{i}.w"] = _uniform(rng, (c, prev, 3, 3), prev * 9)
            p[f"stage{i}.b"] = np.zeros(c)
            p[f"stage{i}.gn_scale"] = np.ones(c)
            p[f"stage{i}.gn_shift"] = np.zeros(c)
            p[f"stage{i}.tw"] = _uniform(rng, (H, c), H)
            prev = c
        _init_head(p, prev, config)
    params = {k: Tensor(v, requires_grad=True, name=k) for k, v in p.items()}
    return EGCModel(config, params)


# ---------------------------------------------------------------------------
# forward pass
# ---------------------------------------------------------------------------


def _as_input(model: EGCModel, xt) -> Tensor:
    x = xt if isinstance(xt, Tensor) else Tensor(xt)
    want = model.config.input_shape
    if x.ndim != len(want) + 1 or tuple(x.shape[1:]) != want:
        raise ShapeError(f"input shape {x.shape} does not match (batch, {', '.join(map(str, want))})")
    return x


def _timesteps(model: EGCModel, t, batch: int) -> np.ndarray:
    arr = np.asarray(t)
    if arr.dtype.kind not in "iu" and not np.all(arr == np.round(arr)):
        raise ValueError(f"timestep must be integral, got {t!r}")
    arr = np.broadcast_to(arr.astype(np.int64), (batch,))
    if np.any(arr < 0) or np.any(arr > model.T):
        raise ValueError(f"timestep outside [0, {model.T}]")
    return arr


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    out = x @ w
    return out + b.expand(out.shape)


def _group_norm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    b, c, h, w = x.shape
    g = x.reshape(b, groups, (c // groups) * h * w)
    mu = g.mean(axis=2, keepdims=True).expand(g.shape)
    centred = g - mu
    var = centred.square().mean(axis=2, keepdims=True)
    inv = tn.reciprocal(tn.sqrt(var + eps)).expand(g.shape)
    normed = (centred * inv).reshape(b, c, h, w)
    return normed * gamma.reshape(1, c, 1, 1).expand(x.shape) + beta.reshape(1, c, 1, 1).expand(x.shape)


def _head(model: EGCModel, h: Tensor) -> Tensor:
    return _linear(h, model.params["head.w"], model.params["head.b"])


def _temb(model: EGCModel, ts: np.ndarray) -> Tensor:
    P = model.params
    e = Tensor(time_embedding(ts, model.config.time_dim))
    e = tn.silu(_linear(e, P["temb.w1"], P["temb.b1"]))
    return tn.silu(_linear(e, P["temb.w2"], P["temb.b2"]))


def logits(model: EGCModel, xt, t) -> Tensor:
    """Class logits of shape (batch, C) for noisy inputs at timestep(s) ``t``."""
    x = _as_input(model, xt)
    batch = x.shape[0]
    ts = _timesteps(model, t, batch)
    P, cfg = model.params, model.config
    e = _temb(model, ts)
    if cfg.kind == "mlp":
        h = x.reshape(batch, -1) if x.ndim > 2 else x
        for i in range(cfg.depth):
            pre = _linear(h, P[f"layer{i}.w"], P[f"layer{i}.b"]) + e @ P[f"layer{i}.tw"]
            h = tn.silu(pre)
        return _head(model, h)

    h = tn.conv2d(x, P["stem.w"], stride=1, padding=1)
    h = h + P["stem.b"].reshape(1, -1, 1, 1).expand(h.shape)
    for i, c in enumerate(cfg.channels):
        h = tn.conv2d(h, P[f"stage{i}.w"], stride=2, padding=1)
        h = h + P[f"stage{i}.b"].reshape(1, c, 1, 1).expand(h.shape)
        h = _group_norm(h, min(cfg.groups, c), P[f"stage{i}.gn_scale"], P[f"stage{i}.gn_shift"])
        h = h + (e @ P[f"stage{i}.tw"]).reshape(batch, c, 1, 1).expand(h.shape)
        h = tn.silu(h)
    pooled = h.mean(axis=(2, 3))
    return _head(model, pooled)


def free_energy(model: EGCModel, xt, t) -> Tensor:
    """``-logsumexp`` of the logits, one value per sample."""
    return -tn.logsumexp(logits(model, xt, t), axis=1)


def _grad_input(xt) -> Tensor:
    if isinstance(xt, Tensor):
        if not xt.requires_grad:
            raise GradError("score needs an input that requires grad")
        return xt
    return Tensor(xt, requires_grad=True)


def unconditional_score(model: EGCModel, xt, t, create_graph: bool = False) -> Tensor:
    """Input gradient of ``logsumexp(f(x_t))``.

    Samples in a batch are independent, so the gradient of the summed
    log-density gives every per-sample gradient at once.
    """
    x = _grad_input(xt)
    with tn._grad_mode(True):
        lse = tn.logsumexp(logits(model, x, t), axis=1)
        (g,) = tn.grad(lse.sum(), [x], create_graph=create_graph)
    return g


def _check_label(model: EGCModel, y, batch: int) -> np.ndarray:
    arr = np.broadcast_to(np.asarray(y), (batch,))
    if arr.dtype.kind not in "iu" or np.any(arr < 0) or np.any(arr >= model.num_classes):
        raise LabelError(f"label {y!r} outside [0, {model.num_classes})")
    return arr.astype(np.int64)


def class_prob(model: EGCModel, xt, t) -> Tensor:
    return tn.softmax(logits(model, xt, t), axis=1)


def log_class_prob(model: EGCModel, xt, t) -> Tensor:
    return tn.log_softmax(logits(model, xt, t), axis=1)


def _pick(v: Tensor, y: np.ndarray) -> Tensor:
    return v[np.arange(v.shape[0]), y]


def guidance_gradient(model: EGCModel, xt, t, y, create_graph: bool = False) -> Tensor:
    """Input gradient of ``log p(y | x_t)``."""
    x = _grad_input(xt)
    y = _check_label(model, y, x.shape[0])
    with tn._grad_mode(True):
        lp = _pick(log_class_prob(model, x, t), y)
        (g,) = tn.grad(lp.sum(), [x], create_graph=create_graph)
    return g


def conditional_score(model: EGCModel, xt, t, y, guidance_scale: float = 1.0, create_graph: bool = False) -> Tensor:
    """Unconditional score plus ``guidance_scale`` times the class-guidance gradient."""
    if guidance_scale < 0:
        raise ValueError("guidance scale must be >= 0")
    x = _grad_input(xt)
    y = _check_label(model, y, x.shape[0])
    s = float(guidance_scale)
    with tn._grad_mode(True):
        f = logits(model, x, t)
        lse = tn.logsumexp(f, axis=1)
        obj = lse.sum()
        if s != 0.0:
            obj = obj + tn.scale(_pick(f - lse.reshape(-1, 1).expand(f.shape), y).sum(), s)
        (g,) = tn.grad(obj, [x], create_graph=create_graph)
    return g


def joint_unnormalized_logdensity(model: EGCModel, xt, t, y) -> Tensor:
    """The y-th logit: log p(x_t, y) up to the shared log-partition constant."""
    f = logits(model, xt, t)
    return _pick(f, _check_label(model, y, f.shape[0]))
