"""Joint score-matching and cross-entropy training."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, astuple, dataclass, field, fields, replace
from typing import Callable, Iterator

import numpy as np

from . import checkpoint as ckpt_io
from . import tensor as tn
from .checkpoint import Checkpoint
from .model import ArchConfig, EGCModel, init_model
from .schedule import NoiseSchedule, make_schedule, q_sample
from .tensor import Tensor

logger = logging.getLogger(__name__)

METRIC_HEADER = ("iter", "recon", "ce", "loss", "batch_acc")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    gamma: float = 1e-3
    learning_rate: float = 1e-4
    batch_size: int = 128
    total_iterations: int = 5000
    seed: int = 0
    mode: str = "supervised"
    ema_decay: float = 0.999
    schedule: str = "linear"
    T: int = 100
    target: str = "eps"
    log_every: int = 100
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.mode not in ("supervised", "unsupervised", "discriminative"):
            raise ValueError(f"unknown training mode {self.mode!r}")
        if self.target not in ("eps", "score"):
            raise ValueError(f"unknown regression target {self.target!r}")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError("ema_decay must lie in [0, 1)")
        if self.batch_size < 1 or self.total_iterations < 0:
            raise ValueError("batch_size must be >= 1 and total_iterations >= 0")

    @property
    def effective_gamma(self) -> float:
        return 0.0 if self.mode == "unsupervised" else self.gamma

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


def _logits_fn(model) -> Callable[[Tensor, np.ndarray], Tensor]:
    if isinstance(model, EGCModel):
        from .model import logits

        return lambda x, t: logits(model, x, t)
    return model


def egc_loss(
    model,
    x0,
    y,
    t,
    eps,
    gamma: float,
    schedule: NoiseSchedule,
    target: str = "eps",
) -> tuple[Tensor, dict[str, Tensor]]:
    """Loss for one batch: squared score error plus ``gamma`` times cross-entropy.

    ``model`` is an :class:`EGCModel` or any callable ``(x_t, t) -> logits``.
    The score error is summed over data dimensions and averaged over the batch.
    With ``target="eps"`` the input gradient is regressed onto ``-eps``;
    with ``target="score"`` onto ``-eps / sqrt(1 - alpha_bar_t)``.
    ``y=None`` drops the classification term.
    """
    f = _logits_fn(model)
    x0 = np.asarray(x0.data if isinstance(x0, Tensor) else x0, dtype=np.float64)
    eps = np.asarray(eps.data if isinstance(eps, Tensor) else eps, dtype=np.float64)
    B = x0.shape[0]
    t = np.broadcast_to(np.asarray(t, dtype=np.int64), (B,))
    xt = Tensor(q_sample(schedule, x0, t, eps), requires_grad=True)
    if target == "eps":
        tgt = -eps
    elif target == "score":
        tgt = -eps / schedule.sigma(t).reshape((B,) + (1,) * (eps.ndim - 1))
    else:
        raise ValueError(f"unknown regression target {target!r}")

    with tn._grad_mode(True):
        out = f(xt, t)
        C = out.shape[1]
        lse = tn.logsumexp(out, axis=1)
        (score,) = tn.grad(lse.sum(), [xt], create_graph=True)
        diff = score - Tensor(tgt)
        recon = diff.square().sum() / B

        if y is None:
            ce = Tensor(0.0)
        else:
            y = np.broadcast_to(np.asarray(y), (B,))
            if y.dtype.kind not in "iu" or np.any(y < 0) or np.any(y >= C):
                raise ValueError(f"labels must lie in [0, {C})")
            logp = out - lse.reshape(B, 1).expand(out.shape)
            ce = -logp[np.arange(B), y.astype(np.int64)].sum() / B
        loss = recon if gamma == 0.0 or y is None else recon + tn.scale(ce, gamma)
    return loss, {"recon": recon, "ce": ce, "logits": out}


def classifier_loss(model: EGCModel, x0, y) -> tuple[Tensor, dict[str, Tensor]]:
    """Plain cross-entropy on clean inputs at t=0 (the discriminative baseline)."""
    from .model import logits

    B = len(x0)
    with tn._grad_mode(True):
        out = logits(model, Tensor(x0), 0)
        logp = tn.log_softmax(out, axis=1)
        ce = -logp[np.arange(B), np.asarray(y, dtype=np.int64)].sum() / B
    return ce, {"recon": Tensor(0.0), "ce": ce, "logits": out}


# ---------------------------------------------------------------------------
# optimiser and EMA
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_update(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> dict[str, np.ndarray]:
    """One bias-corrected Adam step (no weight decay). Returns new arrays; ``state`` is updated in place."""
    state.step += 1
    bc1 = 1.0 - beta1**state.step
    bc2 = 1.0 - beta2**state.step
    out = {}
    for name in sorted(params):
        p, g = params[name], grads[name]
        if p.shape != g.shape:
            raise tn.ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name, np.zeros_like(p))
        v = state.v.get(name, np.zeros_like(p))
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        out[name] = p - lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return out


def ema_update(ema: dict[str, np.ndarray], params: dict[str, np.ndarray], decay: float) -> dict[str, np.ndarray]:
    return {k: decay * ema[k] + (1.0 - decay) * params[k] for k in ema}


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class MetricRow:
    iter: int
    recon: float
    ce: float
    loss: float
    batch_acc: float


class Trainer:
    """Stateful training run; ``run`` yields checkpoints as it goes."""

    def __init__(
        self,
        config: TrainConfig,
        arch: ArchConfig,
        data: np.ndarray,
        labels: np.ndarray | None = None,
        dataset_info: dict | None = None,
    ):
        self.config = config
        self.arch = replace(arch, T=config.T, parameterization=config.target)
        self.data = np.asarray(data, dtype=np.float64)
        self.labels = None if labels is None else np.asarray(labels, dtype=np.int64)
        if config.mode != "unsupervised" and self.labels is None:
            raise ValueError(f"{config.mode} training needs labels")
        if self.data.shape[0] == 0:
            raise ValueError("empty dataset")
        self.dataset_info = dataset_info or {}
        self.schedule = make_schedule(config.schedule, config.T)
        self.model = init_model(self.arch, seed=config.seed)
        self.ema = {k: v.data.copy() for k, v in self.model.params.items()}
        self.adam = AdamState()
        self.rng = np.random.Generator(np.random.PCG64(config.seed))
        self.iteration = 0
        self.metrics: list[MetricRow] = []

    # -- checkpointing ------------------------------------------------------------
    def descriptor(self) -> dict:
        return {
            "arch": json.loads(self.arch.to_json()),
            "train": asdict(self.config),
            "dataset": self.dataset_info,
        }

    def checkpoint(self) -> Checkpoint:
        tensors = {}
        for k, v in self.model.params.items():
            tensors[f"params.{k}"] = v.data
            tensors[f"ema.{k}"] = self.ema[k]
            if k in self.adam.m:
                tensors[f"adam_m.{k}"] = self.adam.m[k]
                tensors[f"adam_v.{k}"] = self.adam.v[k]
        tensors["metrics"] = np.array([astuple(r) for r in self.metrics], dtype=np.float64).reshape(-1, len(METRIC_HEADER))
        return Checkpoint(
            descriptor=self.descriptor(),
            schedule=self.schedule,
            tensors={k: np.array(v) for k, v in tensors.items()},
            rng_state=self.rng.bit_generator.state,
            iteration=self.iteration,
        )

    @classmethod
    def resume(cls, ck: Checkpoint, data, labels=None, total_iterations: int | None = None) -> "Trainer":
        d = dict(ck.descriptor["train"])
        if total_iterations is not None:
            d["total_iterations"] = total_iterations
        tr = cls(TrainConfig.from_dict(d), ArchConfig(**ck.descriptor["arch"]), data, labels, ck.descriptor.get("dataset"))
        tr.model.load_state(ck.group("params"))
        tr.ema = {k: np.array(v) for k, v in ck.group("ema").items()}
        tr.adam = AdamState(
            m={k: np.array(v) for k, v in ck.group("adam_m").items()},
            v={k: np.array(v) for k, v in ck.group("adam_v").items()},
            step=ck.iteration,
        )
        tr.rng.bit_generator.state = ck.rng_state
        if "metrics" in ck.tensors:
            tr.metrics = [MetricRow(int(r[0]), *map(float, r[1:])) for r in ck.tensors["metrics"]]
        tr.iteration = ck.iteration
        return tr

    # -- one step -----------------------------------------------------------------
    def step(self) -> MetricRow:
        cfg, rng = self.config, self.rng
        n = self.data.shape[0]
        idx = rng.integers(0, n, size=cfg.batch_size)
        t = rng.integers(1, cfg.T + 1, size=cfg.batch_size)
        x0 = self.data[idx]
        eps = rng.standard_normal(x0.shape)
        y = self.labels[idx] if self.labels is not None else None
        gamma = cfg.effective_gamma
        y_loss = y if cfg.mode == "supervised" else None
        try:
            if cfg.mode == "discriminative":
                loss, parts = classifier_loss(self.model, x0, y)
            else:
                loss, parts = egc_loss(self.model, x0, y_loss, t, eps, gamma, self.schedule, cfg.target)
            names = sorted(self.model.params)
            grads = tn.grad(loss, [self.model.params[k] for k in names])
        except tn.NonFiniteError as exc:
            raise TrainingError(f"non-finite value at iteration {self.iteration + 1}: {exc}") from exc
        recon, ce = parts["recon"].item(), parts["ce"].item()
        pred = np.argmax(parts["logits"].data, axis=1)
        acc = float(np.mean(pred == y)) if y is not None else math.nan
        if not math.isfinite(loss.item()):
            raise TrainingError(
                f"non-finite loss at iteration {self.iteration + 1}: recon={recon} ce={ce} t={t.tolist()}"
            )
        new = adam_update(
            {k: self.model.params[k].data for k in names},
            {k: g.data for k, g in zip(names, grads)},
            self.adam,
            cfg.learning_rate,
        )
        for k, v in new.items():
            if not np.all(np.isfinite(v)):
                raise TrainingError(f"non-finite parameter {k} at iteration {self.iteration + 1}")
            self.model.params[k] = Tensor(v, requires_grad=True, name=k)
        self.ema = ema_update(self.ema, new, cfg.ema_decay)
        self.iteration += 1
        ce_logged = 0.0 if cfg.mode == "unsupervised" else ce
        return MetricRow(self.iteration, recon, ce_logged, loss.item(), acc)

    def run(self, on_metric: Callable[[MetricRow], None] | None = None) -> Iterator[Checkpoint]:
        """Train up to ``total_iterations``; yields periodic checkpoints and a final one."""
        cfg = self.config
        while self.iteration < cfg.total_iterations:
            row = self.step()
            if cfg.log_every and (row.iter % cfg.log_every == 0 or row.iter == cfg.total_iterations):
                self.metrics.append(row)
                if on_metric is not None:
                    on_metric(row)
                logger.info("iter %d recon %.4f ce %.4f acc %.3f", row.iter, row.recon, row.ce, row.batch_acc)
            if cfg.checkpoint_every and self.iteration % cfg.checkpoint_every == 0 and self.iteration < cfg.total_iterations:
                yield self.checkpoint()
        yield self.checkpoint()


def train_loop(config: TrainConfig, arch: ArchConfig, data, labels=None, dataset_info=None) -> Iterator[Checkpoint]:
    return Trainer(config, arch, data, labels, dataset_info).run()


def model_from_checkpoint(ck: Checkpoint, use_ema: bool = True) -> EGCModel:
    arch = ArchConfig(**ck.descriptor["arch"])
    model = init_model(arch)
    state = ck.group("ema" if use_ema else "params")
    model.load_state(state)
    return model


def save_checkpoint(ck: Checkpoint, path) -> None:
    ckpt_io.save(ck, path)
