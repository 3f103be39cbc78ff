"""Flat ``key = value`` run configuration.

Values come from (lowest to highest precedence): built-in defaults, a config
file, the ``EGC_OUT`` environment variable (output directory only), and
command-line flags. Unknown keys are an error.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable


class ConfigError(ValueError):
    pass


def _bool(s: str) -> bool:
    v = str(s).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _floats(s: str) -> tuple[float, ...]:
    s = str(s).strip()
    return tuple(float(v) for v in s.split(",") if v.strip()) if s else ()


def _ints(s: str) -> tuple[int, ...]:
    s = str(s).strip()
    return tuple(int(v) for v in s.split(",") if v.strip()) if s else ()


def _opt_int(s: str):
    s = str(s).strip()
    return None if s in ("", "none", "None") else int(s)


def _str(s: str) -> str:
    return str(s).strip()


@dataclass(frozen=True)
class Key:
    parse: Callable[[str], Any]
    default: str
    help: str


SCHEMA: dict[str, Key] = {
    # output
    "out": Key(_str, "egc_out", "output directory"),
    # dataset
    "dataset": Key(_str, "two_moons", "two_moons | eight_gaussians | checkerboard | idx_images"),
    "dataset_size": Key(int, "10000", "training-set size for synthetic data"),
    "dataset_noise": Key(float, "0.1", "jitter std in the generator's own units"),
    "data_seed": Key(int, "0", "seed for the training split"),
    "test_size": Key(int, "2000", "held-out split size"),
    "test_seed": Key(int, "12345", "seed for the held-out split"),
    "images_path": Key(_str, "", "IDX images file (idx_images)"),
    "labels_path": Key(_str, "", "IDX labels file (idx_images)"),
    "test_images_path": Key(_str, "", "held-out IDX images (idx_images)"),
    "test_labels_path": Key(_str, "", "held-out IDX labels (idx_images)"),
    "num_classes": Key(int, "0", "class count; 0 infers it from the dataset"),
    # architecture
    "arch": Key(_str, "auto", "mlp | conv | auto (mlp for 2-D, conv for images)"),
    "hidden": Key(int, "128", "hidden width / time-embedding width"),
    "depth": Key(int, "3", "hidden layers (mlp)"),
    "channels": Key(_ints, "16,32,64", "conv stage widths"),
    "groups": Key(int, "4", "group-norm groups"),
    "time_dim": Key(int, "32", "sinusoidal embedding size"),
    # training
    "gamma": Key(float, "0.001", "cross-entropy weight"),
    "learning_rate": Key(float, "0.0001", "Adam step size"),
    "batch_size": Key(int, "128", "batch size"),
    "iterations": Key(int, "5000", "training iterations"),
    "seed": Key(int, "0", "run seed (init, batches, noise, sampling)"),
    "mode": Key(_str, "supervised", "supervised | unsupervised | discriminative"),
    "ema_decay": Key(float, "0.999", "EMA decay of the parameters"),
    "schedule": Key(_str, "linear", "linear | cosine"),
    "T": Key(int, "100", "diffusion steps"),
    "target": Key(_str, "eps", "eps | score regression target"),
    "log_every": Key(int, "100", "metric log interval"),
    "checkpoint_every": Key(int, "0", "intermediate checkpoint interval (0 = final only)"),
    "resume": Key(_str, "", "checkpoint to continue training from"),
    # model loading
    "checkpoint": Key(_str, "", "checkpoint file for non-train commands"),
    "use_ema": Key(_bool, "true", "use EMA parameters when loading"),
    "baseline_checkpoint": Key(_str, "", "discriminative baseline for the attack command"),
    # sampling
    "sampler": Key(_str, "ancestral", "ancestral | langevin"),
    "num_samples": Key(int, "1000", "samples to draw"),
    "label": Key(_opt_int, "none", "class to condition on (none = unconditional)"),
    "guidance_scale": Key(float, "1.0", "classifier-guidance multiplier"),
    "langevin_step": Key(float, "0.001", "Langevin step size"),
    "langevin_steps": Key(int, "500", "Langevin iterations"),
    "langevin_t": Key(int, "1", "timestep whose score drives Langevin"),
    "lambdas": Key(_floats, "0,0.142857142857,0.285714285714,0.428571428571,0.571428571429,0.714285714286,0.857142857143,1", "interpolation weights"),
    "inpaint_known": Key(_ints, "0", "indices of known coordinates (2-D) or 'left half' marker for images"),
    # attacks
    "attack": Key(_str, "pgd", "fgsm | pgd | both"),
    "epsilon": Key(float, "0.1", "L-inf budget (single attack)"),
    "epsilons": Key(_floats, "0,0.02,0.04,0.06,0.08,0.1,0.12,0.14,0.16,0.18,0.2", "sweep budgets"),
    "pgd_steps": Key(int, "20", "PGD iterations"),
    "pgd_step_size": Key(float, "0", "PGD step (0 = epsilon/4)"),
    # energy landscape
    "profile_t": Key(int, "50", "timestep for energy probes"),
    "noise_scales": Key(_floats, "", "explicit noise magnitudes (empty = automatic grid)"),
    "profile_bins": Key(int, "24", "automatic grid size"),
    "grid_resolution": Key(int, "64", "density grid cells per side"),
    # evaluation
    "projections": Key(int, "256", "sliced-Wasserstein projections"),
}


def parse_file(path) -> dict[str, str]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError as exc:
        raise ConfigError(f"{path}: config file not found") from exc
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        k, v = (s.strip() for s in line.split("=", 1))
        if k not in SCHEMA:
            raise ConfigError(f"{path}:{lineno}: unknown key {k!r}")
        out[k] = v
    return out


def resolve(file_values: dict[str, str] | None = None, overrides: dict[str, str] | None = None, env=None) -> dict[str, Any]:
    env = os.environ if env is None else env
    raw = {k: spec.default for k, spec in SCHEMA.items()}
    for src in (file_values or {},):
        raw.update(src)
    if env.get("EGC_OUT"):
        raw["out"] = env["EGC_OUT"]
    for k, v in (overrides or {}).items():
        if k not in SCHEMA:
            raise ConfigError(f"unknown key {k!r}")
        raw[k] = v
    resolved = {}
    for k, v in raw.items():
        try:
            resolved[k] = SCHEMA[k].parse(v)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad value for {k}: {v!r} ({exc})") from exc
    resolved["_raw"] = {k: str(v) for k, v in raw.items()}
    return resolved


def resolved_text(cfg: dict[str, Any], command: str) -> str:
    lines = [f"# command = {command}"]
    for k in sorted(k for k in cfg["_raw"] if k != "out"):
        lines.append(f"{k} = {cfg['_raw'][k]}")
    return "\n".join(lines) + "\n"
