"""Command-line entry point: ``egc <command> [--config FILE] [--key value ...]``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from . import io as out_io
from . import plotting
from .checkpoint import CheckpointError, atomic_write
from .config import SCHEMA, ConfigError, parse_file, resolve, resolved_text
from .data import DatasetError, DatasetSpec, from_unit, gen_dataset, idx_load, moons_distance
from .evaluate import (
    DEFAULT_EPSILONS,
    accuracy,
    density_grid_2d,
    energy_noise_profile,
    folded_normal_mean,
    grid_kl,
    predict,
    robustness_sweep,
    sliced_wasserstein,
)
from .model import ArchConfig
from .sample import (
    SampleConfig,
    classifier_confidence,
    fixed_t_score,
    generate,
    inpaint,
    interpolate,
    langevin_sample,
)
from .train import METRIC_HEADER, TrainConfig, Trainer, model_from_checkpoint

logger = logging.getLogger("egc")

COMMANDS = ("train", "sample", "classify", "attack", "viz-energy", "interpolate", "inpaint", "eval")


class Run:
    def __init__(self, command: str, cfg: dict):
        self.command = command
        self.cfg = cfg
        self.out = Path(cfg["out"])
        self.out.mkdir(parents=True, exist_ok=True)
        atomic_write(self.out / "resolved_config.txt", resolved_text(cfg, command).encode("utf-8"))

    def path(self, name: str) -> Path:
        return self.out / name

    # -- data -------------------------------------------------------------------------
    def spec(self, size: int) -> DatasetSpec:
        c = self.cfg
        return DatasetSpec(c["dataset"], size, c["dataset_noise"], max(c["num_classes"], 1), c["images_path"], c["labels_path"])

    def train_split(self):
        c = self.cfg
        if c["dataset"] == "idx_images":
            return idx_load(c["images_path"], c["labels_path"])
        return gen_dataset(self.spec(c["dataset_size"]), c["data_seed"])

    def test_split(self, seed_offset: int = 0):
        c = self.cfg
        if c["dataset"] == "idx_images":
            if c["test_images_path"]:
                return idx_load(c["test_images_path"], c["test_labels_path"])
            return idx_load(c["images_path"], c["labels_path"])
        return gen_dataset(self.spec(c["test_size"]), c["test_seed"] + seed_offset)

    # -- model --------------------------------------------------------------------
    def load(self, key: str = "checkpoint"):
        path = self.cfg[key]
        if not path:
            raise CheckpointError("<unset>", f"the {self.command} command needs {key}=<file>")
        ck = ckpt_io.load(path)
        return ck, model_from_checkpoint(ck, use_ema=self.cfg["use_ema"])

    def is_2d(self, model) -> bool:
        return model.config.input_shape == (2,)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_train(run: Run) -> None:
    c = run.cfg
    x, y = run.train_split()
    info = {"kind": c["dataset"], "size": int(len(x)), "noise": c["dataset_noise"], "seed": c["data_seed"]}
    if c["resume"]:
        trainer = Trainer.resume(ckpt_io.load(c["resume"]), x, y, total_iterations=c["iterations"])
    else:
        n_classes = c["num_classes"] or int(np.max(y)) + 1
        kind = c["arch"] if c["arch"] != "auto" else ("mlp" if x.ndim == 2 else "conv")
        arch = ArchConfig(
            kind=kind,
            input_shape=x.shape[1:],
            num_classes=n_classes,
            hidden=c["hidden"],
            depth=c["depth"],
            channels=c["channels"],
            groups=c["groups"],
            time_dim=c["time_dim"],
        )
        tcfg = TrainConfig(
            gamma=c["gamma"],
            learning_rate=c["learning_rate"],
            batch_size=c["batch_size"],
            total_iterations=c["iterations"],
            seed=c["seed"],
            mode=c["mode"],
            ema_decay=c["ema_decay"],
            schedule=c["schedule"],
            T=c["T"],
            target=c["target"],
            log_every=c["log_every"],
            checkpoint_every=c["checkpoint_every"],
        )
        trainer = Trainer(tcfg, arch, x, y if c["mode"] != "unsupervised" else None, info)
    final = None
    for ck in trainer.run():
        if ck.iteration < trainer.config.total_iterations:
            ckpt_io.save(ck, run.path(f"checkpoint_{ck.iteration:06d}.egc"))
        final = ck
    ckpt_io.save(final, run.path("checkpoint.egc"))
    rows = [(r.iter, r.recon, r.ce, r.loss, r.batch_acc) for r in trainer.metrics]
    out_io.write_csv(run.path("metrics.csv"), METRIC_HEADER, rows)
    if rows:
        plotting.training_curves(rows, run.path("training_curves.png"))


def _sample_rows(model, pts, label):
    if label is None:
        with_label = predict(model, pts, 0)
    else:
        with_label = np.full(len(pts), label)
    conf = classifier_confidence(model, pts, with_label)
    return [(p[0], p[1], int(lab), cf) for p, lab, cf in zip(pts, with_label, conf)]


def cmd_sample(run: Run) -> None:
    c = run.cfg
    ck, model = run.load()
    seed = c["seed"]
    if c["sampler"] == "langevin":
        rng = np.random.default_rng(seed)
        t = c["langevin_t"]
        x0 = rng.standard_normal((c["num_samples"],) + model.config.input_shape)
        x = langevin_sample(fixed_t_score(model, ck.schedule, t), x0, c["langevin_step"], c["langevin_steps"], rng)
    else:
        scfg = SampleConfig(num_samples=c["num_samples"], label=c["label"], guidance_scale=c["guidance_scale"], seed=seed)
        x = generate(model, ck.schedule, scfg)
    base = f"sample_{seed}"
    if run.is_2d(model):
        rows = _sample_rows(model, x, c["label"])
        out_io.write_csv(run.path(f"{base}_0.csv"), ("x", "y", "label", "confidence"), rows)
        out_io.emit("scatter_plot", x, run.path(f"{base}_0.pgm"))
        plotting.scatter(x, run.path(f"{base}_0.png"), labels=np.array([r[2] for r in rows]))
    else:
        for i, img in enumerate(x):
            out_io.write_pgm(run.path(f"{base}_{i}.pgm"), img)
        plotting.image_grid(x[:64], run.path(f"{base}_grid.png"))


def cmd_classify(run: Run) -> None:
    _, model = run.load()
    x, y = run.test_split()
    pred = predict(model, x, 0)
    conf = classifier_confidence(model, x, pred)
    acc = float(np.mean(pred == y))
    out_io.write_csv(run.path("accuracy.csv"), ("split", "t", "n", "accuracy"), [("test", 0, len(x), acc)])
    out_io.write_csv(
        run.path("predictions.csv"),
        ("index", "label", "prediction", "confidence"),
        [(i, int(a), int(b), cf) for i, (a, b, cf) in enumerate(zip(y, pred, conf))],
    )
    if run.is_2d(model):
        plotting.scatter(x, run.path("predictions.png"), labels=pred, title=f"accuracy {acc:.3f}")
    print(f"accuracy {acc:.4f}")


def cmd_attack(run: Run) -> None:
    c = run.cfg
    _, model = run.load()
    models = {"egc": model}
    if c["baseline_checkpoint"]:
        _, models["baseline"] = run.load("baseline_checkpoint")
    x, y = run.test_split()
    attacks = ("fgsm", "pgd") if c["attack"] == "both" else (c["attack"],)
    for a in attacks:
        if a not in ("fgsm", "pgd"):
            raise ConfigError(f"bad value for attack: {a!r}")
    step = c["pgd_step_size"] or None
    rows = robustness_sweep(models, x, y, c["epsilons"] or DEFAULT_EPSILONS, attacks, c["pgd_steps"], step)
    out_io.write_csv(
        run.path("robustness.csv"),
        ("model", "attack", "epsilon", "accuracy"),
        [(r["model"], r["attack"], r["epsilon"], r["accuracy"]) for r in rows],
    )
    plotting.robustness(rows, run.path("robustness.png"))


def _profile_scales(c, sched, t) -> np.ndarray:
    if c["noise_scales"]:
        return np.asarray(c["noise_scales"])
    expected = folded_normal_mean(sched, t)
    return np.linspace(0.0, 3.0 * expected, c["profile_bins"] + 1)


def cmd_viz_energy(run: Run) -> None:
    c = run.cfg
    ck, model = run.load()
    sched = ck.schedule
    t = c["profile_t"]
    x, _ = run.test_split()
    rng = np.random.default_rng(c["seed"])
    scales = _profile_scales(c, sched, t)
    prof = energy_noise_profile(model, sched, x[: c["num_samples"]], t, scales, rng)
    out_io.write_csv(run.path("energy_profile.csv"), ("noise_scale", "mean_logdensity"), prof)
    plotting.energy_profile(prof, run.path("energy_profile.png"), folded_normal_mean(sched, t))

    eps_u = rng.standard_normal(model.config.input_shape)
    eps_v = rng.standard_normal(model.config.input_shape)
    sigma = float(sched.sigma(t))
    span = 3.0 * sigma * np.sqrt(np.prod(model.config.input_shape)) / np.linalg.norm(eps_u)
    ga = np.linspace(-span, span, c["grid_resolution"])
    grid = density_grid_2d(model, sched, x[0], t, eps_u, eps_v, ga, ga)
    out_io.write_csv(
        run.path("density_grid.csv"),
        ("a", "b", "logdensity"),
        [(a, b, grid[i, j]) for i, a in enumerate(ga) for j, b in enumerate(ga)],
    )
    out_io.write_pgm(run.path("density_grid.pgm"), out_io.heatmap(grid))
    plotting.density_grid(grid, (ga[0], ga[-1], ga[0], ga[-1]), run.path("density_grid.png"), f"t = {t}")


def cmd_interpolate(run: Run) -> None:
    c = run.cfg
    ck, model = run.load()
    rng = np.random.default_rng(c["seed"])
    shape = (c["num_samples"],) + model.config.input_shape
    xa, xb = rng.standard_normal(shape), rng.standard_normal(shape)
    scfg = SampleConfig(num_samples=c["num_samples"], label=c["label"], guidance_scale=c["guidance_scale"], seed=c["seed"])
    outs = interpolate(model, ck.schedule, xa, xb, c["lambdas"], scfg)
    if run.is_2d(model):
        rows = [(lam, i, p[0], p[1]) for lam, pts in zip(c["lambdas"], outs) for i, p in enumerate(pts)]
        out_io.write_csv(run.path("interpolation.csv"), ("lambda", "index", "x", "y"), rows)
        plotting.scatter(np.concatenate(outs), run.path("interpolation.png"))
    else:
        for k, pts in enumerate(outs):
            out_io.write_pgm(run.path(f"interp_{c['seed']}_{k}.pgm"), pts[0])
        plotting.image_grid(np.stack([p[0] for p in outs]), run.path("interpolation.png"), ncols=len(outs))


def cmd_inpaint(run: Run) -> None:
    c = run.cfg
    ck, model = run.load()
    x, _ = run.test_split()
    known = x[: c["num_samples"]]
    mask = np.zeros_like(known)
    if run.is_2d(model):
        for k in c["inpaint_known"]:
            mask[:, k] = 1.0
    else:
        mask[..., : known.shape[-1] // 2] = 1.0
    scfg = SampleConfig(num_samples=len(known), label=c["label"], guidance_scale=c["guidance_scale"], seed=c["seed"])
    filled = inpaint(model, ck.schedule, known, mask, scfg)
    if run.is_2d(model):
        header = ["index", "x_known", "y_known", "x", "y"]
        dist = None
        if c["dataset"] == "two_moons":
            dist = moons_distance(from_unit("two_moons", filled))
            header.append("manifold_distance")
        rows = []
        for i in range(len(known)):
            r = [i, known[i, 0] if mask[i, 0] else "", known[i, 1] if mask[i, 1] else "", filled[i, 0], filled[i, 1]]
            if dist is not None:
                r.append(dist[i])
            rows.append(r)
        out_io.write_csv(run.path("inpaint.csv"), header, rows)
        plotting.scatter(filled, run.path("inpaint.png"), reference=known)
    else:
        for i, img in enumerate(filled):
            out_io.write_pgm(run.path(f"inpaint_{c['seed']}_{i}.pgm"), img)
        plotting.image_grid(filled[:64], run.path("inpaint.png"))


def cmd_eval(run: Run) -> None:
    c = run.cfg
    ck, model = run.load()
    xt, yt = run.test_split()
    xr, _ = run.test_split(seed_offset=1)
    scfg = SampleConfig(num_samples=len(xt), seed=c["seed"])
    gen = generate(model, ck.schedule, scfg)
    sw = sliced_wasserstein(gen, xt, c["projections"], np.random.default_rng(c["seed"]))
    base = sliced_wasserstein(xr, xt, c["projections"], np.random.default_rng(c["seed"]))
    rows = [
        ("accuracy_t0", accuracy(model, xt, yt)),
        ("sw_generated", sw),
        ("sw_real_baseline", base),
        ("sw_ratio", sw / base),
    ]
    if c["dataset"] == "two_moons":
        d = moons_distance(from_unit("two_moons", gen))
        rows.append(("manifold_fraction_0.3", float(np.mean(d < 0.3))))
    if run.is_2d(model):
        x_train, _ = run.train_split()
        rows.append((f"grid_kl_t{c['profile_t']}", grid_kl(model, ck.schedule, x_train, c["profile_t"])))
    out_io.write_csv(run.path("eval.csv"), ("metric", "value"), rows)
    if run.is_2d(model):
        plotting.scatter(gen, run.path("eval_samples.png"), reference=xt)


HANDLERS = {
    "train": cmd_train,
    "sample": cmd_sample,
    "classify": cmd_classify,
    "attack": cmd_attack,
    "viz-energy": cmd_viz_energy,
    "interpolate": cmd_interpolate,
    "inpaint": cmd_inpaint,
    "eval": cmd_eval,
}


# ---------------------------------------------------------------------------
# argument handling
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("-v", "--verbose", action="store_true")
    for key, spec in SCHEMA.items():
        flag = "--" + key.replace("_", "-")
        names = [flag] if flag == f"--{key}" else [flag, f"--{key}"]
        common.add_argument(*names, dest=key, default=None, metavar="VALUE", help=f"{spec.help} (default: {spec.default})")
    p = argparse.ArgumentParser(prog="egc", description="Energy-guided classifier/denoiser toolkit")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return p


def _fail(kind: str, path, msg: str, code: int) -> int:
    msg = " ".join(str(msg).split())
    print(f"egc-error kind={kind} path={path or '-'} msg={msg}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    overrides = {k: v for k, v in vars(args).items() if k in SCHEMA and v is not None}
    try:
        file_values = parse_file(args.config) if args.config else {}
        cfg = resolve(file_values, overrides)
        run = Run(args.command, cfg)
        HANDLERS[args.command](run)
    except ConfigError as exc:
        return _fail("config", args.config, exc, 2)
    except CheckpointError as exc:
        return _fail("checkpoint", exc.path, exc, 3)
    except DatasetError as exc:
        return _fail("dataset", "", exc, 4)
    except (ValueError, RuntimeError) as exc:
        return _fail("runtime", "", exc, 1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
