import os

import pytest

from egc import checkpoint as ckpt_io
from egc.cli import main
from egc.io import read_csv

SMALL = ["--dataset-size", "400", "--test-size", "200", "--hidden", "16", "--depth", "2", "--time-dim", "8", "--T", "20", "--log-every", "10"]


def run(cmd, out, *extra):
    return main([cmd, "--out", str(out), *SMALL, *extra])


def files(d):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir()) if p.is_file()}


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    assert run("train", out, "--iterations", "40", "--checkpoint-every", "20", "--learning-rate", "1e-3") == 0
    return out


def test_train_outputs(trained):
    names = set(files(trained))
    assert {"checkpoint.egc", "checkpoint_000020.egc", "metrics.csv", "training_curves.png", "resolved_config.txt"} <= names
    header, rows = read_csv(trained / "metrics.csv")
    assert header == ["iter", "recon", "ce", "loss", "batch_acc"]
    assert [int(r[0]) for r in rows] == [10, 20, 30, 40]
    assert ckpt_io.load(trained / "checkpoint.egc").iteration == 40


def test_resolved_config_lists_effective_values(trained):
    text = (trained / "resolved_config.txt").read_text()
    assert text.startswith("# command = train\n")
    assert "hidden = 16\n" in text and "gamma = 0.001\n" in text
    assert "out =" not in text


def test_classify_writes_accuracy(trained, tmp_path, capsys):
    assert run("classify", tmp_path, "--checkpoint", str(trained / "checkpoint.egc")) == 0
    header, rows = read_csv(tmp_path / "accuracy.csv")
    acc = float(rows[0][3])
    assert 0.0 <= acc <= 1.0
    assert f"accuracy {acc:.4f}" in capsys.readouterr().out
    _, preds = read_csv(tmp_path / "predictions.csv")
    assert len(preds) == 200


@pytest.mark.parametrize(
    "cmd,extra",
    [
        ("sample", ["--num-samples", "50", "--seed", "7"]),
        ("sample", ["--num-samples", "20", "--label", "1", "--guidance-scale", "4"]),
        ("sample", ["--num-samples", "20", "--sampler", "langevin", "--langevin-steps", "20"]),
        ("classify", []),
        ("attack", ["--attack", "both", "--epsilons", "0,0.1", "--pgd-steps", "3"]),
        ("viz-energy", ["--num-samples", "50", "--profile-t", "10", "--grid-resolution", "8"]),
        ("interpolate", ["--num-samples", "4", "--lambdas", "0,0.5,1"]),
        ("inpaint", ["--num-samples", "20"]),
        ("eval", ["--profile-t", "10"]),
    ],
)
def test_commands_are_byte_deterministic(trained, tmp_path, cmd, extra):
    ck = ["--checkpoint", str(trained / "checkpoint.egc")]
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(cmd, a, *ck, *extra) == 0
    assert run(cmd, b, *ck, *extra) == 0
    fa, fb = files(a), files(b)
    assert len(fa) >= 3 and any(n.endswith(".png") for n in fa) and any(n.endswith(".csv") for n in fa)
    assert fa == fb


def test_sample_seed_names_and_changes_output(trained, tmp_path):
    ck = ["--checkpoint", str(trained / "checkpoint.egc"), "--num-samples", "30"]
    assert run("sample", tmp_path, *ck, "--seed", "7") == 0
    assert run("sample", tmp_path, *ck, "--seed", "8") == 0
    assert (tmp_path / "sample_7_0.csv").read_bytes() != (tmp_path / "sample_8_0.csv").read_bytes()


def test_train_rerun_and_resume_are_byte_identical(trained, tmp_path):
    again = tmp_path / "again"
    assert run("train", again, "--iterations", "40", "--checkpoint-every", "20", "--learning-rate", "1e-3") == 0
    assert files(again) == files(trained)

    resumed = tmp_path / "resumed"
    mid = trained / "checkpoint_000020.egc"
    assert run("train", resumed, "--iterations", "40", "--resume", str(mid)) == 0
    for name in ("checkpoint.egc", "metrics.csv", "training_curves.png"):
        assert (resumed / name).read_bytes() == (trained / name).read_bytes(), name


def test_corrupt_checkpoint_names_file(trained, tmp_path, capsys):
    bad = tmp_path / "bad.egc"
    data = (trained / "checkpoint.egc").read_bytes()
    bad.write_bytes(data[: len(data) // 2])
    code = run("sample", tmp_path / "o", "--checkpoint", str(bad))
    err = capsys.readouterr().err
    assert code == 3
    assert err.startswith("egc-error kind=checkpoint ")
    assert f"path={bad}" in err and "truncated" in err


def test_missing_checkpoint_flag(tmp_path, capsys):
    assert run("classify", tmp_path) == 3
    assert "checkpoint" in capsys.readouterr().err


def test_unknown_config_key_is_fatal(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("hidden = 16\nwidth = 3\n")
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    err = capsys.readouterr().err
    assert "kind=config" in err and "width" in err and ":2:" in err


def test_bad_value_is_config_error(tmp_path, capsys):
    assert run("train", tmp_path, "--gamma", "lots") == 2
    assert "gamma" in capsys.readouterr().err


def test_config_file_and_flag_precedence(tmp_path, monkeypatch):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# tiny run\nhidden = 8\niterations = 3\nseed = 5\n")
    monkeypatch.setenv("EGC_OUT", str(tmp_path / "env_out"))
    assert main(["train", "--config", str(cfg), "--T", "20", "--depth", "1", "--dataset-size", "100", "--seed", "6"]) == 0
    text = (tmp_path / "env_out" / "resolved_config.txt").read_text()
    assert "hidden = 8\n" in text and "seed = 6\n" in text and "iterations = 3\n" in text
    # a flag beats the environment
    assert main(["train", "--config", str(cfg), "--T", "20", "--depth", "1", "--dataset-size", "100", "--out", str(tmp_path / "flag")]) == 0
    assert (tmp_path / "flag" / "checkpoint.egc").exists()


def test_unsupervised_mode_logs_zero_ce(tmp_path):
    assert run("train", tmp_path, "--iterations", "10", "--mode", "unsupervised") == 0
    _, rows = read_csv(tmp_path / "metrics.csv")
    assert float(rows[-1][2]) == 0.0


def test_console_script_installed():
    from shutil import which

    assert which("egc") is not None or os.environ.get("CI_NO_SCRIPTS")
