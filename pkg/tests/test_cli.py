import shutil
import subprocess
import sys

import pytest

from affectae import cli
from affectae.data import read_manifest


@pytest.fixture(scope="module")
def generated(tmp_path_factory):
    out = tmp_path_factory.mktemp("gen")
    assert cli.main(["generate", "--seed", "3", "--recordings", "2", "--frames", "7", "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def trained(generated, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cfg = out / "run.cfg"
    cfg.write_text("max_steps=2\nbatch_size=2\neval_interval=1\nprecision=float32\n")
    code = cli.main(["train", "--config", str(cfg), "--data", str(generated), "--val", str(generated / "manifest.txt"), "--out", str(out)])
    assert code == 0
    return out


def test_generate_writes_manifest(generated):
    names = [p.name for p in read_manifest(generated / "manifest.txt")]
    assert names == ["rec000.afr", "rec001.afr"]


def test_generate_is_deterministic(generated, tmp_path):
    cli.main(["generate", "--seed", "3", "--recordings", "2", "--frames", "7", "--out", str(tmp_path)])
    for name in ("rec000.afr", "rec001.afr", "manifest.txt"):
        assert (tmp_path / name).read_bytes() == (generated / name).read_bytes()


def test_train_writes_curve_and_checkpoints(trained):
    assert (trained / "curve.csv").read_text().count("\n") == 3
    assert (trained / "final.afck").exists() and (trained / "best.afck").exists()


def test_eval_writes_report(trained, generated, tmp_path, capsys):
    code = cli.main(
        ["eval", "--checkpoint", str(trained / "final.afck"), "--data", str(generated),
         "--report", str(tmp_path / "rep.csv"), "--predictions", str(tmp_path / "pred.csv")]
    )
    assert code == 0
    assert "E_av" in capsys.readouterr().out
    assert (tmp_path / "rep.txt").exists()
    assert len((tmp_path / "pred.csv").read_text().splitlines()) == 1 + 2 * (7 - 4)


def test_bad_config_exit_code(tmp_path, generated, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("learning_rate=-1\n")
    assert cli.main(["train", "--config", str(cfg), "--data", str(generated)]) == cli.EXIT_CONFIG
    assert "config error" in capsys.readouterr().err


def test_missing_data_exit_code(tmp_path):
    assert cli.main(["train", "--data", str(tmp_path / "nowhere")]) == cli.EXIT_DATA


def test_corrupt_recording_exit_code(generated, trained, tmp_path):
    shutil.copy(generated / "manifest.txt", tmp_path / "manifest.txt")
    (tmp_path / "rec000.afr").write_bytes(b"JUNK" + (generated / "rec000.afr").read_bytes()[4:])
    shutil.copy(generated / "rec001.afr", tmp_path / "rec001.afr")
    code = cli.main(["eval", "--checkpoint", str(trained / "final.afck"), "--data", str(tmp_path), "--report", str(tmp_path / "r.csv")])
    assert code == cli.EXIT_DATA


def test_corrupt_checkpoint_exit_code(generated, tmp_path):
    (tmp_path / "x.afck").write_bytes(b"nothing here")
    code = cli.main(["eval", "--checkpoint", str(tmp_path / "x.afck"), "--data", str(generated), "--report", str(tmp_path / "r.csv")])
    assert code == cli.EXIT_DATA


def test_unknown_ablation_exit_code():
    assert cli.main(["ablate", "--name", "bogus"]) == cli.EXIT_CONFIG


def test_gradcheck_command(capsys):
    assert cli.main(["gradcheck", "--seeds", "1"]) == 0
    out = capsys.readouterr().out
    assert "checks passed" in out and "FAIL" not in out


def test_console_script_usage():
    proc = subprocess.run([sys.executable, "-m", "affectae.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "gradcheck" in proc.stdout
    proc = subprocess.run([sys.executable, "-m", "affectae.cli", "train"], capture_output=True, text=True)
    assert proc.returncode == 2
