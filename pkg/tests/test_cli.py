import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from wakeword.audio import read_wav
from wakeword.cli import CliError, main, parse_costs
from wakeword.corpus import load_manifest
from wakeword.trainer import TrainConfig


def run_cli(*argv):
    return main([str(a) for a in argv])


def test_cost_grid():
    grid = parse_costs("-2:0.5:6")
    assert len(grid) == 17 and grid[0] == -2.0 and grid[-1] == 6.0
    assert parse_costs("1, -1,0") == [-1.0, 0.0, 1.0]
    for bad in ("1:0:2", "3:1:2", "1:2"):
        with pytest.raises(CliError):
            parse_costs(bad)


def test_unknown_flag_exits_with_2(capsys):
    with pytest.raises(SystemExit) as e:
        run_cli("train", "--bogus")
    assert e.value.code == 2
    r = subprocess.run([sys.executable, "-m", "wakeword.cli", "eval", "--nope"], capture_output=True)
    assert r.returncode == 2


def test_pipeline_failure_exits_with_1(tmp_path, capsys):
    assert run_cli("eval", "--run-dir", tmp_path, "--model", "missing.ckpt", "--manifest", "m.txt") == 1
    err = capsys.readouterr().err
    assert err.startswith("wakeword eval: error:")
    (tmp_path / "bad.conf").write_text("epochs=2\nunknown_key=1\n")
    assert run_cli("train", "--run-dir", tmp_path, "--config", "bad.conf", "--train", "a", "--dev", "b") == 1
    assert "unknown key" in capsys.readouterr().err


def test_synth_toy_is_deterministic(tmp_path):
    for name in ("a", "b"):
        assert run_cli("synth-toy", "--run-dir", tmp_path / name, "--n-pos", 5, "--n-neg", 8, "--seed", 7) == 0
    a, b = tmp_path / "a" / "toy", tmp_path / "b" / "toy"
    assert (a / "manifest.txt").read_text() == (b / "manifest.txt").read_text()
    for f in sorted((a / "wav").iterdir()):
        assert f.read_bytes() == (b / "wav" / f.name).read_bytes()
    m = load_manifest(a / "manifest.txt")
    assert len(m.positives) == 5 and len(m.negatives) == 8
    assert (tmp_path / "a" / "synth-toy.conf").exists()


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """synth-toy -> prepare -> train on a tiny corpus, shared by the CLI tests below."""
    run = tmp_path_factory.mktemp("cli")
    assert run_cli("synth-toy", "--run-dir", run, "--n-pos", 16, "--n-neg", 24, "--seed", 3, "--out", "train") == 0
    assert run_cli("synth-toy", "--run-dir", run, "--n-pos", 4, "--n-neg", 6, "--seed", 4, "--out", "dev",
                   "--prefix", "dev") == 0
    assert run_cli("prepare", "--run-dir", run, "--manifest", "train/manifest.txt", "--out", "data") == 0
    (run / "train.cfg").write_text("epochs=3\nbatch_size=8\nlr_initial=0.003\n")
    assert run_cli("train", "--run-dir", run, "--config", "train.cfg", "--epochs", 2,
                   "--train", "data/manifest.txt", "--dev", "dev/manifest.txt") == 0
    return run


def test_prepare_outputs(pipeline):
    data = pipeline / "data"
    for name in ("manifest.txt", "feats.ark", "phone_lm.fst", "den.fst", "pdf_ids.txt", "words.txt"):
        assert (data / name).exists(), name
    m = load_manifest(data / "manifest.txt")
    # negatives are sub-segmented by default
    assert all("-" in e.utt_id for e in m.negatives) and len(m.positives) == 16
    assert "subsegment=True" in (pipeline / "prepare.conf").read_text()


def test_config_precedence(pipeline):
    cfg = TrainConfig.read(pipeline / "train.conf")
    assert cfg.epochs == 2  # flag beats file
    assert cfg.batch_size == 8 and cfg.lr_initial == 0.003  # file beats defaults
    assert cfg.patience == TrainConfig().patience
    assert len((pipeline / "train.log").read_text().splitlines()) == 2


def test_align_refine_eval_sweep(pipeline, capsys):
    run = pipeline
    assert run_cli("align", "--run-dir", run, "--model", "best.ckpt", "--manifest", "data/manifest.txt") == 0
    assert (run / "alignments.txt").exists()
    assert run_cli("refine", "--run-dir", run, "--model", "best.ckpt", "--alignments", "alignments.txt",
                   "--train", "data/manifest.txt", "--dev", "dev/manifest.txt", "--epochs", 1,
                   "--batch-size", 8) == 0
    assert (run / "refine" / "best.ckpt").exists()
    capsys.readouterr()
    assert run_cli("eval", "--run-dir", run, "--model", "best.ckpt", "--manifest", "dev/manifest.txt",
                   "--positive-cost", 1.0) == 0
    out = capsys.readouterr().out
    assert "frr_percent=" in out and (run / "eval.txt").read_text() == out
    assert run_cli("sweep", "--run-dir", run, "--model", "best.ckpt", "--manifest", "dev/manifest.txt") == 0
    lines = (run / "det.csv").read_text().splitlines()
    assert lines[0] == "cost,frr_percent,fah_per_hour" and len(lines) == 18
    assert (run / "det.envelope.csv").exists() and (run / "summary.txt").exists()


def test_decode_output_format(pipeline, capsys):
    run = pipeline
    m = load_manifest(run / "dev" / "manifest.txt")
    wav = m.audio_file(m.positives[0])
    capsys.readouterr()
    # a very cheap wake path fires; a very expensive one does not
    assert run_cli("decode", "--run-dir", run, "--model", "best.ckpt", "--input", wav,
                   "--positive-cost", -50) == 0
    line = capsys.readouterr().out.strip().splitlines()[-1].split("\t")
    assert line[0] == "DETECTED" and line[1] == "wake0" and float(line[2]) >= 0
    assert run_cli("decode", "--run-dir", run, "--model", "best.ckpt", "--input", wav,
                   "--positive-cost", 200) == 0
    assert capsys.readouterr().out == "END\tno-detection\n"
    assert "positive_cost=200" in (run / "decode.conf").read_text()


def test_decode_from_stdin(pipeline):
    run = pipeline
    m = load_manifest(run / "dev" / "manifest.txt")
    x, _ = read_wav(m.audio_file(m.positives[0]))
    raw = (np.round(x * 32768).astype("<i2")).tobytes()
    args = ["decode", "--run-dir", str(run), "--model", "best.ckpt", "--positive-cost", "-50"]
    r = subprocess.run([sys.executable, "-m", "wakeword.cli", *args], input=raw, capture_output=True)
    assert r.returncode == 0 and r.stdout.decode().startswith("DETECTED\twake0\t")
    wav_bytes = Path(m.audio_file(m.positives[0])).read_bytes()
    r2 = subprocess.run([sys.executable, "-m", "wakeword.cli", *args], input=wav_bytes, capture_output=True)
    assert r2.stdout == r.stdout
