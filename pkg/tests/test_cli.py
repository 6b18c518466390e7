import numpy as np
import pytest

from mamp.cli import main
from mamp.data import SkeletonSequence, write_corpus


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "gen.yaml").write_text("num_classes: 3\nsequences_per_class: 6\ntest_per_class: 2\n")
    (root / "pre.yaml").write_text(
        "epochs: 2\nwarmup_epochs: 1\nbatch_size: 8\narch:\n  depth: 1\n  decoder_depth: 1\n"
        "  embed_dim: 16\n  decoder_dim: 16\n  mlp_dim: 32\n  num_heads: 2\n")
    assert main(["gen-data", "--config", str(root / "gen.yaml"), "--out", str(root / "data")]) == 0
    assert main(["pretrain", "--config", str(root / "pre.yaml"), "--corpus", str(root / "data"),
                 "--out", str(root / "run")]) == 0
    return root


def test_pipeline_commands_succeed(workspace, capsys):
    ckpt, data = str(workspace / "run" / "checkpoint.pt"), str(workspace / "data")
    (workspace / "probe.yaml").write_text("epochs: 2\n")
    assert main(["probe", "--ckpt", ckpt, "--corpus", data, "--config", str(workspace / "probe.yaml"),
                 "--out", str(workspace / "run")]) == 0
    assert "linear top-1" in capsys.readouterr().out
    (workspace / "ft.yaml").write_text("epochs: 1\nwarmup_epochs: 0\n")
    assert main(["finetune", "--ckpt", ckpt, "--corpus", data, "--config", str(workspace / "ft.yaml"),
                 "--label-fraction", "0.5"]) == 0
    assert main(["report", "--kind", "loss-curve", "--in", str(workspace / "run" / "metrics.csv"),
                 "--out", str(workspace / "rep" / "loss.svg")]) == 0
    assert (workspace / "rep" / "loss.svg").exists() and (workspace / "rep" / "loss.txt").exists()
    assert (workspace / "run" / "config.yaml").exists()


def test_ablate_command(workspace, capsys):
    (workspace / "abl.yaml").write_text(
        "pretrain:\n  epochs: 1\n  warmup_epochs: 0\n  arch: {depth: 1, decoder_depth: 1, embed_dim: 16,"
        " decoder_dim: 16, mlp_dim: 32, num_heads: 2}\nprobe: {epochs: 1}\nvalues: {decoder_depth: [1, 2]}\n")
    assert main(["ablate", "--axis", "decoder_depth", "--config", str(workspace / "abl.yaml"),
                 "--corpus", str(workspace / "data"), "--out", str(workspace / "abl")]) == 0
    out = capsys.readouterr().out
    assert out.startswith("axis,setting,config_hash") and out.count("\n") == 3


@pytest.mark.parametrize("argv, code", [
    (["pretrain", "--config", "{bad}", "--out", "x"], 2),
    (["ablate", "--axis", "width"], 2),
    (["report", "--kind", "pie", "--in", "a.csv", "--out", "x.svg"], 2),
    (["probe", "--ckpt", "missing.pt", "--corpus", "nowhere"], 3),
    (["report", "--kind", "table", "--in", "missing.csv", "--out", "x.svg"], 3),
])
def test_error_exit_codes(workspace, argv, code, tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    if "{bad}" in argv:
        (tmp_path / "bad.yaml").write_text("learning_rate: 1\n")
        argv = [str(tmp_path / "bad.yaml") if a == "{bad}" else a for a in argv]
    assert main(argv) == code
    assert capsys.readouterr().err.startswith("error:")


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_data_and_numerical_exit_codes(workspace, tmp_path, capsys):
    bad = tmp_path / "corpus"
    bad.mkdir()
    (bad / "manifest.csv").write_text("path,label,subject,view\na.txt,0,0,0\n")
    (bad / "a.txt").write_text("1 15 3\n1 2\n")
    assert main(["pretrain", "--corpus", str(bad), "--out", str(tmp_path / "o")]) == 3
    assert "a.txt:2" in capsys.readouterr().err
    # finite coordinates whose frame differences overflow
    frames = np.where(np.arange(30)[:, None, None] % 2 == 0, 1e308, -1e308) * np.ones((30, 15, 3))
    write_corpus([SkeletonSequence(frames, label=i % 2, name=f"{i}.txt") for i in range(4)],
                 tmp_path / "huge")
    (tmp_path / "nan.yaml").write_text("epochs: 1\nwarmup_epochs: 0\narch: {depth: 1, decoder_depth: 1}\n")
    code = main(["pretrain", "--config", str(tmp_path / "nan.yaml"), "--corpus", str(tmp_path / "huge"),
                 "--out", str(tmp_path / "nan")])
    assert code == 4
    assert list((tmp_path / "nan").glob("nonfinite_step*.json"))
