import numpy as np
import pytest

from dbp.cli import main
from dbp.harness import read_metrics

TINY = """\
n_graphs=30
nodes_min=6
nodes_max=9
num_layers=2
hidden_dim=8
epochs_pretrain=2
epochs_finetune=2
batch_size=16
train_frac=0.6
valid_frac=0.2
test_frac=0.2
"""


@pytest.fixture()
def workdir(tmp_path):
    cfg_path = tmp_path / "exp.cfg"
    cfg_path.write_text(TINY)
    return tmp_path, cfg_path


def test_full_cli_pipeline(workdir):
    tmp, cfg = workdir
    data = tmp / "data.txt"
    assert main(["generate", "--config", str(cfg), "--out", str(data)]) == 0
    assert data.exists() and (tmp / "data.txt.splits").exists()

    assert main(["pretrain", "--config", str(cfg), "--data", str(data),
                 "--ckpt-out", str(tmp / "pre.ckpt"),
                 "--out", str(tmp / "pre.csv")]) == 0
    rows = read_metrics(tmp / "pre.csv")
    assert len(rows) == 2

    assert main(["finetune", "--config", str(cfg), "--data", str(data),
                 "--ckpt-in", str(tmp / "pre.ckpt"),
                 "--ckpt-out", str(tmp / "fin.ckpt"),
                 "--out", str(tmp / "fin.csv")]) == 0
    rows = read_metrics(tmp / "fin.csv")
    assert rows[-1].test_auc is not None

    assert main(["sweep", "--config", str(cfg), "--data", str(data),
                 "--alphas", "0.1", "--betas", "0.0", "--seeds", "1",
                 "--out", str(tmp / "sweep.csv")]) == 0
    assert (tmp / "sweep.csv").read_text().startswith("alpha,beta,seed,status")

    out_dir = tmp / "report"
    assert main(["report", str(tmp / "fin.csv"), "--sweep", str(tmp / "sweep.csv"),
                 "--out", str(out_dir)]) == 0
    assert (out_dir / "sweep_mean.csv").exists()


def test_no_transfer_flag(workdir):
    tmp, cfg = workdir
    data = tmp / "data.txt"
    main(["generate", "--config", str(cfg), "--out", str(data)])
    assert main(["finetune", "--config", str(cfg), "--data", str(data),
                 "--no-transfer", "--ckpt-out", str(tmp / "nt.ckpt")]) == 0


def test_seed_override_changes_output(workdir):
    tmp, cfg = workdir
    a, b, c = tmp / "a.txt", tmp / "b.txt", tmp / "c.txt"
    main(["generate", "--config", str(cfg), "--out", str(a)])
    main(["generate", "--config", str(cfg), "--out", str(b), "--seed", "9"])
    main(["generate", "--config", str(cfg), "--out", str(c), "--seed", "9"])
    assert a.read_bytes() != b.read_bytes()
    assert b.read_bytes() == c.read_bytes()


def test_exit_code_config_error(workdir):
    tmp, _ = workdir
    bad = tmp / "bad.cfg"
    bad.write_text("nonsense_key=1\n")
    assert main(["generate", "--config", str(bad), "--out", str(tmp / "x.txt")]) == 2


def test_exit_code_missing_ckpt_in(workdir):
    tmp, cfg = workdir
    data = tmp / "data.txt"
    main(["generate", "--config", str(cfg), "--out", str(data)])
    assert main(["finetune", "--config", str(cfg), "--data", str(data),
                 "--ckpt-out", str(tmp / "f.ckpt")]) == 2


def test_exit_code_data_error(workdir):
    tmp, cfg = workdir
    assert main(["pretrain", "--config", str(cfg), "--data", str(tmp / "absent.txt"),
                 "--ckpt-out", str(tmp / "p.ckpt")]) == 3


def test_exit_code_corrupt_checkpoint(workdir):
    tmp, cfg = workdir
    data = tmp / "data.txt"
    main(["generate", "--config", str(cfg), "--out", str(data)])
    bad = tmp / "bad.ckpt"
    bad.write_bytes(b"NOTMAGIC" + b"\x00" * 64)
    assert main(["finetune", "--config", str(cfg), "--data", str(data),
                 "--ckpt-in", str(bad), "--ckpt-out", str(tmp / "o.ckpt")]) == 3
