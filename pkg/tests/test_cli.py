import argparse
import csv
import io

import pytest

from crossvit.checkpoint import load_checkpoint
from crossvit.cli import build_parser, main, resolve_configs

DATA = "synth:n=8,classes=3,side=8,seed=0"


def _resolve(argv):
    args = build_parser().parse_args(argv)
    return resolve_configs(args)


def _run(argv, capsys):
    code = main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture
def trained(tmp_path, capsys):
    code, out, _ = _run(["train", "--preset", "micro", "--epochs", "2", "--warmup-epochs", "1", "--batch-size", "4",
                         "--dataset", DATA, "--out-dir", str(tmp_path / "run")], capsys)
    assert code == 0 and "acc_ensemble=" in out
    return tmp_path / "run"


def test_train_writes_outputs(trained):
    assert {p.name for p in trained.iterdir()} == {"metrics.csv", "final.crvt", "best.crvt"}
    rows = list(csv.reader(io.StringIO((trained / "metrics.csv").read_text())))
    assert rows[0] == ["epoch", "lr", "train_loss", "train_acc", "acc_l", "acc_s", "acc_ensemble"]
    assert len(rows) == 3


def test_eval_and_dump(trained, tmp_path, capsys):
    dump = tmp_path / "logits.csv"
    code, out, _ = _run(["eval", "--checkpoint", str(trained / "final.crvt"), "--dataset", DATA,
                         "--dump-logits", str(dump)], capsys)
    assert code == 0 and out.startswith("n=8 ")
    assert len(dump.read_text().splitlines()) == 9


def test_adapt_res(trained, tmp_path, capsys):
    out_path = tmp_path / "big.crvt"
    code, out, _ = _run(["adapt-res", "--checkpoint", str(trained / "final.crvt"), "--side", "16", "--out", str(out_path)], capsys)
    assert code == 0
    params, cfg = load_checkpoint(out_path)
    assert cfg.base_input_side == 16 and params.large.embed.pos_embed.shape == (1 + 16, 16)


def test_adapt_res_bad_side(trained, tmp_path, capsys):
    code, _, err = _run(["adapt-res", "--checkpoint", str(trained / "final.crvt"), "--side", "10",
                         "--out", str(tmp_path / "x.crvt")], capsys)
    assert code == 2 and "divisible" in err


def test_analyze_text(capsys):
    code, out, _ = _run(["analyze", "--preset", "s"], capsys)
    assert code == 0 and "total" in out and "attention entries per fusion pass" in out and "note:" in out


def test_analyze_csv(capsys):
    code, out, err = _run(["analyze", "--preset", "micro", "--csv", "-"], capsys)
    lines = out.splitlines()
    assert code == 0 and lines[0] == "component,param_count,flops,attn_entries" and lines[-1].startswith("total,")
    assert "preprocessing" in err


def test_gradcheck_command(tmp_path, capsys):
    cfg = tmp_path / "tiny.ini"
    cfg.write_text(
        "[model]\nencoders = 1\nnum_classes = 2\nbase_input_side = 4\n"
        "[model.large]\npatch_size = 4\nembed_dim = 4\nblocks = 1\nheads = 1\n"
        "[model.small]\npatch_size = 2\nembed_dim = 4\nblocks = 1\nheads = 1\n"
    )
    code, out, _ = _run(["gradcheck", "--config", str(cfg)], capsys)
    assert code == 0 and "PASS" in out


def test_synth(tmp_path, capsys):
    code, out, _ = _run(["synth", "--n", "6", "--classes", "3", "--side", "8", "--out", str(tmp_path / "d.npz")], capsys)
    assert code == 0 and (tmp_path / "d.npz").exists()


def test_override_precedence(tmp_path):
    path = tmp_path / "c.ini"
    path.write_text("[model]\nnum_classes = 4\nfusion = pairwise\n[train]\nepochs = 9\nbase_lr = 0.5\n")
    model, train = _resolve(["train", "--preset", "micro", "--config", str(path)])
    assert (model.num_classes, model.fusion.value, train.epochs, train.base_lr) == (4, "pairwise", 9, 0.5)
    model, train = _resolve(["train", "--preset", "micro", "--config", str(path), "--num-classes", "6", "--epochs", "3", "--warmup-epochs", "0"])
    assert (model.num_classes, train.epochs) == (6, 3)
    model, train = _resolve(["train", "--preset", "micro", "--config", str(path), "--num-classes", "6",
                             "--set", "model.num_classes=7", "--set", "train.epochs=2", "--set", "train.warmup_epochs=1"])
    assert (model.num_classes, train.epochs) == (7, 2)


def test_set_branch_key():
    model, _ = _resolve(["analyze", "--preset", "overfit", "--set", "model.small.embed_dim=48", "--set", "model.small.heads=3"])
    assert (model.small.embed_dim, model.small.heads) == (48, 3)


def test_full_config_without_preset(tmp_path):
    path = tmp_path / "c.ini"
    path.write_text("[model.large]\npatch_size = 8\nembed_dim = 8\nblocks = 1\nheads = 2\n"
                    "[model.small]\npatch_size = 4\nembed_dim = 4\nblocks = 1\nheads = 1\n[model]\nbase_input_side = 16\n")
    model, _ = _resolve(["analyze", "--config", str(path)])
    assert (model.large.embed_dim, model.base_input_side, model.num_classes) == (8, 16, 1000)


def test_config_errors_exit_2(capsys):
    code, _, err = _run(["analyze", "--preset", "micro", "--set", "model.encoders=zero"], capsys)
    assert code == 2 and "model.encoders" in err
    code, _, err = _run(["analyze", "--preset", "micro", "--set", "encoders=1"], capsys)
    assert code == 2 and "section" in err


def test_thread_limit_env(monkeypatch, capsys):
    monkeypatch.setenv("CRVT_THREADS", "1")
    code, _, _ = _run(["analyze", "--preset", "micro"], capsys)
    assert code == 0


def test_subcommand_required():
    with pytest.raises(SystemExit):
        build_parser().parse_args([])
    assert isinstance(build_parser(), argparse.ArgumentParser)
