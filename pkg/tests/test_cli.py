import json

import pytest

from robustq.checkpoint import load_checkpoint
from robustq.cli import build_parser, main
from robustq.records import read_metrics

TINY = ["--synthetic-n", "32", "--seed", "3"]
TINY_TRAIN = TINY + [
    "--blocks", "1,1", "--widths", "2,3", "--batch-size", "16", "--pgd-iters", "1", "--iters", "2",
    "--quant", "ternary", "--cutoff", "1", "--workers", "1",
]


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    assert main(["train", *TINY_TRAIN, "--epochs", "2", "--out-dir", str(out)]) == 0
    return out


def test_train_writes_run_outputs(trained):
    assert [row.epoch for row in read_metrics(trained / "metrics.csv")] == [1, 2]
    ckpt = load_checkpoint(trained / "final.ckpt")
    assert ckpt.epoch == 2 and ckpt.quant is not None
    assert ckpt.config["quant_variant"] == "ternary"
    manifest = json.loads((trained / "manifest.json").read_text())
    assert manifest["command"] == "train"
    assert set(manifest["artifacts"]) == {"metrics.csv", "final.ckpt"}


def test_resume_continues_to_more_epochs(trained, tmp_path):
    argv = ["train", *TINY_TRAIN, "--epochs", "3", "--resume", str(trained / "final.ckpt"), "--out-dir", str(tmp_path)]
    assert main(argv) == 0
    assert [row.epoch for row in read_metrics(tmp_path / "metrics.csv")] == [3]
    assert load_checkpoint(tmp_path / "final.ckpt").epoch == 3


@pytest.mark.parametrize("extra", [["--method", "all"], ["--method", "pgd"], ["--weights", "float", "--method", "fgsm"]])
def test_attack_reports_accuracies(trained, tmp_path, extra):
    argv = ["attack", "--checkpoint", str(trained / "final.ckpt"), *TINY, "--iters", "2", "--cw-iters", "2",
            "--workers", "1", "--out-dir", str(tmp_path), *extra]
    assert main(argv) == 0
    result = json.loads((tmp_path / "attack.json").read_text())
    assert "natural" in result["accuracy"]
    for value in result["accuracy"].values():
        assert 0.0 <= value <= 1.0


def test_analyze_writes_sparsity_and_bound(trained, tmp_path):
    assert main(["analyze", "--checkpoint", str(trained / "final.ckpt"), "--out-dir", str(tmp_path)]) == 0
    sparsity = (tmp_path / "sparsity.csv").read_text().splitlines()
    assert sparsity[0].startswith("layer,weights,zeros")
    assert len(sparsity) > 1
    bound = (tmp_path / "bound.csv").read_text().splitlines()
    assert bound[0] == "epoch,M_t,M" and len(bound) == 3


def test_prune_keeps_logits(trained, tmp_path):
    output = tmp_path / "small.ckpt"
    assert main(["prune", "--checkpoint", str(trained / "final.ckpt"), "--output", str(output),
                 "--check", "8", "--out-dir", str(tmp_path)]) == 0
    pruned = load_checkpoint(output)
    assert pruned.epoch == 2
    for name, array in pruned.quant.u.items():
        assert array.shape == pruned.weights[name].shape


def test_verify_proposition_one(tmp_path):
    assert main(["verify", "--prop", "1", "--trials", "20", "--family", "all", "--out-dir", str(tmp_path)]) == 0
    [report] = json.loads((tmp_path / "verify-prop1.json").read_text())
    assert report["passed"] and report["violations"] == 0


def test_verify_proposition_two(tmp_path):
    assert main(["verify", "--prop", "2", "--trials", "20", "--loss", "hinge", "--out-dir", str(tmp_path)]) == 0
    [report] = json.loads((tmp_path / "verify-prop2.json").read_text())
    assert report["proposition"] == 2 and report["passed"]


def test_data_export(tmp_path):
    assert main(["data", "--synthetic", "moons", "--synthetic-n", "16", "--export", "--out-dir", str(tmp_path)]) == 0
    assert (tmp_path / "moons-train.npz").exists()
    assert (tmp_path / "moons-test.npz").exists()


def test_config_file_sets_defaults_and_flags_win(tmp_path):
    config = tmp_path / "run.cfg"
    config.write_text("synthetic = moons\nsynthetic_n = 40\n", encoding="utf-8")
    assert main(["data", "--config", str(config), "--synthetic-n", "8", "--out-dir", str(tmp_path)]) == 0
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["config"]["synthetic"] == "moons"
    assert manifest["config"]["synthetic_n"] == 8


def test_corrupt_checkpoint_fails_cleanly(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"not a checkpoint")
    assert main(["analyze", "--checkpoint", str(bad), "--out-dir", str(tmp_path)]) == 1
    assert main(["analyze", "--checkpoint", str(tmp_path / "missing.ckpt"), "--out-dir", str(tmp_path)]) == 1


def test_bad_config_file_fails_cleanly(tmp_path):
    config = tmp_path / "run.cfg"
    config.write_text("colour = red\n", encoding="utf-8")
    assert main(["data", "--config", str(config), "--out-dir", str(tmp_path)]) == 1


def test_parser_requires_a_command():
    with pytest.raises(SystemExit):
        build_parser().parse_args([])


@pytest.mark.slow
def test_mnist_training_smoke(mnist_dir, tmp_path):
    argv = ["train", "--data-dir", str(mnist_dir), "--train-limit", "256", "--eval-limit", "64", "--epochs", "1",
            "--batch-size", "64", "--pgd-iters", "2", "--iters", "2", "--out-dir", str(tmp_path)]
    assert main(argv) == 0
    [row] = read_metrics(tmp_path / "metrics.csv")
    assert row.N is not None
