import pytest

from robustq.config import RunConfig, coerce, read_config_file, resolve
from robustq.errors import ContractError, FormatError


@pytest.mark.parametrize("key, raw, expected", [
    ("epochs", " 12 ", 12),
    ("lr", "0.05", 0.05),
    ("widths", "8, 16,32", (8, 16, 32)),
    ("milestones", "", ()),
    ("normalize", "yes", True),
    ("exempt_last", "off", False),
    ("cutoff", "none", None),
    ("cutoff", "3", 3),
    ("data_dir", "/data/mnist", "/data/mnist"),
])
def test_coerce(key, raw, expected):
    assert coerce(key, raw) == expected


@pytest.mark.parametrize("key, raw", [("epochs", "many"), ("normalize", "maybe"), ("colour", "red")])
def test_coerce_rejects_bad_values(key, raw):
    with pytest.raises(FormatError):
        coerce(key, raw)


def test_config_file_with_comments(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text(
        "# a ternary run\n"
        "\n"
        "quant_variant = ternary   # exact projection\n"
        "widths = 4,8\n"
        "epochs=3\n",
        encoding="utf-8",
    )
    assert read_config_file(path) == {"quant_variant": "ternary", "widths": (4, 8), "epochs": 3}


@pytest.mark.parametrize("line", ["colour = red", "epochs 3"])
def test_config_file_errors_name_the_line(tmp_path, line):
    path = tmp_path / "run.cfg"
    path.write_text(f"seed = 1\n{line}\n", encoding="utf-8")
    with pytest.raises(FormatError, match=":2:"):
        read_config_file(path)


def test_precedence_defaults_file_flags(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("epochs = 3\nlr = 0.5\n", encoding="utf-8")
    cfg = resolve(path, {"lr": 0.01, "beta": None, "widths": [2, 4]})
    assert cfg.epochs == 3
    assert cfg.lr == 0.01
    assert cfg.beta == RunConfig().beta
    assert cfg.widths == (2, 4)


def test_unknown_override():
    with pytest.raises(ContractError):
        resolve(None, {"colour": "red"})


def test_digest_depends_only_on_values():
    assert RunConfig().digest() == resolve().digest()
    assert RunConfig(seed=1).digest() != RunConfig().digest()
    assert len(RunConfig().digest()) == 64


def test_canonical_text_is_sorted():
    keys = [line.split("=", 1)[0] for line in RunConfig().canonical_text().splitlines()]
    assert keys == sorted(keys)


def test_derived_configs():
    cfg = RunConfig(quant_variant="ternary", cutoff=2, loss="trades", pgd_iters=3, epochs=4)
    train = cfg.train_config()
    assert train.quant.variant == "ternary" and train.quant.cutoff == 2
    assert train.loss.variant == "trades" and train.loss.pgd.iters == 3
    assert train.attack.eps == cfg.eps
    spec = cfg.network_spec((1, 6, 6), 3, mean=0.5, std=0.25)
    assert spec.input_mean is None
    assert RunConfig(normalize=True).network_spec((1, 6, 6), 3, 0.5, 0.25).input_std == 0.25
