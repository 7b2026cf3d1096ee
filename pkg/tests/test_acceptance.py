"""Desk-scale MNIST runs of the quantized robust training recipe.

Every test here trains for the full schedule and is skipped unless
ROBUSTQ_MNIST_DIR points at the IDX files.
"""

import os
from pathlib import Path

import numpy as np
import pytest

from robustq.checkpoint import load_checkpoint, save_checkpoint
from robustq.config import RunConfig
from robustq.data import load_mnist_dir
from robustq.nets import build_network
from robustq.robust_train import TrainingSession
from robustq.sparsity import channel_sparsity, sparsity_report

pytestmark = pytest.mark.slow

TIE = 0.005


@pytest.fixture(scope="module")
def mnist():
    directory = Path(os.environ["ROBUSTQ_MNIST_DIR"])
    return load_mnist_dir(directory, "train"), load_mnist_dir(directory, "test")


def run_config(**overrides) -> RunConfig:
    settings = dict(quant_variant="binary", quant_algorithm="br", loss="tradeoff", alpha=1.0, beta=1.0,
                    epochs=20, eval_every=0)
    settings.update(overrides)
    return RunConfig(**settings)


def start(cfg: RunConfig, train) -> TrainingSession:
    net = build_network(cfg.network_spec(train.input_shape, 10), cfg.seed)
    return TrainingSession.start(net, cfg.train_config())


def train_run(cfg: RunConfig, mnist) -> TrainingSession:
    train, test = mnist
    session = start(cfg, train)
    session.run(train, test)
    return session


@pytest.fixture(scope="module")
def binary_tradeoff(mnist):
    return train_run(run_config(), mnist)


@pytest.fixture(scope="module")
def natural_twin(mnist):
    return train_run(run_config(loss="natural"), mnist)


def test_binary_tradeoff_run_is_accurate_and_robust(binary_tradeoff):
    assert binary_tradeoff.net.parameter_count() <= 100_000
    table = binary_tradeoff.last_table
    assert table.natural >= 0.97
    assert table.ifgsm >= 0.90


def test_robust_training_beats_natural_training_under_attack(binary_tradeoff, natural_twin):
    assert binary_tradeoff.last_table.ifgsm - natural_twin.last_table.ifgsm >= 0.20
    for session in (binary_tradeoff, natural_twin):
        table = session.last_table
        assert table.ifgsm <= table.fgsm + TIE
        assert table.fgsm <= table.natural + TIE


def test_tradeoff_loss_keeps_ternary_nets_at_least_as_channel_sparse(mnist):
    tradeoff = train_run(run_config(quant_variant="ternary", beta=8.0), mnist)
    adversarial = train_run(run_config(quant_variant="ternary", loss="adversarial"), mnist)
    assert channel_sparsity(tradeoff.net).fraction >= channel_sparsity(adversarial.net).fraction
    for session in (tradeoff, adversarial):
        assert sparsity_report(session.net).weight_sparsity >= 0.3


def test_layer_magnitude_bound_stays_small(binary_tradeoff):
    trace = binary_tradeoff.trace
    assert len(trace.values) == 20
    assert trace.M < 10.0
    running = trace.running
    assert all(later >= earlier for earlier, later in zip(running, running[1:]))


def test_same_seed_reproduces_accuracy_table(binary_tradeoff, mnist):
    again = train_run(run_config(), mnist)
    assert again.last_table == binary_tradeoff.last_table


def test_midpoint_resume_reproduces_uninterrupted_run(binary_tradeoff, mnist, tmp_path):
    train, test = mnist
    cfg = run_config()
    first = start(cfg, train)
    for _ in range(cfg.epochs // 2):
        first.run_epoch(train)
    path = tmp_path / "midpoint.ckpt"
    save_checkpoint(path, first.checkpoint())
    resumed = TrainingSession.resume(load_checkpoint(path), cfg.train_config())
    resumed.run(train, test)
    assert resumed.last_table == binary_tradeoff.last_table
    for name, array in binary_tradeoff.net.weights.items():
        assert np.array_equal(resumed.net.weights[name], array), name
