"""Training objectives and the epoch loop tying them to the quantizer schedule.

Objectives return scalar tape tensors. Adversarial inputs are generated with
the network's current (grid) weights held constant; the loss itself is then
evaluated with whatever ``params`` the caller supplies, normally tape
variables for every registry entry so one backward pass yields all gradients.
"""

from __future__ import annotations

import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .attacks import AttackConfig, PGDConfig, cw_linf, fgsm, ifgsm, pgd
from .autodiff import Tape, Tensor
from .checkpoint import Checkpoint, save_checkpoint
from .data import DatasetHandle
from .errors import ContractError, NonFiniteError
from .nets import Network, forward
from .quantizer import QuantConfig, QuantState, quant_step
from .records import MetricsRow, append_metrics
from .sparsity import BoundTrace, channel_sparsity, track_M, weight_sparsity

logger = logging.getLogger(__name__)

LOSS_VARIANTS = ("natural", "adversarial", "trades", "tradeoff")
DIVERGENCES = ("kl", "soft_ce")
ATTACK_SUITE = ("fgsm", "ifgsm", "cw")
ASCENT_TOLERANCE = 1e-6

Batch = Tuple[np.ndarray, np.ndarray]


@dataclass
class LossSpec:
    """Which objective to minimize.

    ``tradeoff`` is ``alpha * natural + beta * adversarial``; ``trades`` is
    ``natural + beta * divergence(f(x), f(x_adv))``.
    """

    variant: str = "tradeoff"
    alpha: float = 1.0
    beta: float = 1.0
    pgd: PGDConfig = field(default_factory=PGDConfig)
    divergence: str = "kl"

    def __post_init__(self):
        if self.variant not in LOSS_VARIANTS:
            raise ContractError(f"loss variant must be one of {LOSS_VARIANTS}, got {self.variant!r}")
        if self.alpha < 0 or self.beta < 0:
            raise ContractError(f"alpha and beta must be >= 0, got {self.alpha}, {self.beta}")
        if self.divergence not in DIVERGENCES:
            raise ContractError(f"divergence must be one of {DIVERGENCES}")


@dataclass
class LossParts:
    total: Tensor
    natural: Optional[float] = None
    robust: Optional[float] = None


def _logits(net, x, params, mode, rng, batch_stats):
    return forward(net, x, mode=mode, rng=rng, params=params, batch_stats=batch_stats)


def natural_loss(net: Network, batch: Batch, *, params: Optional[Mapping[str, Tensor]] = None,
                 mode: str = "eval", rng: Optional[np.random.Generator] = None,
                 batch_stats: bool = False) -> Tensor:
    """Mean cross-entropy on clean inputs."""
    x, y = batch
    return ad.softmax_cross_entropy(_logits(net, x, params, mode, rng, batch_stats), y)


def adversarial_loss(net: Network, batch: Batch, pgd_cfg: PGDConfig, rng: np.random.Generator, *,
                     params: Optional[Mapping[str, Tensor]] = None, mode: str = "eval",
                     batch_stats: bool = False) -> Tensor:
    """Mean cross-entropy at the PGD maximizer inside the eps-ball."""
    x, y = batch
    x_adv = pgd(net, x, y, pgd_cfg.eps, pgd_cfg.step, pgd_cfg.iters, rng,
                mode=pgd_cfg.mode, lo=pgd_cfg.lo, hi=pgd_cfg.hi)
    return ad.softmax_cross_entropy(_logits(net, x_adv, params, mode, rng, batch_stats), y)


def _divergence(kind: str, clean: Tensor, adv: Tensor) -> Tensor:
    if kind == "kl":
        return ad.kl_divergence(clean, adv)
    return ad.soft_cross_entropy(clean, adv)


def trades_parts(net: Network, batch: Batch, beta: float, pgd_cfg: PGDConfig, rng: np.random.Generator, *,
                 divergence: str = "kl", params: Optional[Mapping[str, Tensor]] = None,
                 mode: str = "eval", batch_stats: bool = False) -> LossParts:
    x, y = batch
    clean = _logits(net, x, params, mode, rng, batch_stats)
    nat = ad.softmax_cross_entropy(clean, y)
    x_adv = pgd(net, x, y, pgd_cfg.eps, pgd_cfg.step, pgd_cfg.iters, rng,
                objective="kl", mode=pgd_cfg.mode, lo=pgd_cfg.lo, hi=pgd_cfg.hi)
    adv = _logits(net, x_adv, params, mode, rng, batch_stats)
    rob = _divergence(divergence, clean, adv)
    total = ad.add(nat, ad.mul_scalar(rob, beta))
    return LossParts(total, nat.item(), rob.item())


def trades_loss(net: Network, batch: Batch, beta: float, pgd_cfg: PGDConfig, rng: np.random.Generator,
                **kwargs) -> Tensor:
    """Natural cross-entropy plus ``beta`` times the divergence between clean
    and adversarial predictions, the adversary ascending that divergence."""
    return trades_parts(net, batch, beta, pgd_cfg, rng, **kwargs).total


def tradeoff_parts(net: Network, batch: Batch, alpha: float, beta: float, pgd_cfg: PGDConfig,
                   rng: np.random.Generator, *, params: Optional[Mapping[str, Tensor]] = None,
                   mode: str = "eval", batch_stats: bool = False) -> LossParts:
    # adversarial term first so the rng stream matches adversarial_loss
    rob = adversarial_loss(net, batch, pgd_cfg, rng, params=params, mode=mode, batch_stats=batch_stats)
    nat = natural_loss(net, batch, params=params, mode=mode, rng=rng, batch_stats=batch_stats)
    total = ad.add(ad.mul_scalar(nat, alpha), ad.mul_scalar(rob, beta))
    return LossParts(total, nat.item(), rob.item())


def tradeoff_loss(net: Network, batch: Batch, alpha: float, beta: float, pgd_cfg: PGDConfig,
                  rng: np.random.Generator, **kwargs) -> Tensor:
    """alpha * natural_loss + beta * adversarial_loss."""
    return tradeoff_parts(net, batch, alpha, beta, pgd_cfg, rng, **kwargs).total


def compute_loss(net: Network, batch: Batch, spec: LossSpec, rng: np.random.Generator, *,
                 params: Optional[Mapping[str, Tensor]] = None, mode: str = "eval",
                 batch_stats: bool = False) -> LossParts:
    """Evaluate the objective named by ``spec``."""
    kwargs = dict(params=params, mode=mode, batch_stats=batch_stats)
    if spec.variant == "natural":
        loss = natural_loss(net, batch, rng=rng, **kwargs)
        return LossParts(loss, natural=loss.item())
    if spec.variant == "adversarial":
        loss = adversarial_loss(net, batch, spec.pgd, rng, **kwargs)
        return LossParts(loss, robust=loss.item())
    if spec.variant == "trades":
        return trades_parts(net, batch, spec.beta, spec.pgd, rng, divergence=spec.divergence, **kwargs)
    return tradeoff_parts(net, batch, spec.alpha, spec.beta, spec.pgd, rng, **kwargs)


class SGD:
    """Momentum SGD producing update directions.

    Weight decay applies only to ``.weight`` arrays (conv and classifier), and
    for quantized layers to the shadow weights the caller passes in.
    """

    def __init__(self, momentum: float = 0.9, weight_decay: float = 5e-4):
        if momentum < 0 or weight_decay < 0:
            raise ContractError("momentum and weight decay must be >= 0")
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers: Dict[str, np.ndarray] = {}

    def direction(self, name: str, grad: np.ndarray, weight: np.ndarray) -> np.ndarray:
        d = grad + self.weight_decay * weight if name.endswith(".weight") and self.weight_decay else grad
        if self.momentum:
            previous = self.buffers.get(name)
            d = d if previous is None else self.momentum * previous + d
            self.buffers[name] = d
        return d

    def step(self, weights: Dict[str, np.ndarray], grads: Mapping[str, np.ndarray], lr: float,
             names: Sequence[str]) -> None:
        """In-place descent on the float parameters ``names``."""
        for name in names:
            weights[name] = weights[name] - lr * self.direction(name, grads[name], weights[name])


@dataclass
class TrainConfig:
    """Settings of a training run.

    Args:
        epochs: Number of passes over the training set.
        batch_size: Mini-batch size.
        lr: Initial learning rate.
        milestones: Epochs at which the learning rate is multiplied by ``lr_decay``.
        train_limit: Use only the first samples of the training set.
        eval_limit: Use only the first samples of the test set.
        eval_every: Evaluate every this many epochs (0 disables, the last epoch always evaluates).
        checkpoint_every: Write a checkpoint every this many epochs (0: final only).
        eval_cw: Include the margin attack in evaluations.
        workers: Evaluation threads; None uses two thirds of the cores.
    """

    epochs: int = 20
    batch_size: int = 128
    lr: float = 0.1
    milestones: Tuple[int, ...] = ()
    lr_decay: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    quant: QuantConfig = field(default_factory=QuantConfig)
    loss: LossSpec = field(default_factory=LossSpec)
    attack: AttackConfig = field(default_factory=AttackConfig)
    train_limit: Optional[int] = None
    eval_limit: Optional[int] = None
    eval_every: int = 1
    checkpoint_every: int = 0
    eval_cw: bool = False
    workers: Optional[int] = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ContractError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ContractError(f"batch size must be >= 1, got {self.batch_size}")
        if self.lr <= 0:
            raise ContractError("learning rate must be positive")

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.lr_decay ** sum(1 for m in self.milestones if epoch >= m)

    @property
    def suite(self) -> Tuple[str, ...]:
        return ATTACK_SUITE if self.eval_cw else ATTACK_SUITE[:2]


@dataclass
class EpochMetrics:
    epoch: int
    loss: float
    M_t: float
    lam: float
    seconds: float
    batches: int
    ascent_violations: int = 0


def train_epoch(net: Network, state: QuantState, data: DatasetHandle, loss_spec: LossSpec, cfg: TrainConfig,
                rng: np.random.Generator, optimizer: Optional[SGD] = None) -> Tuple[QuantState, EpochMetrics]:
    """One pass over ``data``: forward at u, backward, SGD on float parameters and
    a quantizer step on the shadow weights.

    Returns the advanced schedule state (epoch incremented) and the epoch metrics.
    """
    if len(data) == 0:
        raise ContractError("cannot train on an empty dataset")
    if data.input_shape != net.spec.input_shape:
        raise ContractError(f"data shape {data.input_shape} does not match network input {net.spec.input_shape}")
    optimizer = optimizer or SGD(cfg.momentum, cfg.weight_decay)
    lr = cfg.lr_at(state.epoch)
    started = time.perf_counter()
    losses: List[float] = []
    violations = 0

    for x, y in data.batches(cfg.batch_size, rng.permutation(len(data))):
        state.apply_to(net)
        tape = Tape()
        params = {name: tape.variable(array) for name, array in net.weights.items()}
        parts = compute_loss(net, (x, y), loss_spec, rng, params=params, mode="train", batch_stats=True)
        value = parts.total.item()
        if not math.isfinite(value):
            raise NonFiniteError(f"non-finite loss {value} at epoch {state.epoch}, batch {len(losses)}")
        if parts.natural is not None and parts.robust is not None and loss_spec.variant == "tradeoff":
            if parts.robust < parts.natural - ASCENT_TOLERANCE:
                violations += 1
                logger.debug(f"adversarial loss {parts.robust:.4f} below natural {parts.natural:.4f}")
        grads = tape.gradient(parts.total, params)

        optimizer.step(net.weights, grads, lr, state.float_params)
        directions = {name: optimizer.direction(name, grads[name], state.w[name]) for name in state.w}
        state = quant_step(state, directions, lr)
        losses.append(value)

    state.apply_to(net)
    state = replace(state, epoch=state.epoch + 1)
    trace = track_M(net, BoundTrace())
    metrics = EpochMetrics(
        epoch=state.epoch,
        loss=float(np.mean(losses)),
        M_t=trace.M,
        lam=state.lam,
        seconds=time.perf_counter() - started,
        batches=len(losses),
        ascent_violations=violations,
    )
    if violations:
        logger.warning(f"epoch {state.epoch}: adversarial loss fell below natural loss on {violations} batches")
    logger.info(f"epoch {metrics.epoch}: loss {metrics.loss:.4f}, M_t {metrics.M_t:.4f}, "
                f"lambda {metrics.lam:.4g}, {metrics.seconds:.1f}s")
    return state, metrics


@dataclass
class AccuracyTable:
    """Clean accuracy and accuracy under each attack, all in [0, 1]."""

    count: int
    natural: float
    fgsm: Optional[float] = None
    ifgsm: Optional[float] = None
    cw: Optional[float] = None

    def as_dict(self) -> Dict[str, Optional[float]]:
        return {"N": self.natural, "A1": self.fgsm, "A2": self.ifgsm, "A3": self.cw}


def default_workers() -> int:
    """floor(2/3 of the cores), at least one."""
    return max(1, math.floor((2 / 3) * (os.cpu_count() or 1)))


def _score_batch(net: Network, x: np.ndarray, y: np.ndarray, suite: Sequence[str],
                 cfg: AttackConfig) -> Dict[str, int]:
    def correct(inputs):
        return int(np.sum(forward(net, inputs, mode="eval").data.argmax(axis=1) == y))

    scores = {"natural": correct(x)}
    if "fgsm" in suite:
        scores["fgsm"] = correct(fgsm(net, x, y, cfg.eps, cfg.lo, cfg.hi))
    if "ifgsm" in suite:
        scores["ifgsm"] = correct(ifgsm(net, x, y, cfg))
    if "cw" in suite:
        scores["cw"] = correct(cw_linf(net, x, y, cfg))
    return scores


def evaluate(net: Network, data: DatasetHandle, suite: Sequence[str] = ATTACK_SUITE,
             cfg: Optional[AttackConfig] = None, batch_size: int = 256,
             workers: Optional[int] = None) -> AccuracyTable:
    """Accuracy of ``net`` as loaded (normally the grid weights) on clean and attacked inputs.

    Batches are scored concurrently; the network is only read.
    """
    if len(data) == 0:
        raise ContractError("cannot evaluate on an empty dataset")
    unknown = set(suite) - set(ATTACK_SUITE)
    if unknown:
        raise ContractError(f"unknown attacks in suite: {sorted(unknown)}")
    cfg = cfg or AttackConfig()
    workers = workers or default_workers()
    batches = list(data.batches(batch_size))
    with ThreadPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(lambda b: _score_batch(net, b[0], b[1], suite, cfg), batches))
    totals = {key: sum(r[key] for r in results) for key in results[0]}
    n = len(data)
    table = AccuracyTable(
        count=n,
        natural=totals["natural"] / n,
        fgsm=totals["fgsm"] / n if "fgsm" in totals else None,
        ifgsm=totals["ifgsm"] / n if "ifgsm" in totals else None,
        cw=totals["cw"] / n if "cw" in totals else None,
    )
    logger.info(f"evaluated {n} samples with {workers} workers: {table.as_dict()}")
    return table


class TrainingSession:
    """A resumable training run: network, schedule state, optimizer, rng and bound trace."""

    def __init__(self, net: Network, state: QuantState, cfg: TrainConfig, rng: np.random.Generator,
                 optimizer: Optional[SGD] = None, trace: Optional[BoundTrace] = None,
                 config_record: Optional[dict] = None, config_digest: str = ""):
        self.net = net
        self.state = state
        self.cfg = cfg
        self.rng = rng
        self.optimizer = optimizer or SGD(cfg.momentum, cfg.weight_decay)
        self.trace = trace or BoundTrace()
        self.config_record = config_record or {}
        self.config_digest = config_digest
        self.last_table: Optional[AccuracyTable] = None

    @classmethod
    def start(cls, net: Network, cfg: TrainConfig, **kwargs) -> "TrainingSession":
        state = QuantState.from_network(net, cfg.quant, cfg.epochs)
        return cls(net, state, cfg, np.random.default_rng(cfg.seed), **kwargs)

    @classmethod
    def resume(cls, ckpt, cfg: TrainConfig, **kwargs) -> "TrainingSession":
        if ckpt.quant is None:
            raise ContractError("checkpoint carries no quantizer state to resume from")
        optimizer = SGD(cfg.momentum, cfg.weight_decay)
        optimizer.buffers = {k: v.copy() for k, v in ckpt.momentum.items()}
        return cls(ckpt.network(), ckpt.quant, cfg, ckpt.rng(), optimizer=optimizer, trace=ckpt.trace, **kwargs)

    @property
    def epoch(self) -> int:
        return self.state.epoch

    def checkpoint(self) -> Checkpoint:
        return Checkpoint.from_network(
            self.net,
            quant=self.state,
            momentum={k: v.copy() for k, v in self.optimizer.buffers.items()},
            rng_state=self.rng.bit_generator.state,
            trace=self.trace,
            config=self.config_record,
            config_digest=self.config_digest,
            epoch=self.state.epoch,
        )

    def run_epoch(self, train: DatasetHandle, test: Optional[DatasetHandle] = None):
        """Train one epoch, update the bound trace and evaluate when due; returns a MetricsRow."""
        self.state, metrics = train_epoch(self.net, self.state, train.subset(self.cfg.train_limit),
                                          self.cfg.loss, self.cfg, self.rng, self.optimizer)
        self.trace = track_M(self.net, self.trace)
        table = None
        due = self.cfg.eval_every and self.state.epoch % self.cfg.eval_every == 0
        if test is not None and (due or self.state.epoch == self.cfg.epochs):
            table = evaluate(self.net, test.subset(self.cfg.eval_limit), self.cfg.suite, self.cfg.attack,
                             workers=self.cfg.workers)
            self.last_table = table
        weights = {conv.weight_name: self.net.weights[conv.weight_name] for conv in self.net.conv_layers}
        return MetricsRow(
            epoch=metrics.epoch,
            loss=metrics.loss,
            N=table.natural if table else None,
            A1=table.fgsm if table else None,
            A2=table.ifgsm if table else None,
            A3=table.cw if table else None,
            M_t=metrics.M_t,
            lam=metrics.lam,
            weight_sparsity=weight_sparsity(weights) if weights else 0.0,
            channel_sparsity=channel_sparsity(self.net).fraction,
            seconds=metrics.seconds,
        )

    def run(self, train: DatasetHandle, test: Optional[DatasetHandle] = None, out_dir: Optional[Path] = None,
            on_epoch: Optional[Callable] = None) -> List:
        """Train until ``cfg.epochs``, writing metrics and checkpoints under ``out_dir``."""
        rows = []
        while self.state.epoch < self.cfg.epochs:
            row = self.run_epoch(train, test)
            rows.append(row)
            if out_dir is not None:
                append_metrics(Path(out_dir) / "metrics.csv", row)
                every = self.cfg.checkpoint_every
                if every and self.state.epoch % every == 0 and self.state.epoch < self.cfg.epochs:
                    save_checkpoint(Path(out_dir) / f"epoch-{self.state.epoch:03d}.ckpt", self.checkpoint())
            if on_epoch is not None:
                on_epoch(row)
        if out_dir is not None:
            save_checkpoint(Path(out_dir) / "final.ckpt", self.checkpoint())
        if not self.trace.stable_tail():
            logger.info(f"running bound M still moved in the final quarter of training (M = {self.trace.M:.4f})")
        return rows
