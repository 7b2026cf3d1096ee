"""White-box l-infinity attacks on a ``Network``.

All attacks differentiate the loss with respect to the input in pixel space,
keep the result inside the eps-ball around ``x`` and inside ``[lo, hi]``, and
never modify ``x`` in place.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .errors import AttackError, ContractError
from .nets import Network, forward

logger = logging.getLogger(__name__)

METHODS = ("fgsm", "ifgsm", "cw", "pgd")
OBJECTIVES = ("ce", "kl")


@dataclass
class AttackConfig:
    """Evaluation attack settings.

    Args:
        eps: l-infinity budget.
        alpha: Per-iteration step of the iterative sign attack.
        iters: Iterations of the iterative sign attack.
        cw_lr: Step size of the margin attack.
        cw_iters: Iterations of the margin attack.
        kappa: Confidence of the margin attack.
        lo: Lowest valid pixel value.
        hi: Highest valid pixel value.
        final_clip_only: Iterate without projection and clip the total
            perturbation once at the end.
    """

    eps: float = 0.031
    alpha: float = 1.0 / 255.0
    iters: int = 20
    cw_lr: float = 0.0006
    cw_iters: int = 50
    kappa: float = 0.0
    lo: float = 0.0
    hi: float = 1.0
    final_clip_only: bool = False

    def __post_init__(self):
        if self.eps < 0:
            raise ContractError(f"eps must be >= 0, got {self.eps}")
        if self.alpha <= 0 or self.cw_lr <= 0:
            raise ContractError("attack step sizes must be positive")
        if self.iters < 1 or self.cw_iters < 1:
            raise ContractError("attack iteration counts must be >= 1")
        if self.kappa < 0:
            raise ContractError("kappa must be >= 0")
        if self.lo >= self.hi:
            raise ContractError(f"pixel range [{self.lo}, {self.hi}] is empty")


@dataclass
class PGDConfig:
    """Inner maximizer used by the robust training objectives."""

    eps: float = 0.031
    step: float = 0.007
    iters: int = 10
    mode: str = "eval"
    lo: float = 0.0
    hi: float = 1.0

    def __post_init__(self):
        if self.eps < 0 or self.step < 0 or self.iters < 0:
            raise ContractError("PGD eps, step and iters must be >= 0")
        if self.mode not in ("train", "eval"):
            raise ContractError(f"PGD mode must be train or eval, got {self.mode!r}")


def clip_eps(v, eps: float) -> np.ndarray:
    """Clamp every component of ``v`` to [-eps, eps]."""
    if eps < 0:
        raise ContractError(f"eps must be >= 0, got {eps}")
    return np.clip(np.asarray(v, dtype=np.float64), -eps, eps)


def _check_labels(x: np.ndarray, y: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if x.shape[0] != y.shape[0]:
        raise ContractError(f"{x.shape[0]} inputs but {y.shape[0]} labels")
    return x, y


def input_gradient(
    net: Network,
    x: np.ndarray,
    y: Optional[np.ndarray] = None,
    *,
    objective: str = "ce",
    target_logits: Optional[np.ndarray] = None,
    kappa: float = 0.0,
    mode: str = "eval",
    rng: Optional[np.random.Generator] = None,
) -> Tuple[float, np.ndarray]:
    """Loss value and its gradient with respect to the input batch.

    ``objective`` is ``"ce"`` (label cross-entropy), ``"kl"`` (divergence
    from the fixed ``target_logits``) or ``"margin"`` (clipped logit margin).
    """
    tape = Tape()
    xv = tape.variable(x)
    logits = forward(net, xv, mode=mode, rng=rng)
    if objective == "ce":
        loss = ad.softmax_cross_entropy(logits, y)
    elif objective == "kl":
        loss = ad.kl_divergence(Tensor(target_logits), logits)
    elif objective == "margin":
        loss = ad.cw_margin(logits, y, kappa)
    else:
        raise ContractError(f"unknown attack objective {objective!r}")
    grad = tape.gradient(loss, xv)
    if not np.all(np.isfinite(grad)):
        raise AttackError(f"non-finite input gradient for {objective} objective")
    return loss.item(), grad


def fgsm(net: Network, x, y, eps: float, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
    """x + eps * sign(grad_x loss), clamped to the pixel range."""
    x, y = _check_labels(x, y)
    if eps == 0:
        return x.copy()
    _, grad = input_gradient(net, x, y)
    return np.clip(x + eps * np.sign(grad), lo, hi)


def ifgsm(net: Network, x, y, cfg: AttackConfig) -> np.ndarray:
    """Iterated sign steps of size ``cfg.alpha`` on the cumulative perturbation.

    Each iterate is projected into the eps-ball and the pixel range, so one
    iteration with ``alpha >= eps`` reproduces ``fgsm``. With
    ``final_clip_only`` the perturbation is only clipped after the last step.
    """
    x, y = _check_labels(x, y)
    x_adv = x.copy()
    delta = np.zeros_like(x)
    for _ in range(cfg.iters):
        _, grad = input_gradient(net, x_adv, y)
        delta = delta + cfg.alpha * np.sign(grad)
        if cfg.final_clip_only:
            x_adv = np.clip(x + delta, cfg.lo, cfg.hi)
        else:
            delta = clip_eps(delta, cfg.eps)
            x_adv = np.clip(x + delta, cfg.lo, cfg.hi)
            delta = x_adv - x
    if cfg.final_clip_only:
        x_adv = np.clip(x + clip_eps(delta, cfg.eps), cfg.lo, cfg.hi)
    return x_adv


def cw_linf(net: Network, x, y, cfg: AttackConfig) -> np.ndarray:
    """Untargeted margin attack: gradient descent on max(Z_y - max_j Z_j, -kappa)
    projected onto the eps-ball and the pixel range."""
    x, y = _check_labels(x, y)
    x_adv = x.copy()
    for step in range(cfg.cw_iters):
        margin, grad = input_gradient(net, x_adv, y, objective="margin", kappa=cfg.kappa)
        x_adv = x_adv - cfg.cw_lr * grad * x.shape[0]
        x_adv = np.clip(x + clip_eps(x_adv - x, cfg.eps), cfg.lo, cfg.hi)
        if margin <= -cfg.kappa:
            logger.debug(f"cw: every sample at the confidence floor after {step + 1} steps")
            break
    return x_adv


def pgd(
    net: Network,
    x,
    y,
    eps: float,
    step: float,
    iters: int,
    rng: np.random.Generator,
    *,
    objective: str = "ce",
    mode: str = "eval",
    lo: float = 0.0,
    hi: float = 1.0,
) -> np.ndarray:
    """Projected sign ascent from a uniform random start in the eps-ball.

    ``objective="kl"`` ascends the divergence from the network's own logits on
    the clean input; those logits are computed once and held fixed.
    """
    x, y = _check_labels(x, y)
    if objective not in OBJECTIVES:
        raise ContractError(f"unknown PGD objective {objective!r}")
    target = forward(net, x, mode=mode, rng=rng).data if objective == "kl" else None
    x_adv = np.clip(x + rng.uniform(-eps, eps, size=x.shape), lo, hi)
    for _ in range(iters):
        _, grad = input_gradient(net, x_adv, y, objective=objective, target_logits=target, mode=mode, rng=rng)
        x_adv = x_adv + step * np.sign(grad)
        x_adv = np.clip(x + clip_eps(x_adv - x, eps), lo, hi)
    return x_adv


def run_attack(net: Network, x, y, method: str, cfg: AttackConfig,
               rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Dispatch one of the evaluation attacks by name."""
    if method == "fgsm":
        return fgsm(net, x, y, cfg.eps, cfg.lo, cfg.hi)
    if method == "ifgsm":
        return ifgsm(net, x, y, cfg)
    if method == "cw":
        return cw_linf(net, x, y, cfg)
    if method == "pgd":
        if rng is None:
            raise ContractError("pgd needs an rng for its random start")
        return pgd(net, x, y, cfg.eps, cfg.alpha, cfg.iters, rng, lo=cfg.lo, hi=cfg.hi)
    raise ContractError(f"unknown attack {method!r}; choose from {METHODS}")
