"""Resolved run configuration: defaults, then a key=value file, then CLI flags."""

from __future__ import annotations

import hashlib
import logging
import typing
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple

from .attacks import AttackConfig, PGDConfig
from .errors import ContractError, FormatError
from .nets import NetworkSpec
from .quantizer import QuantConfig
from .robust_train import LossSpec, TrainConfig

logger = logging.getLogger(__name__)


@dataclass
class RunConfig:
    """Every knob of a CLI run in one flat record.

    Config files use the field names as keys, e.g. ``quant_variant = ternary``
    or ``widths = 8,16,32``.
    """

    seed: int = 0
    out_dir: str = "runs/latest"

    # data
    data_dir: Optional[str] = None
    dataset: str = "mnist"
    synthetic: str = "blobs"
    synthetic_n: int = 512
    synthetic_noise: float = 0.3
    normalize: bool = False

    # network
    arch: str = "resnet"
    blocks: Tuple[int, ...] = (1, 1, 1)
    widths: Tuple[int, ...] = (8, 16, 32)
    hidden: Tuple[int, ...] = (64,)
    ensemble: int = 1
    noise_std: float = 0.1

    # quantization
    quant_variant: str = "binary"
    quant_algorithm: str = "br"
    lam0: float = 1.0
    rho: float = 1.02
    cutoff: Optional[int] = None
    ternary_method: str = "exact"
    exempt_first: bool = False
    exempt_last: bool = False

    # objective
    loss: str = "tradeoff"
    alpha: float = 1.0
    beta: float = 1.0
    divergence: str = "kl"
    pgd_eps: float = 0.031
    pgd_step: float = 0.007
    pgd_iters: int = 10
    pgd_mode: str = "eval"

    # optimization
    epochs: int = 20
    batch_size: int = 128
    lr: float = 0.1
    milestones: Tuple[int, ...] = ()
    lr_decay: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    train_limit: Optional[int] = None
    eval_limit: Optional[int] = None
    eval_every: int = 1
    checkpoint_every: int = 0
    workers: Optional[int] = None

    # evaluation attacks
    eps: float = 0.031
    attack_alpha: float = 1.0 / 255.0
    attack_iters: int = 20
    cw_lr: float = 0.0006
    cw_iters: int = 50
    kappa: float = 0.0
    eval_cw: bool = False
    final_clip_only: bool = False

    def network_spec(self, input_shape: Tuple[int, int, int], num_classes: int,
                     mean: Optional[float] = None, std: Optional[float] = None) -> NetworkSpec:
        return NetworkSpec(
            input_shape=input_shape,
            blocks=self.blocks,
            widths=self.widths,
            ensemble=self.ensemble,
            noise_std=self.noise_std,
            num_classes=num_classes,
            arch=self.arch,
            hidden=self.hidden,
            input_mean=mean if self.normalize else None,
            input_std=std if self.normalize else None,
        )

    def quant_config(self) -> QuantConfig:
        return QuantConfig(
            variant=self.quant_variant,
            algorithm=self.quant_algorithm,
            lam0=self.lam0,
            rho=self.rho,
            cutoff=self.cutoff,
            ternary_method=self.ternary_method,
            exempt_first=self.exempt_first,
            exempt_last=self.exempt_last,
        )

    def attack_config(self) -> AttackConfig:
        return AttackConfig(
            eps=self.eps,
            alpha=self.attack_alpha,
            iters=self.attack_iters,
            cw_lr=self.cw_lr,
            cw_iters=self.cw_iters,
            kappa=self.kappa,
            final_clip_only=self.final_clip_only,
        )

    def loss_spec(self) -> LossSpec:
        pgd = PGDConfig(eps=self.pgd_eps, step=self.pgd_step, iters=self.pgd_iters, mode=self.pgd_mode)
        return LossSpec(variant=self.loss, alpha=self.alpha, beta=self.beta, pgd=pgd, divergence=self.divergence)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr=self.lr,
            milestones=self.milestones,
            lr_decay=self.lr_decay,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            seed=self.seed,
            quant=self.quant_config(),
            loss=self.loss_spec(),
            attack=self.attack_config(),
            train_limit=self.train_limit,
            eval_limit=self.eval_limit,
            eval_every=self.eval_every,
            checkpoint_every=self.checkpoint_every,
            eval_cw=self.eval_cw,
            workers=self.workers,
        )

    def as_dict(self) -> Dict[str, Any]:
        return {f.name: list(v) if isinstance(v := getattr(self, f.name), tuple) else v for f in fields(self)}

    def canonical_text(self) -> str:
        return "".join(f"{key}={_render(value)}\n" for key, value in sorted(self.as_dict().items()))

    def digest(self) -> str:
        """SHA-256 of the canonical sorted key=value rendering."""
        return hashlib.sha256(self.canonical_text().encode("utf-8")).hexdigest()


def _render(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, (list, tuple)):
        return ",".join(str(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


_HINTS = typing.get_type_hints(RunConfig)


def coerce(key: str, raw: str) -> Any:
    """Convert the text ``raw`` to the declared type of field ``key``."""
    if key not in _HINTS:
        raise FormatError(f"unknown config key {key!r}")
    hint = _HINTS[key]
    text = raw.strip()
    args = typing.get_args(hint)
    if typing.get_origin(hint) is typing.Union and type(None) in args:
        if text.lower() in ("", "none", "null"):
            return None
        hint = next(a for a in args if a is not type(None))
    try:
        if hint is bool:
            lowered = text.lower()
            if lowered in ("true", "yes", "1", "on"):
                return True
            if lowered in ("false", "no", "0", "off"):
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if typing.get_origin(hint) is tuple:
            return tuple(int(part) for part in text.split(",") if part.strip())
        if hint is int:
            return int(text)
        if hint is float:
            return float(text)
        return text
    except ValueError as exc:
        raise FormatError(f"config key {key!r}: {exc}") from exc


def read_config_file(path: Path) -> Dict[str, Any]:
    """Parse UTF-8 ``key = value`` lines; ``#`` starts a comment."""
    values: Dict[str, Any] = {}
    for number, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        content = line.split("#", 1)[0].strip()
        if not content:
            continue
        if "=" not in content:
            raise FormatError(f"{path}:{number}: expected key=value, got {line.strip()!r}")
        key, raw = content.split("=", 1)
        key = key.strip()
        if key not in _HINTS:
            raise FormatError(f"{path}:{number}: unknown config key {key!r}")
        values[key] = coerce(key, raw)
    logger.debug(f"Read {len(values)} settings from {path}")
    return values


def resolve(config_path: Optional[Path] = None, overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
    """Defaults, then the config file, then explicit overrides (None values are skipped)."""
    values: Dict[str, Any] = {}
    if config_path is not None:
        values.update(read_config_file(config_path))
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key not in _HINTS:
            raise ContractError(f"unknown override {key!r}")
        values[key] = tuple(value) if isinstance(value, list) else value
    return RunConfig(**values)
