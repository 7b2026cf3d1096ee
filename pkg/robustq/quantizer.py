"""Weight projections onto quantization grids and the relaxed training schedule.

Each quantized layer keeps a full-precision shadow array ``w`` and the array
``u`` the network actually runs with. Before the cutoff epoch ``u`` is the
blend ``(lam * Proj(w) + w) / (lam + 1)`` with ``lam`` growing geometrically
per mini-batch; from the cutoff on ``u = Proj(w)`` exactly.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Mapping, NamedTuple, Optional

import numpy as np

from .errors import ContractError, DimensionError, NonFiniteError

logger = logging.getLogger(__name__)

VARIANTS = ("none", "binary", "ternary", "four_bit")
ALGORITHMS = ("br", "bc")
TERNARY_METHODS = ("exact", "threshold")
FOUR_BIT_LEVELS = 7
FOUR_BIT_ITERATIONS = 10
TERNARY_THRESHOLD_FACTOR = 0.7


class Projection(NamedTuple):
    """Result of projecting one weight array: per-layer scale and grid values."""

    scale: float
    u: np.ndarray

    @property
    def degenerate(self) -> bool:
        return self.scale == 0.0


def _nonempty(w) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if w.size == 0:
        raise ContractError("cannot project an empty weight array")
    return w


def project_binary(w) -> Projection:
    """Closest point of the form s * sign(w) with s = mean |w|; zeros map to +s."""
    w = _nonempty(w)
    s = float(np.mean(np.abs(w)))
    if s == 0.0:
        logger.debug("binary projection of an all-zero array is degenerate")
        return Projection(0.0, np.zeros_like(w))
    return Projection(s, np.where(w >= 0, s, -s))


def project_ternary(w, method: str = "exact") -> Projection:
    """Projection onto {0, +s, -s}.

    ``exact`` scans supports of the k largest magnitudes and keeps the k that
    maximizes k * s_k^2 (ties resolved to the smaller k), which minimizes the
    l2 distance. ``threshold`` keeps |w| > 0.7 * mean|w| and fits s to them.
    """
    w = _nonempty(w)
    flat = np.abs(w).reshape(-1)
    if method == "exact":
        order = np.argsort(-flat, kind="stable")
        sums = np.cumsum(flat[order])
        counts = np.arange(1, flat.size + 1)
        scores = sums * sums / counts
        k = int(np.argmax(scores)) + 1
        s = float(sums[k - 1] / k)
        support = np.zeros(flat.size, dtype=bool)
        support[order[:k]] = True
    elif method == "threshold":
        delta = TERNARY_THRESHOLD_FACTOR * float(flat.mean())
        support = flat > delta
        s = float(flat[support].mean()) if support.any() else 0.0
    else:
        raise ContractError(f"unknown ternary method {method!r}")
    if s == 0.0:
        return Projection(0.0, np.zeros_like(w))
    support = support.reshape(w.shape)
    return Projection(s, np.where(support, s * np.sign(w), 0.0))


def project_4bit(w, iterations: int = FOUR_BIT_ITERATIONS,
                 trace: Optional[List[float]] = None) -> Projection:
    """Alternating fit on the 15 levels {0, +-s*k/7 : k = 1..7}.

    Starts from s = max|w|, then alternates rounding to level indices and the
    least-squares rescale s = 7 <w, k> / <k, k>. When ``trace`` is a list the
    squared error after each iteration is appended to it.
    """
    w = _nonempty(w)
    s = float(np.max(np.abs(w)))
    if s == 0.0:
        return Projection(0.0, np.zeros_like(w))
    levels = FOUR_BIT_LEVELS
    k = np.zeros_like(w)
    for _ in range(iterations):
        k = np.clip(np.rint(w / (s / levels)), -levels, levels)
        kk = float(np.sum(k * k))
        if kk == 0.0:
            s = 0.0
            break
        s = levels * float(np.sum(w * k)) / kk
        if trace is not None:
            trace.append(float(np.sum((w - s * k / levels) ** 2)))
    if s == 0.0:
        return Projection(0.0, np.zeros_like(w))
    return Projection(s, s * k / levels)


def project(w, variant: str, ternary_method: str = "exact") -> Projection:
    if variant == "binary":
        return project_binary(w)
    if variant == "ternary":
        return project_ternary(w, ternary_method)
    if variant == "four_bit":
        return project_4bit(w)
    if variant == "none":
        w = np.asarray(w, dtype=np.float64)
        return Projection(1.0, w.copy())
    raise ContractError(f"unknown quantization variant {variant!r}")


def relax_blend(w, proj, lam: float) -> np.ndarray:
    """(lam * proj + w) / (lam + 1), component-wise."""
    if lam < 0:
        raise ContractError(f"relaxation parameter must be >= 0, got {lam}")
    w = np.asarray(w, dtype=np.float64)
    proj = np.asarray(proj, dtype=np.float64)
    if w.shape != proj.shape:
        raise DimensionError(f"relax_blend: shapes {w.shape} and {proj.shape} differ")
    return (lam * proj + w) / (lam + 1.0)


def on_grid(u, scale: float, variant: str) -> bool:
    """Whether every component of ``u`` is exactly one of the variant's levels."""
    u = np.asarray(u, dtype=np.float64)
    if variant == "none":
        return True
    if scale == 0.0:
        return bool(np.all(u == 0.0))
    if variant == "binary":
        return bool(np.all(np.abs(u) == scale))
    if variant == "ternary":
        return bool(np.all((u == 0.0) | (np.abs(u) == scale)))
    if variant == "four_bit":
        grid = scale * np.arange(-FOUR_BIT_LEVELS, FOUR_BIT_LEVELS + 1) / FOUR_BIT_LEVELS
        return bool(np.all(np.isin(u, grid)))
    raise ContractError(f"unknown quantization variant {variant!r}")


@dataclass
class QuantConfig:
    """Quantization scheme plus the relaxation schedule.

    Args:
        variant: Grid to project onto, or ``"none"`` for float training.
        algorithm: ``"br"`` (relaxed blend until ``cutoff``) or ``"bc"`` (projection from the start).
        lam0: Initial relaxation parameter.
        rho: Per-mini-batch growth factor of the relaxation parameter.
        cutoff: Epoch from which plain projection is used; ``None`` means 80% of the run.
        ternary_method: ``"exact"`` or ``"threshold"``.
        exempt_first: Keep each member's first conv in full precision.
        exempt_last: Keep each member's classifier in full precision.
    """

    variant: str = "binary"
    algorithm: str = "br"
    lam0: float = 1.0
    rho: float = 1.02
    cutoff: Optional[int] = None
    ternary_method: str = "exact"
    exempt_first: bool = False
    exempt_last: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ContractError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.algorithm not in ALGORITHMS:
            raise ContractError(f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        if self.ternary_method not in TERNARY_METHODS:
            raise ContractError(f"ternary_method must be one of {TERNARY_METHODS}")
        if self.lam0 < 0:
            raise ContractError("lam0 must be >= 0")
        if self.rho <= 1.0:
            raise ContractError("rho must be > 1")
        if self.cutoff is not None and self.cutoff < 0:
            raise ContractError("cutoff must be >= 0")

    def resolve_cutoff(self, epochs: int) -> int:
        if self.algorithm == "bc":
            return 0
        if self.cutoff is None:
            return int(0.8 * epochs)
        return self.cutoff


@dataclass
class QuantState:
    """Shadow weights, grid weights and the relaxation schedule position."""

    scheme: QuantConfig
    w: Dict[str, np.ndarray]
    u: Dict[str, np.ndarray]
    scales: Dict[str, float]
    lam: float
    cutoff: int
    epoch: int = 0
    steps: int = 0
    float_params: List[str] = field(default_factory=list)

    @property
    def rho(self) -> float:
        return self.scheme.rho

    @property
    def projecting(self) -> bool:
        """True once the schedule has switched to plain projection."""
        return self.epoch >= self.cutoff

    @classmethod
    def from_network(cls, net, scheme: QuantConfig, epochs: int) -> "QuantState":
        """Start a schedule from the network's current weights, u0 = w0."""
        names = list(net.quantizable)
        if scheme.variant == "none":
            names = []
        first, last = net.boundary_weights
        if scheme.exempt_first:
            names = [n for n in names if n not in first]
        if scheme.exempt_last:
            names = [n for n in names if n not in last]
        w = {name: net.weights[name].copy() for name in names}
        u = {name: array.copy() for name, array in w.items()}
        scales = {name: 0.0 for name in names}
        float_params = [name for name in net.weights if name not in w]
        cutoff = scheme.resolve_cutoff(epochs)
        logger.info(f"Quantizing {len(names)} weight arrays ({scheme.variant}, {scheme.algorithm}, cutoff epoch {cutoff})")
        return cls(scheme, w, u, scales, scheme.lam0, cutoff, float_params=float_params)

    def apply_to(self, net) -> None:
        """Load the grid weights into the network's registry."""
        for name, array in self.u.items():
            net.weights[name] = array.copy()

    def shadow_network(self, net):
        """Copy of ``net`` carrying the full-precision shadow weights."""
        shadow = net.copy()
        for name, array in self.w.items():
            shadow.weights[name] = array.copy()
        return shadow

    def project_all(self) -> Dict[str, Projection]:
        return {
            name: project(array, self.scheme.variant, self.scheme.ternary_method)
            for name, array in self.w.items()
        }

    def on_grid(self) -> bool:
        return all(on_grid(self.u[name], self.scales[name], self.scheme.variant) for name in self.u)


def _descend(state: QuantState, directions: Mapping[str, np.ndarray], lr: float) -> Dict[str, np.ndarray]:
    missing = set(state.w) - set(directions)
    if missing:
        raise ContractError(f"no update direction for {sorted(missing)}")
    w = {}
    for name, array in state.w.items():
        d = np.asarray(directions[name], dtype=np.float64)
        if d.shape != array.shape:
            raise DimensionError(f"{name}: direction shape {d.shape}, weights {array.shape}")
        if not np.all(np.isfinite(d)):
            raise NonFiniteError(f"non-finite update for {name}; quantizer step rejected")
        w[name] = array - lr * d
    return w


def br_step(state: QuantState, directions: Mapping[str, np.ndarray], lr: float) -> QuantState:
    """One relaxed step: descend w, blend with its projection, grow lam by rho.

    ``directions`` are gradients taken at ``u`` (optionally momentum-smoothed).
    """
    if state.projecting:
        raise ContractError(f"br_step called at epoch {state.epoch} >= cutoff {state.cutoff}")
    stepped = replace(state, w=_descend(state, directions, lr))
    u, scales = {}, {}
    for name, proj in stepped.project_all().items():
        u[name] = relax_blend(stepped.w[name], proj.u, state.lam)
        scales[name] = proj.scale
    return replace(stepped, u=u, scales=scales, lam=state.lam * state.rho, steps=state.steps + 1)


def bc_step(state: QuantState, directions: Mapping[str, np.ndarray], lr: float) -> QuantState:
    """One projected step: descend w, then u = Proj(w) exactly."""
    stepped = replace(state, w=_descend(state, directions, lr))
    projections = stepped.project_all()
    u = {name: proj.u for name, proj in projections.items()}
    scales = {name: proj.scale for name, proj in projections.items()}
    return replace(stepped, u=u, scales=scales, steps=state.steps + 1)


def quant_step(state: QuantState, directions: Mapping[str, np.ndarray], lr: float) -> QuantState:
    """Dispatch on the schedule position: relaxed before the cutoff, projected after."""
    if state.projecting:
        return bc_step(state, directions, lr)
    return br_step(state, directions, lr)

