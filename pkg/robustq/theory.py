"""Exhaustive checks of the trade-off loss inequalities on finite toy problems.

Two risks are compared for a real-valued classifier ``f`` on samples
``(x, y)`` with ``y`` in {-1, +1} and an l-infinity ball of radius ``delta``:

* ``R``  = mean phi(s(f(x)) y) + mean phi(s(f(x)) s(f(x')))   (x' maximizes the agreement term)
* ``R*`` = mean phi(s(f(x)) y) + mean phi(s(f(x')) y)         (x' maximizes the label term)

where ``s`` is the identity or tanh. Maximization is a brute-force scan of a
regular grid in the ball. A candidate only replaces ``x`` when it is strictly
worse, and among equally bad candidates the lowest grid index wins.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ContractError

logger = logging.getLogger(__name__)

Loss = Callable[[np.ndarray], np.ndarray]


def zero_one(theta):
    """1 when the margin is negative, else 0."""
    return (np.asarray(theta) < 0).astype(np.float64)


def hinge(theta):
    return np.maximum(1.0 - np.asarray(theta), 0.0)


def sigmoid_loss(theta):
    return 1.0 - np.tanh(theta)


def logistic(theta):
    return np.log2(1.0 + np.exp(-np.asarray(theta, dtype=np.float64)))


LOSSES: Dict[str, Loss] = {
    "zero_one": zero_one,
    "hinge": hinge,
    "sigmoid": sigmoid_loss,
    "logistic": logistic,
}
ACTIVATIONS: Dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "identity": lambda v: np.asarray(v, dtype=np.float64),
    "tanh": np.tanh,
}
FAMILIES = ("affine", "cubic", "sine")
CRITERIA = ("label", "agreement")


def _loss(phi: Union[str, Loss]) -> Loss:
    if callable(phi):
        return phi
    if phi not in LOSSES:
        raise ContractError(f"unknown loss {phi!r}; choose from {sorted(LOSSES)}")
    return LOSSES[phi]


def _activation(sigma: str):
    if sigma not in ACTIVATIONS:
        raise ContractError(f"unknown activation {sigma!r}")
    return ACTIVATIONS[sigma]


@dataclass
class ToyProblem:
    """Samples in one or two dimensions with labels in {-1, +1} and a ball radius."""

    x: np.ndarray
    y: np.ndarray
    delta: float
    resolution: int = 41

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        if self.x.ndim == 1:
            self.x = self.x[:, None]
        self.y = np.asarray(self.y, dtype=np.float64)
        if self.x.shape[1] not in (1, 2):
            raise ContractError(f"toy problems are 1-D or 2-D, got dimension {self.x.shape[1]}")
        if self.y.shape != (self.x.shape[0],) or not np.all(np.abs(self.y) == 1):
            raise ContractError("labels must be one of -1, +1 per sample")
        if self.delta < 0:
            raise ContractError("delta must be >= 0")
        if self.resolution < 1:
            raise ContractError("resolution must be >= 1")

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    def __len__(self) -> int:
        return self.x.shape[0]

    def offsets(self, resolution: Optional[int] = None) -> np.ndarray:
        """Grid of perturbations in [-delta, delta]^d, row-major over axes."""
        axis = np.linspace(-self.delta, self.delta, resolution or self.resolution)
        mesh = np.meshgrid(*([axis] * self.dim), indexing="ij")
        return np.stack([m.reshape(-1) for m in mesh], axis=1)

    @classmethod
    def random(cls, rng: np.random.Generator, n: int = 20, dim: int = 1,
               max_delta: float = 0.5, resolution: int = 41) -> "ToyProblem":
        x = rng.uniform(-1.0, 1.0, size=(n, dim))
        y = rng.choice([-1.0, 1.0], size=n)
        delta = float(rng.uniform(0.0, max_delta))
        return cls(x, y, delta, resolution)


@dataclass
class ToyClassifier:
    """f(x) = g(a . x + b) for g the identity (affine), t^3 - t (cubic) or sin(3t) (sine)."""

    a: np.ndarray
    b: float = 0.0
    kind: str = "affine"

    def __post_init__(self):
        self.a = np.atleast_1d(np.asarray(self.a, dtype=np.float64))
        if self.kind not in FAMILIES:
            raise ContractError(f"classifier family must be one of {FAMILIES}, got {self.kind!r}")

    def __call__(self, x) -> np.ndarray:
        t = np.asarray(x, dtype=np.float64) @ self.a + self.b
        if self.kind == "cubic":
            return t ** 3 - t
        if self.kind == "sine":
            return np.sin(3.0 * t)
        return t

    @classmethod
    def random(cls, rng: np.random.Generator, dim: int, kind: str = "affine") -> "ToyClassifier":
        return cls(rng.normal(0.0, 1.0, size=dim), float(rng.normal(0.0, 0.5)), kind)


@dataclass
class PartitionSets:
    """Sample indices split by the signs of f(x) y and f(x') y."""

    B: np.ndarray
    D: np.ndarray
    E: np.ndarray
    F: np.ndarray

    def label_of(self, index: int) -> str:
        for name in ("B", "D", "E", "F"):
            if index in getattr(self, name):
                return name
        raise KeyError(index)


def worst_case_perturbation(f: Callable, x, y: float, delta: float, grid: Optional[np.ndarray] = None,
                            criterion: str = "label", phi: Union[str, Loss] = "zero_one",
                            sigma: str = "identity", resolution: int = 41) -> np.ndarray:
    """Grid point in the ball around ``x`` maximizing the chosen loss term.

    ``criterion="label"`` maximizes phi(s(f(x')) y); ``"agreement"`` maximizes
    phi(s(f(x)) s(f(x'))). ``grid`` holds offsets from ``x``; by default a
    ``resolution``-point grid per axis is used.
    """
    if criterion not in CRITERIA:
        raise ContractError(f"criterion must be one of {CRITERIA}")
    phi = _loss(phi)
    s = _activation(sigma)
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    if grid is None:
        axis = np.linspace(-delta, delta, resolution)
        mesh = np.meshgrid(*([axis] * x.size), indexing="ij")
        grid = np.stack([m.reshape(-1) for m in mesh], axis=1)
    candidates = x[None, :] + grid
    if criterion == "label":
        def term(points):
            return phi(s(f(points)) * y)
    else:
        anchor = s(f(x[None, :]))[0]

        def term(points):
            return phi(anchor * s(f(points)))
    base = term(x[None, :])[0]
    values = term(candidates)
    best = int(np.argmax(values))
    if values[best] > base:
        return candidates[best]
    return x.copy()


def corner_perturbation(f: ToyClassifier, x, y: float, delta: float) -> np.ndarray:
    """Closed-form minimizer of f(x') y over the ball for affine ``f``."""
    if f.kind != "affine":
        raise ContractError("corner perturbation only applies to affine classifiers")
    return np.atleast_1d(np.asarray(x, dtype=np.float64)) - delta * np.sign(f.a) * y


def _perturb_all(f, problem: ToyProblem, criterion: str, phi, sigma: str) -> np.ndarray:
    grid = problem.offsets()
    return np.stack([
        worst_case_perturbation(f, problem.x[i], problem.y[i], problem.delta, grid, criterion, phi, sigma)
        for i in range(len(problem))
    ])


def partition(f: Callable, problem: ToyProblem, phi: Union[str, Loss] = "zero_one",
              sigma: str = "identity") -> PartitionSets:
    """Split samples into B, D, E, F using the label-criterion perturbation."""
    x_adv = _perturb_all(f, problem, "label", phi, sigma)
    clean = f(problem.x) * problem.y
    adv = f(x_adv) * problem.y
    return PartitionSets(
        B=np.flatnonzero((clean >= 0) & (adv >= 0)),
        D=np.flatnonzero((clean >= 0) & (adv < 0)),
        E=np.flatnonzero((clean < 0) & (adv >= 0)),
        F=np.flatnonzero((clean < 0) & (adv < 0)),
    )


def risk_R(f: Callable, problem: ToyProblem, phi: Union[str, Loss] = "zero_one", sigma: str = "identity") -> float:
    """Natural term plus the output-agreement term at its maximizer."""
    loss, s = _loss(phi), _activation(sigma)
    x_adv = _perturb_all(f, problem, "agreement", loss, sigma)
    clean = s(f(problem.x))
    return float(np.mean(loss(clean * problem.y)) + np.mean(loss(clean * s(f(x_adv)))))


def risk_R_star(f: Callable, problem: ToyProblem, phi: Union[str, Loss] = "zero_one",
                sigma: str = "identity") -> float:
    """Natural term plus the adversarial label term at its maximizer."""
    loss, s = _loss(phi), _activation(sigma)
    x_adv = _perturb_all(f, problem, "label", loss, sigma)
    clean = s(f(problem.x))
    return float(np.mean(loss(clean * problem.y)) + np.mean(loss(s(f(x_adv)) * problem.y)))


@dataclass
class PropositionReport:
    proposition: int
    trials: int
    violations: int = 0
    e_nonempty: int = 0
    witness: Optional[dict] = None
    aggregates: Dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.violations == 0 and self.e_nonempty == 0


def _families(family: Union[str, Sequence[str]]) -> List[str]:
    kinds = [family] if isinstance(family, str) else list(family)
    for kind in kinds:
        if kind not in FAMILIES:
            raise ContractError(f"unknown classifier family {kind!r}")
    return kinds


def _trial(rng: np.random.Generator, problem: Optional[ToyProblem], kinds: List[str], trial: int,
           dim: int) -> Tuple[ToyProblem, ToyClassifier]:
    current = problem if problem is not None else ToyProblem.random(rng, dim=dim)
    return current, ToyClassifier.random(rng, current.dim, kinds[trial % len(kinds)])


def _witness(problem: ToyProblem, f: ToyClassifier, **extra) -> dict:
    return {
        "x": problem.x.tolist(), "y": problem.y.tolist(), "delta": problem.delta,
        "a": f.a.tolist(), "b": f.b, "kind": f.kind, **extra,
    }


def verify_prop1(problem: Optional[ToyProblem] = None, family: Union[str, Sequence[str]] = "affine",
                 trials: int = 1000, seed: int = 0, dim: int = 1, tol: float = 1e-12) -> PropositionReport:
    """Check R <= R* under the 0-1 loss with identity activation.

    Each trial draws a classifier (and a problem, unless one is given). The
    report counts violations and trials whose set E is non-empty and keeps the
    first failing instance as a witness.
    """
    kinds = _families(family)
    rng = np.random.default_rng(seed)
    report = PropositionReport(1, trials)
    for trial in range(trials):
        current, f = _trial(rng, problem, kinds, trial, dim)
        r, r_star = risk_R(f, current), risk_R_star(f, current)
        sets = partition(f, current)
        if sets.E.size:
            report.e_nonempty += 1
        if r > r_star + tol:
            report.violations += 1
            if report.witness is None:
                report.witness = _witness(current, f, R=r, R_star=r_star)
    logger.info(f"proposition 1: {report.violations} violations in {trials} trials")
    return report


def verify_prop2(problem: Optional[ToyProblem] = None, family: Union[str, Sequence[str]] = "affine",
                 loss: str = "hinge", trials: int = 1000, seed: int = 0, dim: int = 1,
                 tol: float = 1e-12) -> PropositionReport:
    """Check the pointwise comparison of the agreement and label terms under tanh.

    With x' the label-criterion perturbation, on B the agreement term
    phi(tanh f(x') tanh f(x)) must dominate the label term phi(tanh f(x') y);
    on D and F it must not exceed it. Aggregates of both terms over B and its
    complement are reported as well.
    """
    if loss not in ("hinge", "sigmoid", "logistic"):
        raise ContractError(f"loss must be hinge, sigmoid or logistic, got {loss!r}")
    if not audit_monotone(LOSSES[loss]):
        raise ContractError(f"{loss} is not monotone decreasing on [-1, 1]")
    kinds = _families(family)
    phi = LOSSES[loss]
    rng = np.random.default_rng(seed)
    report = PropositionReport(2, trials)
    totals = {"agreement_B": 0.0, "label_B": 0.0, "agreement_Bc": 0.0, "label_Bc": 0.0}
    for trial in range(trials):
        current, f = _trial(rng, problem, kinds, trial, dim)
        x_adv = _perturb_all(f, current, "label", phi, "tanh")
        sets = partition(f, current, phi, "tanh")
        if sets.E.size:
            report.e_nonempty += 1
        s_adv = np.tanh(f(x_adv))
        agreement = phi(s_adv * np.tanh(f(current.x)))
        label = phi(s_adv * current.y)
        complement = np.concatenate([sets.D, sets.F])
        bad = np.concatenate([
            sets.B[agreement[sets.B] < label[sets.B] - tol],
            complement[agreement[complement] > label[complement] + tol],
        ])
        totals["agreement_B"] += float(agreement[sets.B].sum())
        totals["label_B"] += float(label[sets.B].sum())
        totals["agreement_Bc"] += float(agreement[complement].sum())
        totals["label_Bc"] += float(label[complement].sum())
        if bad.size:
            report.violations += int(bad.size)
            if report.witness is None:
                report.witness = _witness(current, f, loss=loss, samples=bad.tolist())
    report.aggregates = totals
    logger.info(f"proposition 2 ({loss}): {report.violations} pointwise violations in {trials} trials")
    return report


def audit_monotone(phi: Loss, lo: float = -1.0, hi: float = 1.0, samples: int = 2001) -> bool:
    """Whether ``phi`` is non-increasing on a dense grid over [lo, hi]."""
    values = phi(np.linspace(lo, hi, samples))
    return bool(np.all(np.diff(values) <= 0))


def refinement_stable(f: ToyClassifier, problem: ToyProblem) -> bool:
    """Whether doubling the grid resolution leaves every partition label unchanged."""
    finer = ToyProblem(problem.x, problem.y, problem.delta, 2 * problem.resolution - 1)
    coarse_sets, fine_sets = partition(f, problem), partition(f, finer)
    return all(
        np.array_equal(getattr(coarse_sets, name), getattr(fine_sets, name)) for name in ("B", "D", "E", "F")
    )
