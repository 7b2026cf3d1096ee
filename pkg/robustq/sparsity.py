"""Sparsity measurement, the weight-magnitude bound tracker and channel pruning.

Channels are conv output filters; the classifier is left out of channel
accounting. Zeros are counted with exact equality since grid weights are
exact.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ContractError, PruningError
from .nets import BatchNorm, Conv2d, Layer, Network, ReLU, ResidualBlock

logger = logging.getLogger(__name__)


def weight_sparsity(u: Union[Mapping[str, np.ndarray], Sequence[np.ndarray], np.ndarray]) -> float:
    """Fraction of entries that are exactly zero across all given arrays."""
    if isinstance(u, np.ndarray):
        arrays = [u]
    elif isinstance(u, Mapping):
        arrays = list(u.values())
    else:
        arrays = [np.asarray(a) for a in u]
    total = sum(a.size for a in arrays)
    if total == 0:
        raise ContractError("weight_sparsity of an empty weight set")
    zeros = sum(int(np.count_nonzero(a == 0)) for a in arrays)
    return zeros / total


def zero_filters(kernel: np.ndarray) -> np.ndarray:
    """Boolean per output channel: every weight of the filter is exactly 0."""
    return np.all(kernel.reshape(kernel.shape[0], -1) == 0, axis=1)


@dataclass
class LayerSparsity:
    name: str
    weights: int
    zeros: int
    channels: int
    zero_channels: int
    prunable_channels: int
    mean_abs_u: float
    mean_abs_w: Optional[float]
    channel_density: np.ndarray

    @property
    def weight_sparsity(self) -> float:
        return self.zeros / self.weights

    @property
    def channel_sparsity(self) -> float:
        return self.zero_channels / self.channels

    @property
    def masked_channels(self) -> int:
        return self.zero_channels - self.prunable_channels


@dataclass
class SparsityReport:
    """Per-conv-layer sparsity breakdown with totals."""

    layers: List[LayerSparsity]

    @property
    def total_weights(self) -> int:
        return sum(layer.weights for layer in self.layers)

    @property
    def zero_weights(self) -> int:
        return sum(layer.zeros for layer in self.layers)

    @property
    def total_channels(self) -> int:
        return sum(layer.channels for layer in self.layers)

    @property
    def zero_channels(self) -> int:
        return sum(layer.zero_channels for layer in self.layers)

    @property
    def prunable_channels(self) -> int:
        return sum(layer.prunable_channels for layer in self.layers)

    @property
    def masked_channels(self) -> int:
        return self.zero_channels - self.prunable_channels

    @property
    def weight_sparsity(self) -> float:
        return self.zero_weights / self.total_weights if self.total_weights else 0.0

    @property
    def channel_sparsity(self) -> float:
        return self.zero_channels / self.total_channels if self.total_channels else 0.0

    @property
    def nonsparse_density(self) -> float:
        """Mean fraction of nonzero weights over channels that are not all-zero."""
        densities = np.concatenate([layer.channel_density for layer in self.layers]) if self.layers else np.zeros(0)
        alive = densities[densities > 0]
        return float(alive.mean()) if alive.size else 0.0


class ChannelSparsity(NamedTuple):
    fraction: float
    layers: Dict[str, Tuple[int, int]]


def channel_sparsity(net: Network) -> ChannelSparsity:
    """Fraction of conv filters that are entirely zero, with per-layer (zero, total)."""
    layers = {}
    for conv in net.conv_layers:
        zero = zero_filters(net.weights[conv.weight_name])
        layers[conv.name] = (int(zero.sum()), conv.out_channels)
    total = sum(t for _, t in layers.values())
    zeros = sum(z for z, _ in layers.values())
    return ChannelSparsity(zeros / total if total else 0.0, layers)


def sparsity_report(net: Network, shadow: Optional[Mapping[str, np.ndarray]] = None) -> SparsityReport:
    """Sparsity of the conv weights currently loaded in ``net``.

    ``shadow`` optionally maps weight names to full-precision arrays so the
    report can compare mean |w| against mean |u|.
    """
    plan = plan_pruning(net)
    layers = []
    for conv in net.conv_layers:
        kernel = net.weights[conv.weight_name]
        flat = kernel.reshape(conv.out_channels, -1)
        zero = zero_filters(kernel)
        mean_abs_w = None
        if shadow is not None and conv.weight_name in shadow:
            mean_abs_w = float(np.mean(np.abs(shadow[conv.weight_name])))
        layers.append(LayerSparsity(
            name=conv.name,
            weights=int(kernel.size),
            zeros=int(np.count_nonzero(kernel == 0)),
            channels=conv.out_channels,
            zero_channels=int(zero.sum()),
            prunable_channels=len(plan.removable.get(conv.name, ())),
            mean_abs_u=float(np.mean(np.abs(kernel))),
            mean_abs_w=mean_abs_w,
            channel_density=np.count_nonzero(flat, axis=1) / flat.shape[1],
        ))
    return SparsityReport(layers)


@dataclass(frozen=True)
class BoundTrace:
    """Per-epoch maximum layer magnitude and its running maximum."""

    values: Tuple[float, ...] = ()

    @property
    def M(self) -> float:
        return max(self.values, default=0.0)

    @property
    def running(self) -> Tuple[float, ...]:
        return tuple(np.maximum.accumulate(self.values)) if self.values else ()

    def stable_tail(self, fraction: float = 0.25) -> bool:
        """Whether the running maximum did not move over the final ``fraction`` of epochs."""
        running = self.running
        if not running:
            return True
        tail = max(1, int(np.ceil(fraction * len(running))))
        return running[max(len(running) - tail - 1, 0)] == running[-1]


def layer_magnitudes(net: Network) -> Dict[str, float]:
    return {conv.name: float(np.mean(np.abs(net.weights[conv.weight_name]))) for conv in net.conv_layers}


def track_M(net: Network, trace: BoundTrace) -> BoundTrace:
    """Append this epoch's maximum over conv layers of mean |u|."""
    magnitudes = layer_magnitudes(net)
    m_t = max(magnitudes.values(), default=0.0)
    return BoundTrace(trace.values + (m_t,))


@dataclass
class PrunePlan:
    removable: Dict[str, List[int]] = field(default_factory=dict)
    masked: Dict[str, List[int]] = field(default_factory=dict)
    consumers: Dict[str, str] = field(default_factory=dict)


def _followers(sequence: Sequence[Layer], start: int) -> Tuple[Optional[BatchNorm], bool, Optional[Layer]]:
    """BatchNorm and ReLU directly after ``sequence[start]`` and the next other layer."""
    bn, relu = None, False
    i = start + 1
    if i < len(sequence) and isinstance(sequence[i], BatchNorm):
        bn = sequence[i]
        i += 1
    if i < len(sequence) and isinstance(sequence[i], ReLU):
        relu = True
        i += 1
    consumer = sequence[i] if i < len(sequence) else None
    return bn, relu, consumer


def _sequences(net: Network) -> List[List[Layer]]:
    sequences = []
    for chain in net.members:
        sequences.append(list(chain))
        sequences.extend(layer.inner for layer in chain if isinstance(layer, ResidualBlock))
    return sequences


def _zero_response(net: Network, bn: Optional[BatchNorm], relu: bool) -> np.ndarray:
    """Per-channel eval-mode output of the BN/ReLU tail for an exactly zero input."""
    if bn is None:
        return np.zeros(0)
    gamma = net.weights[f"{bn.name}.gamma"]
    beta = net.weights[f"{bn.name}.beta"]
    mean_name, var_name = bn.buffer_names()
    inv_std = 1.0 / np.sqrt(net.buffers[var_name] + bn.eps)
    out = gamma * ((0.0 - net.buffers[mean_name]) * inv_std) + beta
    return np.where(out > 0, out, 0.0) if relu else out


def plan_pruning(net: Network) -> PrunePlan:
    """Decide, per zero filter, whether it can be removed or only masked.

    A filter is removable when the next weighted layer in the same sequence is
    a conv (only BatchNorm and ReLU in between) and the channel's eval-mode
    activation is exactly zero; the consumer's matching input slice then
    contributes nothing. Every other zero filter is masked.
    """
    plan = PrunePlan()
    for sequence in _sequences(net):
        for index, layer in enumerate(sequence):
            if not isinstance(layer, Conv2d):
                continue
            zero = np.flatnonzero(zero_filters(net.weights[layer.weight_name]))
            if zero.size == 0:
                continue
            bn, relu, consumer = _followers(sequence, index)
            if isinstance(consumer, Conv2d):
                if consumer.in_channels != layer.out_channels or (bn is not None and bn.channels != layer.out_channels):
                    raise PruningError(f"{layer.name} -> {consumer.name}: channel counts disagree")
                response = _zero_response(net, bn, relu) if bn is not None else np.zeros(layer.out_channels)
                removable = [int(j) for j in zero if response[j] == 0.0]
                if len(removable) == layer.out_channels:
                    removable = removable[1:]
                masked = [int(j) for j in zero if int(j) not in removable]
                if removable:
                    plan.removable[layer.name] = removable
                    plan.consumers[layer.name] = consumer.name
            else:
                masked = [int(j) for j in zero]
            if masked:
                plan.masked[layer.name] = masked
    return plan


@dataclass
class PruneReport:
    removed: Dict[str, List[int]]
    masked: Dict[str, List[int]]
    kept: Dict[str, np.ndarray]
    consumers: Dict[str, str]
    weights_before: int
    weights_after: int

    @property
    def prunable_count(self) -> int:
        return sum(len(v) for v in self.removed.values())

    @property
    def masked_count(self) -> int:
        return sum(len(v) for v in self.masked.values())

    def slice_arrays(self, arrays: Mapping[str, np.ndarray]) -> Dict[str, np.ndarray]:
        """Apply the same row/column removal to arrays keyed by weight name (e.g. shadow weights)."""
        out = {name: array.copy() for name, array in arrays.items()}
        for producer, keep in self.kept.items():
            weight = f"{producer}.weight"
            if weight in out:
                out[weight] = out[weight][keep]
            consumer_weight = f"{self.consumers[producer]}.weight"
            if consumer_weight in out:
                out[consumer_weight] = out[consumer_weight][:, keep]
        return out


def prune_channels(net: Network) -> Tuple[Network, PruneReport]:
    """Remove removable zero filters and mask the rest; ``net`` is left untouched.

    The pruned network's eval-mode logits equal the original's exactly.
    """
    plan = plan_pruning(net)
    pruned = net.copy()
    layers = {layer.name: layer for layer in pruned.layers() if isinstance(layer, (Conv2d, BatchNorm))}
    kept: Dict[str, np.ndarray] = {}

    for producer_name, removed in plan.removable.items():
        producer = layers[producer_name]
        consumer = layers[plan.consumers[producer_name]]
        keep = np.array([j for j in range(producer.out_channels) if j not in set(removed)], dtype=np.int64)
        kept[producer_name] = keep

        pruned.weights[producer.weight_name] = pruned.weights[producer.weight_name][keep]
        if producer.mask is not None:
            producer.mask = producer.mask[keep]
        producer.out_channels = keep.size

        bn = _bn_after(pruned, producer)
        if bn is not None:
            for suffix in ("gamma", "beta"):
                pruned.weights[f"{bn.name}.{suffix}"] = pruned.weights[f"{bn.name}.{suffix}"][keep]
            for buffer_name in bn.buffer_names():
                pruned.buffers[buffer_name] = pruned.buffers[buffer_name][keep]
            bn.channels = keep.size

        pruned.weights[consumer.weight_name] = pruned.weights[consumer.weight_name][:, keep]
        consumer.in_channels = keep.size

    for name, masked in plan.masked.items():
        conv = layers[name]
        index = kept.get(name)
        mask = conv.mask.copy() if conv.mask is not None else np.ones(conv.out_channels)
        for j in masked:
            position = int(np.flatnonzero(index == j)[0]) if index is not None else j
            mask[position] = 0.0
        conv.mask = mask

    try:
        pruned._check_registry()
    except Exception as exc:
        raise PruningError(f"pruned network is inconsistent: {exc}") from exc

    report = PruneReport(
        removed=plan.removable,
        masked=plan.masked,
        kept=kept,
        consumers=plan.consumers,
        weights_before=net.weight_count(),
        weights_after=pruned.weight_count(),
    )
    logger.info(f"Pruned {report.prunable_count} channels, masked {report.masked_count}; "
                f"weights {report.weights_before} -> {report.weights_after}")
    return pruned, report


def _bn_after(net: Network, conv: Conv2d) -> Optional[BatchNorm]:
    for sequence in _sequences(net):
        for index, layer in enumerate(sequence):
            if layer is conv:
                bn, _, _ = _followers(sequence, index)
                return bn
    return None
