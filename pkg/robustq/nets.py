"""Tiny residual networks and noise-injected ensembles.

A ``Network`` is a list of ensemble members, each an ordered chain of layers.
Layers hold no arrays themselves: every trainable array lives in the
network's weight registry (``net.weights``) and every running statistic in
``net.buffers``, keyed by dotted layer names such as ``m0.s1.b0.conv1.weight``.
The quantizer and the sparsity analysis work on that registry directly.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterator, List, Mapping, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DimensionError

logger = logging.getLogger(__name__)

ARCHITECTURES = ("resnet", "mlp")
MODES = ("train", "eval")


@dataclass
class NetworkSpec:
    """Architecture description of a (possibly ensembled) classifier.

    Args:
        input_shape: Channels, height and width of one input sample.
        blocks: Residual blocks per stage.
        widths: Channel width per stage.
        ensemble: Number of independently initialized members whose logits are averaged.
        noise_std: Standard deviation of the Gaussian noise added to every
            residual mapping in train mode.
        num_classes: Number of output logits.
        arch: ``"resnet"`` or ``"mlp"``.
        hidden: Hidden layer sizes for the ``mlp`` architecture.
        input_mean: Optional normalization applied inside the forward pass.
        input_std: Optional normalization applied inside the forward pass.
    """

    input_shape: Tuple[int, int, int] = (1, 28, 28)
    blocks: Tuple[int, ...] = (1, 1, 1)
    widths: Tuple[int, ...] = (8, 16, 32)
    ensemble: int = 1
    noise_std: float = 0.0
    num_classes: int = 10
    arch: str = "resnet"
    hidden: Tuple[int, ...] = (64,)
    input_mean: Optional[float] = None
    input_std: Optional[float] = None

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        self.blocks = tuple(int(v) for v in self.blocks)
        self.widths = tuple(int(v) for v in self.widths)
        self.hidden = tuple(int(v) for v in self.hidden)
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ContractError(f"input_shape must be (C, H, W) with positive sizes, got {self.input_shape}")
        if self.ensemble < 1:
            raise ContractError(f"ensemble must be >= 1, got {self.ensemble}")
        if self.noise_std < 0:
            raise ContractError(f"noise_std must be >= 0, got {self.noise_std}")
        if self.num_classes < 2:
            raise ContractError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.arch not in ARCHITECTURES:
            raise ContractError(f"arch must be one of {ARCHITECTURES}, got {self.arch!r}")
        if self.arch == "resnet":
            if not self.widths or len(self.widths) != len(self.blocks):
                raise ContractError("blocks and widths need one entry per stage")
            if min(self.widths) < 1 or min(self.blocks) < 0:
                raise ContractError("widths must be positive and block counts non-negative")
        if self.hidden and min(self.hidden) < 1:
            raise ContractError("hidden sizes must be positive")
        if self.input_std is not None and self.input_std <= 0:
            raise ContractError("input_std must be positive")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, data: Mapping) -> "NetworkSpec":
        return cls(**dict(data))


@dataclass
class ForwardContext:
    """Per-call state threaded through the layers."""

    params: Mapping[str, Tensor]
    mode: str
    rng: Optional[np.random.Generator]
    noise_std: float
    batch_stats: bool
    stat_updates: Dict[str, Tuple[np.ndarray, np.ndarray, int]] = field(default_factory=dict)
    noise_sites: List[str] = field(default_factory=list)
    buffers: Mapping[str, np.ndarray] = field(default_factory=dict)


class Layer:
    name: str = ""

    def forward(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        raise NotImplementedError

    def parameters(self) -> Dict[str, Tuple[int, ...]]:
        """Registry names and shapes of the arrays this layer owns."""
        return {}


class Conv2d(Layer):
    """3x3 convolution, padding 1, no bias.

    ``mask`` marks output channels that are pinned to zero; the conv output of
    those channels is multiplied by 0.
    """

    def __init__(self, name: str, in_channels: int, out_channels: int, stride: int = 1,
                 mask: Optional[np.ndarray] = None):
        self.name = name
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.stride = stride
        self.mask = mask

    @property
    def weight_name(self) -> str:
        return f"{self.name}.weight"

    def parameters(self):
        return {self.weight_name: (self.out_channels, self.in_channels, 3, 3)}

    def forward(self, x, ctx):
        out = ad.conv2d(x, ctx.params[self.weight_name], self.stride)
        if self.mask is not None:
            out = ad.channel_mask(out, self.mask)
        return out

    def __repr__(self):
        return f"Conv2d({self.name}, {self.in_channels}->{self.out_channels}, stride={self.stride})"


class BatchNorm(Layer):
    def __init__(self, name: str, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.name = name
        self.channels = channels
        self.momentum = momentum
        self.eps = eps

    def parameters(self):
        return {f"{self.name}.gamma": (self.channels,), f"{self.name}.beta": (self.channels,)}

    def buffer_names(self) -> Tuple[str, str]:
        return f"{self.name}.running_mean", f"{self.name}.running_var"

    def forward(self, x, ctx):
        gamma = ctx.params[f"{self.name}.gamma"]
        beta = ctx.params[f"{self.name}.beta"]
        if ctx.batch_stats:
            out, mean, var = ad.batch_norm_train(x, gamma, beta, self.eps)
            count = x.size // x.shape[1]
            ctx.stat_updates[self.name] = (mean, var, count)
            return out
        mean_name, var_name = self.buffer_names()
        return ad.batch_norm_eval(x, gamma, beta, ctx.buffers[mean_name], ctx.buffers[var_name], self.eps)

    def __repr__(self):
        return f"BatchNorm({self.name}, {self.channels})"


class ReLU(Layer):
    def forward(self, x, ctx):
        return ad.relu(x)


class GlobalAvgPool(Layer):
    def forward(self, x, ctx):
        return ad.global_avg_pool(x)


class Flatten(Layer):
    def forward(self, x, ctx):
        return ad.reshape(x, (x.shape[0], -1))


class Linear(Layer):
    def __init__(self, name: str, in_features: int, out_features: int):
        self.name = name
        self.in_features = in_features
        self.out_features = out_features

    @property
    def weight_name(self) -> str:
        return f"{self.name}.weight"

    def parameters(self):
        return {
            self.weight_name: (self.out_features, self.in_features),
            f"{self.name}.bias": (self.out_features,),
        }

    def forward(self, x, ctx):
        if x.data.ndim != 2 or x.shape[1] != self.in_features:
            raise DimensionError(f"{self.name}: expected N x {self.in_features} input, got {x.shape}")
        out = ad.matmul(x, ad.transpose(ctx.params[self.weight_name]))
        return ad.add_bias(out, ctx.params[f"{self.name}.bias"])

    def __repr__(self):
        return f"Linear({self.name}, {self.in_features}->{self.out_features})"


class ResidualBlock(Layer):
    """conv-bn-relu-conv-bn residual mapping plus a parameter-free shortcut.

    In train mode with positive noise the mapping's output receives
    N(0, noise_std^2) noise before the skip-add.
    """

    def __init__(self, name: str, in_channels: int, out_channels: int, stride: int = 1):
        self.name = name
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.stride = stride
        self.conv1 = Conv2d(f"{name}.conv1", in_channels, out_channels, stride)
        self.bn1 = BatchNorm(f"{name}.bn1", out_channels)
        self.relu = ReLU()
        self.conv2 = Conv2d(f"{name}.conv2", out_channels, out_channels, 1)
        self.bn2 = BatchNorm(f"{name}.bn2", out_channels)

    @property
    def inner(self) -> List[Layer]:
        return [self.conv1, self.bn1, self.relu, self.conv2, self.bn2]

    @property
    def identity_shortcut(self) -> bool:
        return self.stride == 1 and self.in_channels == self.out_channels

    def parameters(self):
        params = {}
        for layer in self.inner:
            params.update(layer.parameters())
        return params

    def forward(self, x, ctx):
        residual = x
        for layer in self.inner:
            residual = layer.forward(residual, ctx)
        if ctx.mode == "train" and ctx.noise_std > 0:
            noise = ctx.rng.normal(0.0, ctx.noise_std, size=residual.shape)
            residual = ad.add(residual, Tensor(noise))
            ctx.noise_sites.append(self.name)
        skip = x if self.identity_shortcut else ad.shortcut(x, self.out_channels, self.stride)
        return ad.relu(ad.add(residual, skip))

    def __repr__(self):
        return f"ResidualBlock({self.name}, {self.in_channels}->{self.out_channels}, stride={self.stride})"


class ChannelRef(NamedTuple):
    layer: str
    index: int
    weights: np.ndarray


def walk(chain: Sequence[Layer]) -> Iterator[Layer]:
    """Yield every leaf layer in execution order, descending into residual blocks."""
    for layer in chain:
        if isinstance(layer, ResidualBlock):
            yield from layer.inner
        else:
            yield layer


class Network:
    """Ensemble of layer chains plus the registries their arrays live in."""

    def __init__(self, spec: NetworkSpec, members: List[List[Layer]],
                 weights: Dict[str, np.ndarray], buffers: Optional[Dict[str, np.ndarray]] = None):
        self.spec = spec
        self.members = members
        self.weights = weights
        self.buffers = buffers if buffers is not None else {}
        self.mode = "eval"
        self._check_registry()

    def _check_registry(self) -> None:
        expected = {}
        for chain in self.members:
            for layer in chain:
                for name, shape in layer.parameters().items():
                    if name in expected:
                        raise ContractError(f"layer array {name} registered twice")
                    expected[name] = shape
        if set(expected) != set(self.weights):
            missing = sorted(set(expected) - set(self.weights))
            extra = sorted(set(self.weights) - set(expected))
            raise ContractError(f"weight registry mismatch: missing {missing}, unexpected {extra}")
        for name, shape in expected.items():
            if self.weights[name].shape != shape:
                raise DimensionError(f"{name}: registry shape {self.weights[name].shape}, layer expects {shape}")
        for layer in self.layers():
            if isinstance(layer, BatchNorm):
                for buffer_name in layer.buffer_names():
                    if buffer_name not in self.buffers:
                        raise ContractError(f"missing buffer {buffer_name}")

    def layers(self) -> Iterator[Layer]:
        for chain in self.members:
            yield from walk(chain)

    @property
    def conv_layers(self) -> List[Conv2d]:
        return [layer for layer in self.layers() if isinstance(layer, Conv2d)]

    @property
    def quantizable(self) -> List[str]:
        """Conv and classifier weight matrices, in execution order."""
        return [layer.weight_name for layer in self.layers() if isinstance(layer, (Conv2d, Linear))]

    @property
    def boundary_weights(self) -> Tuple[set, set]:
        """Names of each member's first and last quantizable weight."""
        first, last = set(), set()
        for chain in self.members:
            names = [layer.weight_name for layer in walk(chain) if isinstance(layer, (Conv2d, Linear))]
            if names:
                first.add(names[0])
                last.add(names[-1])
        return first, last

    def parameter_count(self) -> int:
        return int(sum(v.size for v in self.weights.values()))

    def weight_count(self) -> int:
        """Number of conv and classifier weights (biases and batch-norm excluded)."""
        return int(sum(self.weights[name].size for name in self.quantizable))

    def copy(self) -> "Network":
        return copy.deepcopy(self)

    def train(self) -> "Network":
        self.mode = "train"
        return self

    def eval(self) -> "Network":
        self.mode = "eval"
        return self

    def __repr__(self):
        return (f"Network(arch={self.spec.arch}, members={len(self.members)}, "
                f"weights={self.weight_count()}, params={self.parameter_count()})")


def _stem_and_stages(spec: NetworkSpec, prefix: str) -> List[Layer]:
    channels = spec.input_shape[0]
    width = spec.widths[0]
    chain: List[Layer] = [
        Conv2d(f"{prefix}.stem.conv", channels, width, 1),
        BatchNorm(f"{prefix}.stem.bn", width),
        ReLU(),
    ]
    in_ch = width
    for stage, (count, out_ch) in enumerate(zip(spec.blocks, spec.widths)):
        for block in range(count):
            stride = 2 if stage > 0 and block == 0 else 1
            chain.append(ResidualBlock(f"{prefix}.s{stage}.b{block}", in_ch, out_ch, stride))
            in_ch = out_ch
    chain += [GlobalAvgPool(), Linear(f"{prefix}.fc", in_ch, spec.num_classes)]
    return chain


def _mlp(spec: NetworkSpec, prefix: str) -> List[Layer]:
    features = int(np.prod(spec.input_shape))
    chain: List[Layer] = [Flatten()]
    for i, size in enumerate(spec.hidden):
        chain += [Linear(f"{prefix}.h{i}", features, size), ReLU()]
        features = size
    chain.append(Linear(f"{prefix}.fc", features, spec.num_classes))
    return chain


def init_arrays(chain: Sequence[Layer], rng: np.random.Generator) -> Tuple[Dict[str, np.ndarray], Dict[str, np.ndarray]]:
    """Fan-in scaled Gaussian weights, unit BN scales, zero shifts and biases."""
    weights: Dict[str, np.ndarray] = {}
    buffers: Dict[str, np.ndarray] = {}
    for layer in walk(chain):
        if isinstance(layer, Conv2d):
            fan_in = layer.in_channels * 9
            shape = (layer.out_channels, layer.in_channels, 3, 3)
            weights[layer.weight_name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        elif isinstance(layer, Linear):
            shape = (layer.out_features, layer.in_features)
            weights[layer.weight_name] = rng.normal(0.0, np.sqrt(2.0 / layer.in_features), size=shape)
            weights[f"{layer.name}.bias"] = np.zeros(layer.out_features)
        elif isinstance(layer, BatchNorm):
            weights[f"{layer.name}.gamma"] = np.ones(layer.channels)
            weights[f"{layer.name}.beta"] = np.zeros(layer.channels)
            mean_name, var_name = layer.buffer_names()
            buffers[mean_name] = np.zeros(layer.channels)
            buffers[var_name] = np.ones(layer.channels)
    return weights, buffers


def build_network(spec: NetworkSpec, seed: int = 0) -> Network:
    """Build ``spec.ensemble`` independently initialized members.

    Each member draws from its own child of ``SeedSequence(seed)``.
    """
    children = np.random.SeedSequence(seed).spawn(spec.ensemble)
    members: List[List[Layer]] = []
    weights: Dict[str, np.ndarray] = {}
    buffers: Dict[str, np.ndarray] = {}
    for index, child in enumerate(children):
        prefix = f"m{index}"
        chain = _stem_and_stages(spec, prefix) if spec.arch == "resnet" else _mlp(spec, prefix)
        member_weights, member_buffers = init_arrays(chain, np.random.default_rng(child))
        weights.update(member_weights)
        buffers.update(member_buffers)
        members.append(chain)
    net = Network(spec, members, weights, buffers)
    logger.debug(f"Built {net!r}")
    return net


def forward(
    net: Network,
    batch: Union[Tensor, np.ndarray],
    mode: Optional[str] = None,
    rng: Optional[np.random.Generator] = None,
    *,
    params: Optional[Mapping[str, Tensor]] = None,
    batch_stats: bool = False,
) -> Tensor:
    """Ensemble-averaged logits of ``batch``.

    Args:
        net: The network.
        batch: N x C x H x W inputs in pixel space.
        mode: ``"train"`` enables noise injection; defaults to ``net.mode``.
        rng: Noise source, required in train mode when ``noise_std > 0``.
        params: Optional tensors (typically tape variables) replacing registry entries.
        batch_stats: Normalize with batch statistics and update running averages.

    Returns:
        N x num_classes logits.
    """
    mode = mode or net.mode
    if mode not in MODES:
        raise ContractError(f"mode must be one of {MODES}, got {mode!r}")
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    if x.data.ndim != 4 or x.shape[1:] != net.spec.input_shape:
        raise DimensionError(f"batch shape {x.shape} does not match input shape {net.spec.input_shape}")
    noise_std = net.spec.noise_std
    if mode == "train" and noise_std > 0 and rng is None:
        raise ContractError("train-mode forward with noise needs an rng")

    tensors = {name: Tensor(array) for name, array in net.weights.items()}
    if params:
        tensors.update(params)
    ctx = ForwardContext(tensors, mode, rng, noise_std, batch_stats, buffers=net.buffers)

    if net.spec.input_mean is not None:
        x = ad.add_scalar(x, -net.spec.input_mean)
    if net.spec.input_std is not None:
        x = ad.mul_scalar(x, 1.0 / net.spec.input_std)

    total = None
    for chain in net.members:
        h = x
        for layer in chain:
            h = layer.forward(h, ctx)
        total = h if total is None else ad.add(total, h)
    logits = ad.mul_scalar(total, 1.0 / len(net.members))

    if batch_stats:
        _commit_running_stats(net, ctx.stat_updates)
    return logits


def _commit_running_stats(net: Network, updates: Mapping[str, Tuple[np.ndarray, np.ndarray, int]]) -> None:
    bn_layers = {layer.name: layer for layer in net.layers() if isinstance(layer, BatchNorm)}
    for name, (mean, var, count) in updates.items():
        layer = bn_layers[name]
        mean_name, var_name = layer.buffer_names()
        unbiased = var * count / max(count - 1, 1)
        m = layer.momentum
        net.buffers[mean_name] = (1 - m) * net.buffers[mean_name] + m * mean
        net.buffers[var_name] = (1 - m) * net.buffers[var_name] + m * unbiased


def predict(net: Network, images: np.ndarray) -> np.ndarray:
    return forward(net, images, mode="eval").data.argmax(axis=1)


def conv_channels(net: Network) -> List[ChannelRef]:
    """One entry per output channel of every conv layer, in execution order."""
    refs = []
    for conv in net.conv_layers:
        kernel = net.weights[conv.weight_name]
        refs.extend(ChannelRef(conv.name, j, kernel[j]) for j in range(conv.out_channels))
    return refs
