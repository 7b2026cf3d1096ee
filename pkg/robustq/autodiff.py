"""Minimal reverse-mode differentiation over dense float64 arrays.

Every operation computes its forward value eagerly with numpy. When at least
one input lives on a ``Tape`` the operation is appended to that tape together
with whatever activations its backward rule needs; ``backward`` then walks the
tape once in reverse order and returns gradients for the tape's leaves.

Tensors that are not on a tape are constants. Mixing a constant with a taped
tensor registers the constant on the tape so every entry refers to value ids.

Shapes are explicit: apart from tensor-scalar arithmetic nothing broadcasts.
Per-channel operations (bias, batch norm, masks) take the channel axis to be
axis 1.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, float, int, Sequence[float]]


class Tensor:
    """A dense row-major float64 array, optionally recorded on a tape."""

    __slots__ = ("data", "tape", "id")

    def __init__(self, data: ArrayLike, tape: Optional["Tape"] = None, id: Optional[int] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.id = id

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def __repr__(self) -> str:
        where = f", id={self.id}" if self.tape is not None else ""
        return f"Tensor(shape={self.shape}{where})"

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, float(other))

    def __radd__(self, other):
        return self.__add__(other)

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return add_scalar(self, -float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return mul_scalar(self, float(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return mul_scalar(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class TapeEntry:
    """One recorded operation."""

    kind: str
    inputs: Tuple[int, ...]
    output: int
    saved: tuple
    needs: Tuple[bool, ...]


class Tape:
    """Ordered record of operations, single writer.

    Entries are appended as operations execute, so every input id precedes the
    entry that consumes it.
    """

    def __init__(self):
        self.entries: List[TapeEntry] = []
        self._shapes: Dict[int, Tuple[int, ...]] = {}
        self._leaves: List[int] = []
        self._requires: set = set()
        self._next_id = 0

    def __len__(self) -> int:
        return len(self.entries)

    def _new_id(self, shape: Tuple[int, ...]) -> int:
        value_id = self._next_id
        self._next_id += 1
        self._shapes[value_id] = shape
        return value_id

    def variable(self, data: ArrayLike) -> Tensor:
        """Register a leaf whose gradient ``backward`` reports."""
        array = np.array(data, dtype=np.float64)
        value_id = self._new_id(array.shape)
        self._leaves.append(value_id)
        self._requires.add(value_id)
        return Tensor(array, self, value_id)

    def constant(self, tensor: Tensor) -> Tensor:
        if tensor.tape is self:
            return tensor
        if tensor.tape is not None:
            raise ContractError("tensor belongs to a different tape")
        return Tensor(tensor.data, self, self._new_id(tensor.shape))

    @property
    def leaves(self) -> Tuple[int, ...]:
        return tuple(self._leaves)

    def record(self, kind: str, inputs: Sequence[Tensor], output: np.ndarray, saved: tuple) -> Tensor:
        bound = [self.constant(t) for t in inputs]
        needs = tuple(t.id in self._requires for t in bound)
        out_id = self._new_id(output.shape)
        if any(needs):
            self._requires.add(out_id)
        self.entries.append(TapeEntry(kind, tuple(t.id for t in bound), out_id, saved, needs))
        return Tensor(output, self, out_id)

    def gradient(self, loss: Tensor, wrt):
        """Gradients of ``loss`` for a tensor, a sequence or a mapping of leaves."""
        grads = backward(self, loss)
        if isinstance(wrt, Tensor):
            return grads[wrt.id]
        if isinstance(wrt, Mapping):
            return {key: grads[t.id] for key, t in wrt.items()}
        return [grads[t.id] for t in wrt]


BackwardRule = Callable[[tuple, np.ndarray, Tuple[bool, ...]], Tuple[Optional[np.ndarray], ...]]
_BACKWARD: Dict[str, BackwardRule] = {}


def backward_rule(kind: str):
    """Register the gradient rule of an operation kind."""

    def register(fn: BackwardRule) -> BackwardRule:
        _BACKWARD[kind] = fn
        return fn

    return register


def backward(tape: Tape, loss: Tensor) -> Dict[int, np.ndarray]:
    """Reverse sweep over ``tape`` starting from the scalar ``loss``.

    Returns a map from leaf id to gradient; leaves the loss does not depend on
    get zeros.
    """
    if loss.tape is not tape or loss.id is None:
        raise ContractError("loss was not recorded on this tape")
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")

    grads: Dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
    for entry in reversed(tape.entries):
        grad_out = grads.pop(entry.output, None)
        if grad_out is None or not any(entry.needs):
            continue
        input_grads = _BACKWARD[entry.kind](entry.saved, grad_out, entry.needs)
        for value_id, needed, grad in zip(entry.inputs, entry.needs, input_grads):
            if not needed or grad is None:
                continue
            if value_id in grads:
                grads[value_id] = grads[value_id] + grad
            else:
                grads[value_id] = grad

    return {
        leaf: grads.get(leaf, np.zeros(tape._shapes[leaf]))
        for leaf in tape.leaves
    }


def _lift(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _tape_of(inputs: Iterable[Tensor]) -> Optional[Tape]:
    tape = None
    for t in inputs:
        if t.tape is None:
            continue
        if tape is not None and t.tape is not tape:
            raise ContractError("operation mixes tensors from different tapes")
        tape = t.tape
    return tape


def _emit(kind: str, inputs: Sequence[Tensor], output: np.ndarray, saved: tuple = ()) -> Tensor:
    tape = _tape_of(inputs)
    if tape is None:
        return Tensor(output)
    return tape.record(kind, inputs, output, saved)


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _channel_view(v: np.ndarray, ndim: int) -> np.ndarray:
    return v.reshape((1, -1) + (1,) * (ndim - 2))


def _channel_axes(ndim: int) -> Tuple[int, ...]:
    return (0,) + tuple(range(2, ndim))


# Elementwise arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    _same_shape("add", a, b)
    return _emit("add", (a, b), a.data + b.data)


@backward_rule("add")
def _add_backward(saved, g, needs):
    return g, g


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    _same_shape("sub", a, b)
    return _emit("sub", (a, b), a.data - b.data)


@backward_rule("sub")
def _sub_backward(saved, g, needs):
    return g, -g


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    _same_shape("mul", a, b)
    return _emit("mul", (a, b), a.data * b.data, (a.data, b.data))


@backward_rule("mul")
def _mul_backward(saved, g, needs):
    a, b = saved
    return g * b, g * a


def mul_scalar(a: Tensor, c: float) -> Tensor:
    a = _lift(a)
    return _emit("mul_scalar", (a,), a.data * c, (c,))


@backward_rule("mul_scalar")
def _mul_scalar_backward(saved, g, needs):
    return (g * saved[0],)


def add_scalar(a: Tensor, c: float) -> Tensor:
    a = _lift(a)
    return _emit("add_scalar", (a,), a.data + c)


@backward_rule("add_scalar")
def _add_scalar_backward(saved, g, needs):
    return (g,)


def relu(a: Tensor) -> Tensor:
    a = _lift(a)
    mask = a.data > 0
    return _emit("relu", (a,), np.where(mask, a.data, 0.0), (mask,))


@backward_rule("relu")
def _relu_backward(saved, g, needs):
    return (g * saved[0],)


def tanh(a: Tensor) -> Tensor:
    a = _lift(a)
    out = np.tanh(a.data)
    return _emit("tanh", (a,), out, (out,))


@backward_rule("tanh")
def _tanh_backward(saved, g, needs):
    out = saved[0]
    return (g * (1.0 - out * out),)


def sign(a: Tensor) -> Tensor:
    """Componentwise sign with sign(0) = 0; its gradient is zero."""
    a = _lift(a)
    return _emit("sign", (a,), np.sign(a.data))


@backward_rule("sign")
def _sign_backward(saved, g, needs):
    return (np.zeros_like(g),)


def abs(a: Tensor) -> Tensor:  # noqa: A001
    a = _lift(a)
    return _emit("abs", (a,), np.abs(a.data), (np.sign(a.data),))


@backward_rule("abs")
def _abs_backward(saved, g, needs):
    return (g * saved[0],)


def mean(a: Tensor) -> Tensor:
    a = _lift(a)
    return _emit("mean", (a,), np.asarray(a.data.mean()), (a.shape, a.size))


@backward_rule("mean")
def _mean_backward(saved, g, needs):
    shape, size = saved
    return (np.full(shape, float(g) / size),)


def sum(a: Tensor) -> Tensor:  # noqa: A001
    a = _lift(a)
    return _emit("sum", (a,), np.asarray(a.data.sum()), (a.shape,))


@backward_rule("sum")
def _sum_backward(saved, g, needs):
    return (np.full(saved[0], float(g)),)


# Shape manipulation


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    a = _lift(a)
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from exc
    return _emit("reshape", (a,), out, (a.shape,))


@backward_rule("reshape")
def _reshape_backward(saved, g, needs):
    return (g.reshape(saved[0]),)


def transpose(a: Tensor) -> Tensor:
    a = _lift(a)
    if a.data.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {a.shape}")
    return _emit("transpose", (a,), np.ascontiguousarray(a.data.T))


@backward_rule("transpose")
def _transpose_backward(saved, g, needs):
    return (g.T,)


# Linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(f"matmul expects matrices, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner dimensions {a.shape} x {b.shape} disagree")
    return _emit("matmul", (a, b), a.data @ b.data, (a.data, b.data))


@backward_rule("matmul")
def _matmul_backward(saved, g, needs):
    a, b = saved
    grad_a = g @ b.T if needs[0] else None
    grad_b = a.T @ g if needs[1] else None
    return grad_a, grad_b


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a per-channel vector along axis 1."""
    x, bias = _lift(x), _lift(bias)
    if bias.data.ndim != 1 or x.data.ndim < 2 or x.shape[1] != bias.shape[0]:
        raise DimensionError(f"add_bias: cannot add {bias.shape} to channels of {x.shape}")
    out = x.data + _channel_view(bias.data, x.data.ndim)
    return _emit("add_bias", (x, bias), out, (x.data.ndim,))


@backward_rule("add_bias")
def _add_bias_backward(saved, g, needs):
    ndim = saved[0]
    return g, g.sum(axis=_channel_axes(ndim))


def channel_mask(x: Tensor, mask: np.ndarray) -> Tensor:
    """Multiply each channel of ``x`` by a constant 0/1 mask."""
    x = _lift(x)
    mask = np.asarray(mask, dtype=np.float64)
    if mask.ndim != 1 or x.shape[1] != mask.shape[0]:
        raise DimensionError(f"channel_mask: mask {mask.shape} does not fit {x.shape}")
    view = _channel_view(mask, x.data.ndim)
    return _emit("channel_mask", (x,), x.data * view, (view,))


@backward_rule("channel_mask")
def _channel_mask_backward(saved, g, needs):
    return (g * saved[0],)


# Convolution


def conv_output_size(size: int, stride: int) -> int:
    return (size + 2 - 3) // stride + 1


def _im2col(x: np.ndarray, stride: int) -> np.ndarray:
    padded = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    windows = sliding_window_view(padded, (3, 3), axis=(2, 3))
    return windows[:, :, ::stride, ::stride]


def conv2d(x: Tensor, k: Tensor, stride: int = 1) -> Tensor:
    """3x3 cross-correlation with padding 1.

    Input channels are accumulated one at a time in index order. An input
    channel that is exactly zero therefore contributes exactly nothing, and
    removing it from both ``x`` and ``k`` leaves the output bit-identical.
    """
    x, k = _lift(x), _lift(k)
    if stride not in (1, 2):
        raise ContractError(f"conv2d supports stride 1 or 2, got {stride}")
    if x.data.ndim != 4 or k.data.ndim != 4 or k.shape[2:] != (3, 3):
        raise DimensionError(f"conv2d expects NxCxHxW input and Ox Cx3x3 kernels, got {x.shape}, {k.shape}")
    n, channels, height, width = x.shape
    out_channels = k.shape[0]
    if k.shape[1] != channels:
        raise DimensionError(f"conv2d: input has {channels} channels, kernels expect {k.shape[1]}")

    windows = _im2col(x.data, stride)
    out_h, out_w = windows.shape[2], windows.shape[3]
    rows = n * out_h * out_w
    out = np.zeros((rows, out_channels))
    for c in range(channels):
        cols_c = np.ascontiguousarray(windows[:, c].reshape(n, out_h, out_w, 9)).reshape(rows, 9)
        kernel_c = np.ascontiguousarray(k.data[:, c].reshape(out_channels, 9).T)
        out += cols_c @ kernel_c
    out = np.ascontiguousarray(out.reshape(n, out_h, out_w, out_channels).transpose(0, 3, 1, 2))
    return _emit("conv2d", (x, k), out, (x.data, k.data, stride))


@backward_rule("conv2d")
def _conv2d_backward(saved, g, needs):
    x, k, stride = saved
    n, channels, height, width = x.shape
    out_channels = k.shape[0]
    out_h, out_w = g.shape[2], g.shape[3]
    g_rows = g.transpose(0, 2, 3, 1).reshape(-1, out_channels)

    grad_k = None
    if needs[1]:
        windows = _im2col(x, stride)
        cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(-1, channels * 9)
        grad_k = (g_rows.T @ cols).reshape(k.shape)

    grad_x = None
    if needs[0]:
        dcols = (g_rows @ k.reshape(out_channels, channels * 9)).reshape(n, out_h, out_w, channels, 3, 3)
        padded = np.zeros((n, channels, height + 2, width + 2))
        h_end = stride * (out_h - 1) + 1
        w_end = stride * (out_w - 1) + 1
        for i in range(3):
            for j in range(3):
                padded[:, :, i:i + h_end:stride, j:j + w_end:stride] += dcols[..., i, j].transpose(0, 3, 1, 2)
        grad_x = padded[:, :, 1:-1, 1:-1]
    return grad_x, grad_k


def shortcut(x: Tensor, out_channels: int, stride: int) -> Tensor:
    """Parameter-free residual shortcut: subsample by ``stride`` and zero-pad channels."""
    x = _lift(x)
    channels = x.shape[1]
    if out_channels < channels:
        raise DimensionError(f"shortcut cannot shrink {channels} channels to {out_channels}")
    sub_x = x.data[:, :, ::stride, ::stride]
    lo = (out_channels - channels) // 2
    out = np.zeros((sub_x.shape[0], out_channels) + sub_x.shape[2:])
    out[:, lo:lo + channels] = sub_x
    return _emit("shortcut", (x,), out, (x.shape, lo, stride))


@backward_rule("shortcut")
def _shortcut_backward(saved, g, needs):
    shape, lo, stride = saved
    grad = np.zeros(shape)
    grad[:, :, ::stride, ::stride] = g[:, lo:lo + shape[1]]
    return (grad,)


def global_avg_pool(x: Tensor) -> Tensor:
    x = _lift(x)
    if x.data.ndim != 4:
        raise DimensionError(f"global_avg_pool expects NxCxHxW, got {x.shape}")
    return _emit("global_avg_pool", (x,), x.data.mean(axis=(2, 3)), (x.shape,))


@backward_rule("global_avg_pool")
def _gap_backward(saved, g, needs):
    shape = saved[0]
    area = shape[2] * shape[3]
    return (np.broadcast_to(g[:, :, None, None] / area, shape).copy(),)


# Normalization


def batch_norm_eval(
    x: Tensor, gamma: Tensor, beta: Tensor, mean: np.ndarray, var: np.ndarray, eps: float
) -> Tensor:
    """Per-channel affine normalization with fixed statistics."""
    x, gamma, beta = _lift(x), _lift(gamma), _lift(beta)
    ndim = x.data.ndim
    inv_std = 1.0 / np.sqrt(np.asarray(var) + eps)
    xhat = (x.data - _channel_view(np.asarray(mean), ndim)) * _channel_view(inv_std, ndim)
    out = _channel_view(gamma.data, ndim) * xhat + _channel_view(beta.data, ndim)
    return _emit("batch_norm_eval", (x, gamma, beta), out, (xhat, gamma.data, inv_std, ndim))


@backward_rule("batch_norm_eval")
def _bn_eval_backward(saved, g, needs):
    xhat, gamma, inv_std, ndim = saved
    axes = _channel_axes(ndim)
    grad_x = g * _channel_view(gamma * inv_std, ndim)
    return grad_x, (g * xhat).sum(axis=axes), g.sum(axis=axes)


def batch_norm_train(
    x: Tensor, gamma: Tensor, beta: Tensor, eps: float
) -> Tuple[Tensor, np.ndarray, np.ndarray]:
    """Normalize with the batch's own per-channel statistics.

    Returns the output together with the batch mean and biased variance so the
    caller can update running averages.
    """
    x, gamma, beta = _lift(x), _lift(gamma), _lift(beta)
    ndim = x.data.ndim
    axes = _channel_axes(ndim)
    batch_mean = x.data.mean(axis=axes)
    batch_var = x.data.var(axis=axes)
    inv_std = 1.0 / np.sqrt(batch_var + eps)
    xhat = (x.data - _channel_view(batch_mean, ndim)) * _channel_view(inv_std, ndim)
    out = _channel_view(gamma.data, ndim) * xhat + _channel_view(beta.data, ndim)
    count = x.data.size // x.shape[1]
    tensor = _emit("batch_norm_train", (x, gamma, beta), out, (xhat, gamma.data, inv_std, ndim, count))
    return tensor, batch_mean, batch_var


@backward_rule("batch_norm_train")
def _bn_train_backward(saved, g, needs):
    xhat, gamma, inv_std, ndim, count = saved
    axes = _channel_axes(ndim)
    grad_gamma = (g * xhat).sum(axis=axes)
    grad_beta = g.sum(axis=axes)
    grad_x = None
    if needs[0]:
        dxhat = g * _channel_view(gamma, ndim)
        sum_dxhat = _channel_view(dxhat.sum(axis=axes), ndim)
        sum_dxhat_xhat = _channel_view((dxhat * xhat).sum(axis=axes), ndim)
        grad_x = _channel_view(inv_std, ndim) / count * (count * dxhat - sum_dxhat - xhat * sum_dxhat_xhat)
    return grad_x, grad_gamma, grad_beta


# Losses


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _check_labels(logits: Tensor, labels) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2:
        raise DimensionError(f"expected NxK logits, got {logits.shape}")
    if labels.shape != (logits.shape[0],):
        raise DimensionError(f"{labels.shape[0] if labels.ndim else 0} labels for {logits.shape[0]} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise IndexError(f"labels must lie in [0, {logits.shape[1]})")
    return labels


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of the true class."""
    logits = _lift(logits)
    labels = _check_labels(logits, labels)
    logp = log_softmax(logits.data)
    rows = np.arange(labels.size)
    loss = -logp[rows, labels].mean()
    return _emit("softmax_cross_entropy", (logits,), np.asarray(loss), (np.exp(logp), labels))


@backward_rule("softmax_cross_entropy")
def _sce_backward(saved, g, needs):
    probs, labels = saved
    grad = probs.copy()
    grad[np.arange(labels.size), labels] -= 1.0
    return (grad * (float(g) / labels.size),)


def kl_divergence(p_logits: Tensor, q_logits: Tensor) -> Tensor:
    """Batch mean of KL(softmax(p) || softmax(q)); differentiable in both."""
    p_logits, q_logits = _lift(p_logits), _lift(q_logits)
    _same_shape("kl_divergence", p_logits, q_logits)
    logp = log_softmax(p_logits.data)
    logq = log_softmax(q_logits.data)
    p = np.exp(logp)
    ratio = logp - logq
    value = (p * ratio).sum() / p.shape[0]
    return _emit("kl_divergence", (p_logits, q_logits), np.asarray(value), (p, np.exp(logq), ratio))


@backward_rule("kl_divergence")
def _kl_backward(saved, g, needs):
    p, q, ratio = saved
    scale = float(g) / p.shape[0]
    grad_p = p * (ratio - (p * ratio).sum(axis=1, keepdims=True)) * scale
    grad_q = (q - p) * scale
    return grad_p, grad_q


def soft_cross_entropy(target_logits: Tensor, logits: Tensor) -> Tensor:
    """Batch mean of the cross-entropy of softmax(logits) against soft labels softmax(target)."""
    target_logits, logits = _lift(target_logits), _lift(logits)
    _same_shape("soft_cross_entropy", target_logits, logits)
    p = np.exp(log_softmax(target_logits.data))
    logq = log_softmax(logits.data)
    value = -(p * logq).sum() / p.shape[0]
    return _emit("soft_cross_entropy", (target_logits, logits), np.asarray(value), (p, logq))


@backward_rule("soft_cross_entropy")
def _soft_ce_backward(saved, g, needs):
    p, logq = saved
    scale = float(g) / p.shape[0]
    neg_logq = -logq
    grad_target = p * (neg_logq - (p * neg_logq).sum(axis=1, keepdims=True)) * scale
    grad_logits = (np.exp(logq) - p) * scale
    return grad_target, grad_logits


def cw_margin(logits: Tensor, labels, kappa: float = 0.0) -> Tensor:
    """Batch mean of max(Z_y - max_{j != y} Z_j, -kappa)."""
    logits = _lift(logits)
    labels = _check_labels(logits, labels)
    rows = np.arange(labels.size)
    true = logits.data[rows, labels]
    others = logits.data.copy()
    others[rows, labels] = -np.inf
    runner_up = others.argmax(axis=1)
    margin = true - others[rows, runner_up]
    active = margin > -kappa
    value = np.where(active, margin, -kappa).mean()
    return _emit("cw_margin", (logits,), np.asarray(value), (logits.shape, labels, runner_up, active))


@backward_rule("cw_margin")
def _cw_backward(saved, g, needs):
    shape, labels, runner_up, active = saved
    rows = np.arange(labels.size)
    grad = np.zeros(shape)
    step = active * (float(g) / labels.size)
    grad[rows, labels] += step
    grad[rows, runner_up] -= step
    return (grad,)


def grad_check(fn: Callable[[Tensor], Tensor], point: ArrayLike, h: float = 1e-4) -> float:
    """Compare backward gradients of scalar ``fn`` at ``point`` with central differences.

    Returns max_i |analytic_i - numeric_i| relative to the largest gradient
    magnitude, so coordinates with tiny gradients do not dominate.
    """
    if h <= 0:
        raise ContractError("grad_check step h must be positive")
    base = np.array(point, dtype=np.float64)
    tape = Tape()
    x = tape.variable(base)
    analytic = tape.gradient(fn(x), x)

    numeric = np.zeros_like(base)
    flat = numeric.reshape(-1)
    for i in range(base.size):
        shifted = base.copy().reshape(-1)
        shifted[i] += h
        upper = fn(Tensor(shifted.reshape(base.shape))).item()
        shifted[i] -= 2 * h
        lower = fn(Tensor(shifted.reshape(base.shape))).item()
        flat[i] = (upper - lower) / (2 * h)

    scale = max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0))
    if scale == 0.0:
        return 0.0
    error = float(np.max(np.abs(analytic - numeric)) / scale)
    logger.debug(f"grad_check: {base.size} coordinates, max relative error {error:.3e}")
    return error
