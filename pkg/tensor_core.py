#!/usr/bin/env python3
"""
🧮 Tensor Core - dense tensors with a reverse-mode gradient tape

Everything the ViG stack differentiates goes through the ops in this module:
matmul, grouped (multi-head) matmul, GELU, batch norm, max over neighbor sets,
neighbor gathers, convolutions and the loss helpers. Ops run eagerly on numpy
arrays; when a GradTape is active they also append a record holding the
backward rule, and `backward` replays that record list in reverse.

Tensors are immutable values. Trainable state lives in `Parameter` holders
whose `value` is swapped for a new Tensor by the optimizer.
"""

import json
import logging
import math
import struct
import threading
from dataclasses import dataclass
from enum import Enum
from itertools import count
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from vig_errors import (
    ContractError,
    DatasetFormatError,
    DegenerateBatchError,
    DimensionError,
    EmptyNeighborhoodError,
    LifecycleError,
    NonFiniteError,
)

logger = logging.getLogger(__name__)

HIGH = "f64"
STANDARD = "f32"
DTYPES = {HIGH: np.dtype(np.float64), STANDARD: np.dtype(np.float32)}

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Mode(Enum):
    TRAIN = "train"
    EVAL = "eval"


def as_mode(mode: Union["Mode", str]) -> "Mode":
    return mode if isinstance(mode, Mode) else Mode(mode)


def resolve_dtype(dtype) -> np.dtype:
    if dtype is None:
        return DTYPES[HIGH]
    if isinstance(dtype, str) and dtype in DTYPES:
        return DTYPES[dtype]
    resolved = np.dtype(dtype)
    if resolved not in DTYPES.values():
        raise DimensionError(f"unsupported dtype {resolved}; expected float32 or float64")
    return resolved


def dtype_tag(dtype: np.dtype) -> str:
    return HIGH if np.dtype(dtype) == DTYPES[HIGH] else STANDARD


class Tensor:
    """Immutable dense array, row-major, float32 or float64."""

    __slots__ = ("data", "grad_node")

    def __init__(self, data, dtype=None):
        if dtype is None and isinstance(data, np.ndarray) and data.dtype in DTYPES.values():
            target = data.dtype
        else:
            target = resolve_dtype(dtype)
        arr = np.array(data, dtype=target, order="C", copy=True)
        arr.setflags(write=False)
        self.data = arr
        self.grad_node: Optional[Tuple[int, int]] = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        arr = np.ascontiguousarray(arr)
        arr.setflags(write=False)
        t.data = arr
        t.grad_node = None
        return t

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> str:
        return dtype_tag(self.data.dtype)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, tensor has shape {self.shape}")
        return float(self.data.reshape(()))

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None) -> "Tensor":
        return sum_(self, axis)

    def mean(self, axis=None) -> "Tensor":
        return mean(self, axis)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype})"


# --------------------------------------------------------------------------
# Parameters
# --------------------------------------------------------------------------

Initializer = Callable[[np.random.Generator, Tuple[int, ...]], np.ndarray]


def normal_init(std: float) -> Initializer:
    return lambda rng, shape: rng.normal(0.0, std, size=shape)


def fan_in_init(fan_in: int, gain: float = 1.0) -> Initializer:
    std = gain / math.sqrt(max(1, fan_in))
    return lambda rng, shape: rng.normal(0.0, std, size=shape)


def zeros_init(rng: np.random.Generator, shape: Tuple[int, ...]) -> np.ndarray:
    return np.zeros(shape)


def ones_init(rng: np.random.Generator, shape: Tuple[int, ...]) -> np.ndarray:
    return np.ones(shape)


class Parameter:
    """Named trainable slot. Shapes are known before values exist."""

    __slots__ = ("name", "shape", "dtype", "init", "_value")

    def __init__(self, name: str, shape: Sequence[int], dtype: str = STANDARD,
                 init: Optional[Initializer] = None):
        self.name = name
        self.shape = tuple(int(s) for s in shape)
        self.dtype = dtype
        self.init = init or zeros_init
        self._value: Optional[Tensor] = None

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))

    @property
    def is_materialized(self) -> bool:
        return self._value is not None

    @property
    def value(self) -> Tensor:
        if self._value is None:
            raise LifecycleError(f"parameter {self.name} is not materialized")
        return self._value

    @value.setter
    def value(self, tensor: Union[Tensor, np.ndarray]) -> None:
        if not isinstance(tensor, Tensor):
            tensor = Tensor(tensor, self.dtype)
        if tensor.shape != self.shape:
            raise DimensionError(f"{self.name}: expected shape {self.shape}, got {tensor.shape}")
        self._value = tensor

    def materialize(self, rng: np.random.Generator) -> None:
        self.value = Tensor(self.init(rng, self.shape), self.dtype)

    def __repr__(self) -> str:
        return f"Parameter({self.name}, shape={self.shape})"


@dataclass
class BatchNormState:
    """Running statistics of one batch-norm layer."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5
    frozen: bool = False

    @classmethod
    def fresh(cls, num_features: int) -> "BatchNormState":
        return cls(np.zeros(num_features), np.ones(num_features))


# --------------------------------------------------------------------------
# Gradient tape
# --------------------------------------------------------------------------

_tape_state = threading.local()
_tape_serial = count(1)


def _active_tape() -> Optional["GradTape"]:
    stack = getattr(_tape_state, "stack", None)
    return stack[-1] if stack else None


@dataclass
class _Record:
    op: str
    inputs: Tuple[Optional[int], ...]
    backward: Optional[Callable]
    shape: Tuple[int, ...]
    dtype: np.dtype


class GradTape:
    """Ordered record of executed ops plus a registry of watched tensors.

    A tape belongs to the thread that entered it. Use as a context manager:

        with GradTape() as tape:
            tape.watch_parameters(model.named_parameters())
            loss = ...
        grads = backward(loss, tape)
    """

    def __init__(self):
        self.serial = next(_tape_serial)
        self.records: List[_Record] = []
        self.params: Dict[str, Tuple[Tensor, int]] = {}
        self._leaf_ids: Dict[int, int] = {}
        self._leaf_grads: Dict[int, np.ndarray] = {}
        self.consumed = False

    def __enter__(self) -> "GradTape":
        stack = getattr(_tape_state, "stack", None)
        if stack is None:
            stack = _tape_state.stack = []
        stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _tape_state.stack.remove(self)

    def _append(self, record: _Record) -> int:
        if self.consumed:
            raise LifecycleError("tape was already replayed; start a new tape for a new forward")
        self.records.append(record)
        return len(self.records) - 1

    def watch(self, name: str, tensor: Tensor) -> Tensor:
        if name in self.params:
            raise ContractError(f"{name} is already watched on this tape")
        node = self._leaf_ids.get(id(tensor))
        if node is None:
            node = self._append(_Record("leaf", (), None, tensor.shape, tensor.data.dtype))
            self._leaf_ids[id(tensor)] = node
        self.params[name] = (tensor, node)
        return tensor

    def watch_parameters(self, params: Mapping[str, Parameter]) -> None:
        for name, param in params.items():
            self.watch(name, param.value)

    def node_of(self, tensor: Tensor) -> Optional[int]:
        node = tensor.grad_node
        if node is not None and node[0] == self.serial:
            return node[1]
        return self._leaf_ids.get(id(tensor))

    def gradient(self, tensor: Tensor) -> np.ndarray:
        """Gradient of a watched tensor after `backward` ran."""
        node = self._leaf_ids.get(id(tensor))
        if node is None:
            raise ContractError("tensor is not watched on this tape")
        if not self.consumed:
            raise LifecycleError("backward has not run on this tape")
        grad = self._leaf_grads.get(node)
        return np.zeros_like(tensor.data) if grad is None else grad


def _emit(op: str, out: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"{op} produced non-finite values")
    result = Tensor._wrap(out)
    tape = _active_tape()
    if tape is None:
        return result
    nodes = tuple(tape.node_of(t) for t in inputs)
    if all(n is None for n in nodes):
        return result
    idx = tape._append(_Record(op, nodes, backward_fn, out.shape, out.dtype))
    result.grad_node = (tape.serial, idx)
    return result


def backward(loss: Tensor, tape: GradTape) -> Dict[str, np.ndarray]:
    """Replay the tape in reverse; return name -> gradient for watched tensors."""
    if tape.consumed:
        raise LifecycleError("tape was already replayed; run a fresh forward first")
    if loss.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.shape}")
    root = tape.node_of(loss)
    if root is None:
        raise ContractError("loss was not produced under this tape")

    grads: List[Optional[np.ndarray]] = [None] * len(tape.records)
    grads[root] = np.ones(loss.shape, dtype=loss.data.dtype)
    for idx in range(root, -1, -1):
        g = grads[idx]
        record = tape.records[idx]
        if g is None or record.backward is None:
            continue
        needs = tuple(n is not None for n in record.inputs)
        for node, gi in zip(record.inputs, record.backward(g, needs)):
            if node is None or gi is None:
                continue
            grads[node] = gi if grads[node] is None else grads[node] + gi
        grads[idx] = None

    leaf_nodes = set(tape._leaf_ids.values())
    tape._leaf_grads = {n: grads[n] for n in leaf_nodes if grads[n] is not None}
    tape.consumed = True
    for record in tape.records:
        record.backward = None

    result = {}
    for name, (tensor, node) in tape.params.items():
        grad = tape._leaf_grads.get(node)
        result[name] = np.zeros_like(tensor.data) if grad is None else grad.astype(tensor.data.dtype, copy=False)
    return result


# --------------------------------------------------------------------------
# Elementwise and structural ops
# --------------------------------------------------------------------------

def _as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(x), dtype)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast(op: str, fn, a: Tensor, b: Tensor) -> np.ndarray:
    try:
        return fn(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from exc


def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    out = _broadcast("add", np.add, a, b)

    def _backward(g, needs):
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(g, b.shape) if needs[1] else None)

    return _emit("add", out, (a, b), _backward)


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    out = _broadcast("sub", np.subtract, a, b)

    def _backward(g, needs):
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(-g, b.shape) if needs[1] else None)

    return _emit("sub", out, (a, b), _backward)


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    out = _broadcast("mul", np.multiply, a, b)

    def _backward(g, needs):
        return (_unbroadcast(g * b.data, a.shape) if needs[0] else None,
                _unbroadcast(g * a.data, b.shape) if needs[1] else None)

    return _emit("mul", out, (a, b), _backward)


def neg(a: Tensor) -> Tensor:
    return _emit("neg", -a.data, (a,), lambda g, needs: (-g,))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {x.shape} to {tuple(shape)}") from exc
    return _emit("reshape", out, (x,), lambda g, needs: (g.reshape(x.shape),))


def sum_(x: Tensor, axis=None) -> Tensor:
    out = np.sum(x.data, axis=axis)

    def _backward(g, needs):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _emit("sum", np.asarray(out), (x,), _backward)


def mean(x: Tensor, axis=None) -> Tensor:
    out = np.mean(x.data, axis=axis)
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([x.shape[a] for a in axes]))

    def _backward(g, needs):
        if axis is None:
            return (np.full(x.shape, g / n, dtype=x.data.dtype),)
        return (np.broadcast_to(np.expand_dims(g, axis) / n, x.shape).copy(),)

    return _emit("mean", np.asarray(out), (x,), _backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def _backward(g, needs):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit("concat", out, tuple(tensors), _backward)


def take_rows(w: Tensor, start: int, stop: int) -> Tensor:
    """Rows start:stop of a matrix, used to split one weight into halves."""
    out = w.data[start:stop]

    def _backward(g, needs):
        full = np.zeros_like(w.data)
        full[start:stop] = g
        return (full,)

    return _emit("take_rows", out, (w,), _backward)


# --------------------------------------------------------------------------
# Linear algebra
# --------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """C = A·B over the last two axes; A may carry leading batch axes."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    out = np.matmul(a.data, b.data)

    def _backward(g, needs):
        ga = gb = None
        if needs[0]:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if needs[1]:
            if b.ndim == 2:
                a2 = a.data.reshape(-1, a.shape[-1])
                gb = a2.T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _emit("matmul", out, (a, b), _backward)


def grouped_matmul(x: Tensor, w: Tensor) -> Tensor:
    """Split the last axis of x into h contiguous blocks, multiply block t by w[t].

    x: (..., h*a), w: (h, a, b) -> (..., h*b)
    """
    h, a, b = w.shape
    if x.shape[-1] != h * a:
        raise DimensionError(f"grouped_matmul: input width {x.shape[-1]} != {h}×{a}")
    lead = x.shape[:-1]
    rows = int(np.prod(lead, dtype=np.int64))
    xs = x.data.reshape(rows, h, a).transpose(1, 0, 2)
    if h == 1:
        out = np.matmul(x.data, w.data[0])
    else:
        out = np.matmul(xs, w.data).transpose(1, 0, 2).reshape(lead + (h * b,))

    def _backward(g, needs):
        gs = g.reshape(rows, h, b).transpose(1, 0, 2)
        gx = gw = None
        if needs[0]:
            gx = np.matmul(gs, w.data.transpose(0, 2, 1)).transpose(1, 0, 2).reshape(x.shape)
        if needs[1]:
            gw = np.matmul(xs.transpose(0, 2, 1), gs)
        return gx, gw

    return _emit("grouped_matmul", out, (x, w), _backward)


# --------------------------------------------------------------------------
# Nonlinearities and normalization
# --------------------------------------------------------------------------

def gelu(x: Tensor) -> Tensor:
    """x·Φ(x) with the exact erf form of the normal CDF."""
    cdf = 0.5 * (1.0 + erf(x.data / _SQRT2))
    out = x.data * cdf

    def _backward(g, needs):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)

    return _emit("gelu", out, (x,), _backward)


def gelu_derivative(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + erf(x / _SQRT2)) + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def batch_norm(x: Tensor, scale: Tensor, shift: Tensor, state: BatchNormState,
               mode: Union[Mode, str]) -> Tensor:
    """Normalize the last axis over all leading axes.

    Train mode uses batch statistics and updates the running statistics;
    eval mode, or a frozen state, uses the running statistics.
    """
    mode = as_mode(mode)
    features = x.shape[-1]
    if scale.shape != (features,) or shift.shape != (features,):
        raise DimensionError(f"batch_norm: {features} features but scale {scale.shape}, shift {shift.shape}")
    x2 = x.data.reshape(-1, features)
    n = x2.shape[0]
    use_batch = mode is Mode.TRAIN and not state.frozen

    if use_batch:
        if n < 2:
            raise DegenerateBatchError(f"batch_norm in train mode needs at least 2 rows, got {n}")
        mu = x2.mean(axis=0)
        var = x2.var(axis=0)
        m = state.momentum
        state.running_mean = (1 - m) * state.running_mean + m * mu
        state.running_var = (1 - m) * state.running_var + m * var * n / (n - 1)
    else:
        mu = state.running_mean.astype(x.data.dtype)
        var = state.running_var.astype(x.data.dtype)

    inv = 1.0 / np.sqrt(var + state.eps)
    xhat = ((x2 - mu) * inv).astype(x.data.dtype, copy=False)
    out = (xhat * scale.data + shift.data).reshape(x.shape)

    def _backward(g, needs):
        g2 = g.reshape(-1, features)
        gscale = (g2 * xhat).sum(axis=0) if needs[1] else None
        gshift = g2.sum(axis=0) if needs[2] else None
        gx = None
        if needs[0]:
            dxhat = g2 * scale.data
            if use_batch:
                gx = inv / n * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
            else:
                gx = dxhat * inv
            gx = gx.reshape(x.shape).astype(x.data.dtype, copy=False)
        return gx, gscale, gshift

    return _emit("batch_norm", out, (x, scale, shift), _backward)


# --------------------------------------------------------------------------
# Neighbor-set ops
# --------------------------------------------------------------------------

def reduce_max_over_set(rows: Tensor, axis: int = -2) -> Tensor:
    """Elementwise max across the set axis; gradient goes to the first argmax."""
    if rows.shape[axis] == 0:
        raise EmptyNeighborhoodError("max over an empty neighbor set")
    arg = np.argmax(rows.data, axis=axis)
    out = np.take_along_axis(rows.data, np.expand_dims(arg, axis), axis=axis).squeeze(axis)

    def _backward(g, needs):
        grad = np.zeros_like(rows.data)
        np.put_along_axis(grad, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis=axis)
        return (grad,)

    return _emit("reduce_max_over_set", out, (rows,), _backward)


def gather_neighbors(x: Tensor, index: np.ndarray) -> Tensor:
    """x: (..., N, D), index: (..., N, K) -> (..., N, K, D) with rows x[index]."""
    *lead, n, d = x.shape
    index = np.asarray(index)
    if tuple(index.shape[:-1]) != tuple(lead) + (n,):
        raise DimensionError(f"gather_neighbors: index {index.shape} does not match features {x.shape}")
    k = index.shape[-1]
    batch = int(np.prod(lead, dtype=np.int64)) if lead else 1
    xb = x.data.reshape(batch, n, d)
    ib = index.reshape(batch, n, k)
    bidx = np.arange(batch)[:, None, None]
    out = xb[bidx, ib].reshape(tuple(lead) + (n, k, d))

    def _backward(g, needs):
        gx = np.zeros((batch, n, d), dtype=x.data.dtype)
        np.add.at(gx, (bidx, ib), g.reshape(batch, n, k, d))
        return (gx.reshape(x.shape),)

    return _emit("gather_neighbors", out, (x,), _backward)


# --------------------------------------------------------------------------
# Image ops (channels-last layout: B×H×W×C)
# --------------------------------------------------------------------------

def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 1) -> Tensor:
    """Cross-correlation with weight (kh, kw, C_in, C_out), no bias."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[-1] != w.shape[2]:
        raise DimensionError(f"conv2d: input {x.shape} incompatible with weight {w.shape}")
    batch, height, width, cin = x.shape
    kh, kw, _, cout = w.shape
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    out_h = (height + 2 * padding - kh) // stride + 1
    out_w = (width + 2 * padding - kw) // stride + 1
    if out_h < 1 or out_w < 1:
        raise DimensionError(f"conv2d: input {height}×{width} too small for kernel {kh}×{kw}")
    windows = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride][:, :out_h, :out_w]
    cols = windows.transpose(0, 1, 2, 4, 5, 3).reshape(batch * out_h * out_w, kh * kw * cin)
    w2 = w.data.reshape(kh * kw * cin, cout)
    out = (cols @ w2).reshape(batch, out_h, out_w, cout)

    def _backward(g, needs):
        g2 = g.reshape(-1, cout)
        gx = gw = None
        if needs[1]:
            gw = (cols.T @ g2).reshape(w.shape)
        if needs[0]:
            gcols = (g2 @ w2.T).reshape(batch, out_h, out_w, kh, kw, cin)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i:i + stride * out_h:stride, j:j + stride * out_w:stride, :] += gcols[:, :, :, i, j, :]
            gx = gxp[:, padding:padding + height, padding:padding + width, :]
        return gx, gw

    return _emit("conv2d", out, (x, w), _backward)


def patchify(x: Tensor, patch: int) -> Tensor:
    """B×H×W×C -> B×(H/p·W/p)×(p·p·C), patches in row-major grid order."""
    batch, height, width, channels = x.shape
    if height % patch or width % patch:
        raise DimensionError(f"patchify: {height}×{width} not divisible by patch {patch}")
    gh, gw = height // patch, width // patch
    out = (x.data.reshape(batch, gh, patch, gw, patch, channels)
           .transpose(0, 1, 3, 2, 4, 5)
           .reshape(batch, gh * gw, patch * patch * channels))

    def _backward(g, needs):
        return (g.reshape(batch, gh, gw, patch, patch, channels)
                .transpose(0, 1, 3, 2, 4, 5)
                .reshape(x.shape),)

    return _emit("patchify", out, (x,), _backward)


def log_softmax(x: Tensor) -> Tensor:
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))

    def _backward(g, needs):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _emit("log_softmax", out, (x,), _backward)


# --------------------------------------------------------------------------
# Layers
# --------------------------------------------------------------------------

class ParameterGroup:
    """Owner of Parameters and batch-norm states.

    Attributes are walked in assignment order; child groups and lists of
    groups contribute dotted names such as "blocks.0.grapher.fc_in.weight".
    """

    def _members(self):
        for attr, value in vars(self).items():
            if isinstance(value, (Parameter, ParameterGroup)):
                yield attr, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, ParameterGroup):
                        yield f"{attr}.{i}", item

    def named_parameters(self, prefix: str = "") -> Dict[str, Parameter]:
        out: Dict[str, Parameter] = {}
        for attr, value in self._members():
            if isinstance(value, Parameter):
                out[prefix + attr] = value
            else:
                out.update(value.named_parameters(f"{prefix}{attr}."))
        return out

    def named_batch_norms(self, prefix: str = "") -> Dict[str, "BatchNorm"]:
        out: Dict[str, BatchNorm] = {}
        if isinstance(self, BatchNorm):
            out[prefix.rstrip(".")] = self
        for attr, value in self._members():
            if isinstance(value, ParameterGroup):
                out.update(value.named_batch_norms(f"{prefix}{attr}."))
        return out

    def named_buffers(self) -> Dict[str, np.ndarray]:
        out = {}
        for name, bn in self.named_batch_norms().items():
            out[f"{name}.running_mean"] = bn.state.running_mean
            out[f"{name}.running_var"] = bn.state.running_var
        return out

    def load_buffers(self, buffers: Mapping[str, np.ndarray]) -> None:
        for name, bn in self.named_batch_norms().items():
            if f"{name}.running_mean" in buffers:
                bn.state.running_mean = np.array(buffers[f"{name}.running_mean"], dtype=np.float64)
                bn.state.running_var = np.array(buffers[f"{name}.running_var"], dtype=np.float64)

    def freeze_batch_norms(self, frozen: bool = True) -> None:
        for bn in self.named_batch_norms().values():
            bn.state.frozen = frozen

    def materialize(self, rng: np.random.Generator) -> None:
        for param in self.named_parameters().values():
            param.materialize(rng)


class Linear(ParameterGroup):
    """x·W (+ b) applied to the last axis."""

    def __init__(self, d_in: int, d_out: int, bias: bool = False, dtype: str = STANDARD):
        self.d_in, self.d_out = d_in, d_out
        self.weight = Parameter("weight", (d_in, d_out), dtype, fan_in_init(d_in))
        if bias:
            self.bias = Parameter("bias", (d_out,), dtype, zeros_init)

    def __call__(self, x: Tensor) -> Tensor:
        out = matmul(x, self.weight.value)
        bias = getattr(self, "bias", None)
        return add(out, bias.value) if bias is not None else out


class BatchNorm(ParameterGroup):
    def __init__(self, features: int, dtype: str = STANDARD):
        self.features = features
        self.scale = Parameter("scale", (features,), dtype, ones_init)
        self.shift = Parameter("shift", (features,), dtype, zeros_init)
        self.state = BatchNormState.fresh(features)

    def __call__(self, x: Tensor, mode: Union[Mode, str]) -> Tensor:
        return batch_norm(x, self.scale.value, self.shift.value, self.state, mode)


class Conv2d(ParameterGroup):
    def __init__(self, c_in: int, c_out: int, kernel: int = 3, stride: int = 1,
                 padding: Optional[int] = None, dtype: str = STANDARD):
        self.c_in, self.c_out, self.kernel, self.stride = c_in, c_out, kernel, stride
        self.padding = kernel // 2 if padding is None else padding
        self.weight = Parameter("weight", (kernel, kernel, c_in, c_out), dtype,
                                fan_in_init(kernel * kernel * c_in))

    def output_size(self, height: int, width: int) -> Tuple[int, int]:
        span = 2 * self.padding - self.kernel
        return (height + span) // self.stride + 1, (width + span) // self.stride + 1

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight.value, self.stride, self.padding)


# --------------------------------------------------------------------------
# Gradient checking
# --------------------------------------------------------------------------

def _relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    if analytic.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))))


def grad_check(f: Callable[[Tensor], Tensor], x: Union[Tensor, np.ndarray], step: float = 1e-5) -> float:
    """Max over coordinates of |analytic − central difference| / max(1, |central difference|).

    Non-differentiable points (max ties, KNN switches) are not excluded here;
    callers pick tie-free inputs.
    """
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    if isinstance(x, Tensor) and x.dtype != HIGH:
        raise ContractError("grad_check needs a high-precision (float64) input")

    with GradTape() as tape:
        xt = tape.watch("x", Tensor(base, HIGH))
        loss = f(xt)
    analytic = backward(loss, tape)["x"]

    numeric = np.zeros_like(base)
    flat = base.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + step
        f_plus = f(Tensor(base, HIGH)).item()
        flat[i] = original - step
        f_minus = f(Tensor(base, HIGH)).item()
        flat[i] = original
        numeric.reshape(-1)[i] = (f_plus - f_minus) / (2 * step)
    return _relative_error(analytic, numeric)


def grad_check_params(f: Callable[[], Tensor], params: Mapping[str, Parameter],
                      step: float = 1e-5) -> Dict[str, float]:
    """Per-parameter max relative error; `f` reads the parameters' current values."""
    for name, param in params.items():
        if param.value.dtype != HIGH:
            raise ContractError(f"grad_check_params needs float64 parameters, {name} is {param.value.dtype}")

    with GradTape() as tape:
        tape.watch_parameters(params)
        loss = f()
    analytic = backward(loss, tape)

    errors = {}
    for name, param in params.items():
        original = param.value
        work = np.array(original.data)
        flat = work.reshape(-1)
        numeric = np.zeros_like(work)
        for i in range(flat.size):
            center = flat[i]
            flat[i] = center + step
            param.value = Tensor(work, HIGH)
            f_plus = f().item()
            flat[i] = center - step
            param.value = Tensor(work, HIGH)
            f_minus = f().item()
            flat[i] = center
            numeric.reshape(-1)[i] = (f_plus - f_minus) / (2 * step)
        param.value = original
        errors[name] = _relative_error(analytic[name], numeric)
    return errors


# --------------------------------------------------------------------------
# Checkpoint archive
# --------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"VIGW"
CHECKPOINT_VERSION = 1
BUFFER_FLAG = 0x80
_TAG_OF = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_DTYPE_OF = {tag: dtype for dtype, tag in _TAG_OF.items()}


def save_checkpoint(path: Union[str, Path], params: Mapping[str, np.ndarray],
                    buffers: Optional[Mapping[str, np.ndarray]] = None) -> dict:
    """Write the weight archive and its JSON manifest (`<path>.json`).

    Each record: u16 name length, UTF-8 name, u8 dtype tag, u8 rank,
    u32 extents, raw little-endian elements. All integers little-endian.
    Buffer records set BUFFER_FLAG in the dtype tag, so the archive loads
    without its manifest.
    """
    path = Path(path)
    entries = [(name, "param", arr) for name, arr in params.items()]
    entries += [(name, "buffer", arr) for name, arr in (buffers or {}).items()]

    manifest = {"format": "vig-checkpoint", "version": CHECKPOINT_VERSION, "entries": []}
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + struct.pack("<BI", CHECKPOINT_VERSION, len(entries)))
        for name, kind, arr in entries:
            arr = np.asarray(arr)
            dtype = arr.dtype.newbyteorder("<")
            if dtype not in _TAG_OF:
                raise DimensionError(f"{name}: cannot serialize dtype {arr.dtype}")
            tag = _TAG_OF[dtype] | (BUFFER_FLAG if kind == "buffer" else 0)
            offset = fh.tell()
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)) + encoded)
            fh.write(struct.pack("<BB", tag, arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            payload = np.ascontiguousarray(arr, dtype=dtype).tobytes(order="C")
            fh.write(payload)
            manifest["entries"].append({
                "name": name, "kind": kind, "dtype": dtype_tag(dtype),
                "shape": list(arr.shape), "offset": offset, "nbytes": len(payload),
            })

    Path(f"{path}.json").write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    logger.info(f"💾 Saved checkpoint {path} ({len(entries)} tensors)")
    return manifest


def load_checkpoint(path: Union[str, Path]) -> Tuple[Dict[str, np.ndarray], Dict[str, np.ndarray]]:
    """Read an archive written by save_checkpoint; returns (params, buffers)."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise DatasetFormatError(f"{path}: not a ViG checkpoint")
    version, total = struct.unpack_from("<BI", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise DatasetFormatError(f"{path}: unsupported checkpoint version {version}")

    params: Dict[str, np.ndarray] = {}
    buffers: Dict[str, np.ndarray] = {}
    pos = 9
    try:
        for _ in range(total):
            (name_len,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            name = raw[pos:pos + name_len].decode("utf-8")
            pos += name_len
            tag, rank = struct.unpack_from("<BB", raw, pos)
            pos += 2
            shape = struct.unpack_from(f"<{rank}I", raw, pos)
            pos += 4 * rank
            dtype = _DTYPE_OF[tag & ~BUFFER_FLAG]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            arr = np.frombuffer(raw, dtype=dtype, count=nbytes // dtype.itemsize, offset=pos).reshape(shape)
            pos += nbytes
            target = buffers if tag & BUFFER_FLAG else params
            target[name] = arr.astype(dtype.newbyteorder("="))
    except (struct.error, KeyError, ValueError) as exc:
        raise DatasetFormatError(f"{path}: truncated or corrupt checkpoint") from exc
    return params, buffers
