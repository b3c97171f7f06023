"""
Dense fp64 tensors with tape-based reverse-mode automatic differentiation.

Every differentiable operation records a Node (op name, inputs, backward
function) when at least one input requires grad and recording is enabled.
A ComputeGraph is assembled from those nodes when `backward` runs; node ids
are handed out from a global counter, so sorting by id reproduces the order
operations were appended and every input of a node is an earlier node.

Tensors are rank 1-3 (vectors, matrices, batched matrices). A scalar is a
shape (1,) tensor.
"""

import itertools
import logging
import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from errors import (
    DetachedGraph,
    InvalidShape,
    InvalidStepSize,
    NonFiniteInput,
    NotScalar,
    ShapeMismatch,
    ValidationError,
)

logger = logging.getLogger(__name__)

# ==============================================================================
# CONSTANTS
# ==============================================================================

MAX_RANK = 3

# GELU, tanh approximation:
#   gelu(x) = 0.5 * x * (1 + tanh(GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x^3)))
# Frozen here; golden outputs in the tests depend on these exact values.
GELU_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
GELU_CUBIC = 0.044715

ELEMENTWISE_KINDS = ('add', 'sub', 'mul', 'gelu', 'sigmoid', 'scale')

_node_ids = itertools.count()
_recording = threading.local()


def is_grad_enabled():
    return getattr(_recording, 'enabled', True)


@contextmanager
def no_grad():
    """Disable graph recording on the current thread (inference, evaluation)."""
    previous = is_grad_enabled()
    _recording.enabled = False
    try:
        yield
    finally:
        _recording.enabled = previous


# ==============================================================================
# TENSOR AND GRAPH TYPES
# ==============================================================================

class Tensor:
    """A dense fp64 array that may take part in reverse-mode differentiation."""

    __slots__ = ('data', 'requires_grad', 'grad', '_node')

    def __init__(self, data, requires_grad=False):
        array = np.array(data, dtype=np.float64)
        if array.ndim == 0:
            array = array.reshape(1)
        if not 1 <= array.ndim <= MAX_RANK:
            raise InvalidShape(f"Tensor rank must be 1-{MAX_RANK}, got shape {array.shape}")
        if 0 in array.shape:
            raise InvalidShape(f"Tensor dimensions must be >= 1, got shape {array.shape}")
        self.data = array
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._node: Optional['Node'] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise NotScalar(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self):
        return self.data.copy()

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ', requires_grad=True' if self.requires_grad else ''
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


@dataclass(eq=False)
class Node:
    """One recorded operation. `backward_fn` maps the output grad to input grads."""
    node_id: int
    op: str
    inputs: tuple
    backward_fn: Callable

    @property
    def input_ids(self):
        return tuple(t._node.node_id for t in self.inputs if t._node is not None)


class ComputeGraph:
    """
    The nodes reachable from one output, in append order.

    Built on demand by `from_output`; `reverse_order` is the traversal
    `backward` uses (each node exactly once).
    """

    def __init__(self, entries):
        # entries: list of (node, output_tensor) sorted by node id
        self._entries = entries

    @property
    def nodes(self):
        return [node for node, _ in self._entries]

    def reverse_order(self):
        return list(reversed(self._entries))

    @classmethod
    def from_output(cls, output):
        seen = set()
        entries = []
        stack = [output]
        while stack:
            tensor = stack.pop()
            node = tensor._node
            if node is None or id(node) in seen:
                continue
            seen.add(id(node))
            entries.append((node, tensor))
            stack.extend(node.inputs)
        entries.sort(key=lambda entry: entry[0].node_id)
        return cls(entries)


def record_op(op, out_data, inputs, backward_fn):
    """
    Wrap `out_data` in a Tensor and record how to differentiate it.

    `backward_fn(grad_out)` must return one gradient (or None) per input.
    Nothing is recorded when no input requires grad or recording is off.
    """
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out._node = None
    needs_grad = is_grad_enabled() and any(t.requires_grad for t in inputs)
    out.requires_grad = needs_grad
    if needs_grad:
        out._node = Node(next(_node_ids), op, tuple(inputs), backward_fn)
    return out


def backward(loss):
    """
    Populate `.grad` on every requires-grad tensor reachable from `loss`.

    Gradients accumulate additively: across fan-out inside one graph and
    across repeated calls (call `zero_grad` on parameters between steps).
    """
    if loss.data.size != 1:
        raise NotScalar(f"backward() needs a scalar loss, got shape {loss.shape}")
    if loss._node is None:
        raise DetachedGraph("loss has no recorded provenance (built without grad-requiring inputs?)")
    graph = ComputeGraph.from_output(loss)
    pending = {id(loss): np.ones_like(loss.data)}
    for node, output in graph.reverse_order():
        grad_out = pending.pop(id(output), None)
        if grad_out is None:
            continue
        output.grad = grad_out if output.grad is None else output.grad + grad_out
        for tensor, grad_in in zip(node.inputs, node.backward_fn(grad_out)):
            if grad_in is None or not tensor.requires_grad:
                continue
            if tensor._node is not None:
                key = id(tensor)
                pending[key] = grad_in if key not in pending else pending[key] + grad_in
            else:
                tensor.grad = grad_in.copy() if tensor.grad is None else tensor.grad + grad_in


# ==============================================================================
# CREATION
# ==============================================================================

def tensor_create(shape: Sequence[int], values: Sequence[float], requires_grad=False):
    """
    Build a tensor from a shape and flat row-major values (copied).

    Example:
        >>> tensor_create([2, 2], [1, 0, 0, 1]).data
        array([[1., 0.],
               [0., 1.]])
    """
    shape = tuple(int(d) for d in shape)
    if not 1 <= len(shape) <= MAX_RANK:
        raise InvalidShape(f"rank must be 1-{MAX_RANK}, got {len(shape)}")
    if any(d < 1 for d in shape):
        raise InvalidShape(f"all dimensions must be >= 1, got {shape}")
    flat = np.array(values, dtype=np.float64).reshape(-1)
    if flat.size != math.prod(shape):
        raise ShapeMismatch(f"{flat.size} values do not fill shape {shape}")
    return Tensor(flat.reshape(shape), requires_grad=requires_grad)


# ==============================================================================
# LINEAR ALGEBRA
# ==============================================================================

def _swap_last(array):
    return np.swapaxes(array, -1, -2)


def matmul(a, b):
    """Matrix product [m,k]@[k,n], or batched [h,m,k]@[h,k,n]."""
    if a.data.ndim != b.data.ndim or a.data.ndim not in (2, 3):
        raise ShapeMismatch(f"matmul needs two matrices or two batched matrices, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ShapeMismatch(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")

    def grad_fn(g):
        return g @ _swap_last(b.data), _swap_last(a.data) @ g

    return record_op('matmul', a.data @ b.data, (a, b), grad_fn)


def transpose(a, axes=None):
    """Permute axes; default swaps the last two."""
    if axes is None:
        axes = list(range(a.data.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def grad_fn(g):
        return (np.transpose(g, inverse),)

    return record_op('transpose', np.ascontiguousarray(np.transpose(a.data, axes)), (a,), grad_fn)


def reshape(a, shape):
    shape = tuple(shape)
    if math.prod(shape) != a.size:
        raise ShapeMismatch(f"cannot reshape {a.shape} into {shape}")
    if not 1 <= len(shape) <= MAX_RANK:
        raise InvalidShape(f"rank must be 1-{MAX_RANK}, got {shape}")
    original = a.shape

    def grad_fn(g):
        return (g.reshape(original),)

    return record_op('reshape', a.data.reshape(shape), (a,), grad_fn)


def take_rows(weight, indices):
    """Gather rows of a [n, d] matrix (embedding lookup); scatter-adds on backward."""
    if weight.data.ndim != 2:
        raise ShapeMismatch(f"take_rows needs a matrix, got {weight.shape}")
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    if idx.size == 0:
        raise InvalidShape("take_rows needs at least one index")
    if idx.min() < 0 or idx.max() >= weight.shape[0]:
        raise ShapeMismatch(f"row index out of range for {weight.shape[0]} rows")

    def grad_fn(g):
        grad = np.zeros_like(weight.data)
        np.add.at(grad, idx, g)
        return (grad,)

    return record_op('take_rows', weight.data[idx], (weight,), grad_fn)


# ==============================================================================
# ELEMENTWISE
# ==============================================================================

def _is_number(value):
    return isinstance(value, (int, float, np.floating, np.integer)) and not isinstance(value, bool)


def _gelu_parts(x):
    inner = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x ** 3)
    t = np.tanh(inner)
    value = 0.5 * x * (1.0 + t)
    derivative = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x)
    return value, derivative


def _sigmoid(x):
    # Split by sign so neither branch overflows exp()
    out = np.empty_like(x)
    positive = x >= 0
    out[positive] = 1.0 / (1.0 + np.exp(-x[positive]))
    ex = np.exp(x[~positive])
    out[~positive] = ex / (1.0 + ex)
    return out


def elementwise(op_kind, a, b=None):
    """
    Apply an elementwise op. Binary kinds take a same-shape tensor, a
    single-element tensor, or a plain number as `b`; `scale` needs a number.
    """
    if op_kind not in ELEMENTWISE_KINDS:
        raise ValidationError(f"unknown elementwise op {op_kind!r}")

    if op_kind == 'gelu':
        value, derivative = _gelu_parts(a.data)
        return record_op('gelu', value, (a,), lambda g: (g * derivative,))

    if op_kind == 'sigmoid':
        value = _sigmoid(a.data)
        return record_op('sigmoid', value, (a,), lambda g: (g * value * (1.0 - value),))

    if op_kind == 'scale':
        if not _is_number(b):
            raise ValidationError("scale needs a numeric factor")
        factor = float(b)
        return record_op('scale', a.data * factor, (a,), lambda g: (g * factor,))

    if _is_number(b):
        c = float(b)
        if op_kind == 'add':
            return record_op('add', a.data + c, (a,), lambda g: (g,))
        if op_kind == 'sub':
            return record_op('sub', a.data - c, (a,), lambda g: (g,))
        return record_op('mul', a.data * c, (a,), lambda g: (g * c,))

    if not isinstance(b, Tensor):
        raise ValidationError(f"{op_kind} needs a second operand")
    if a.shape == b.shape:
        reduce_b = None
    elif b.size == 1:
        reduce_b = b.shape
    else:
        raise ShapeMismatch(f"{op_kind}: shapes {a.shape} and {b.shape} differ and b is not a scalar")

    def fold(grad):
        return grad if reduce_b is None else np.array([grad.sum()]).reshape(reduce_b)

    bv = b.data if reduce_b is None else b.data.reshape(-1)[0]
    if op_kind == 'add':
        return record_op('add', a.data + bv, (a, b), lambda g: (g, fold(g)))
    if op_kind == 'sub':
        return record_op('sub', a.data - bv, (a, b), lambda g: (g, fold(-g)))
    return record_op('mul', a.data * bv, (a, b), lambda g: (g * bv, fold(g * a.data)))


def add(a, b):
    return elementwise('add', a, b)


def sub(a, b):
    return elementwise('sub', a, b)


def mul(a, b):
    return elementwise('mul', a, b)


def scale(a, factor):
    return elementwise('scale', a, factor)


def gelu(a):
    return elementwise('gelu', a)


def sigmoid(a):
    return elementwise('sigmoid', a)


def add_bias(a, bias):
    """Add a [n] bias to every row of a [..., n] tensor."""
    if bias.data.ndim != 1 or bias.shape[0] != a.shape[-1]:
        raise ShapeMismatch(f"bias {bias.shape} does not match last axis of {a.shape}")
    lead_axes = tuple(range(a.data.ndim - 1))

    def grad_fn(g):
        return g, g.sum(axis=lead_axes)

    return record_op('add_bias', a.data + bias.data, (a, bias), grad_fn)


# ==============================================================================
# REDUCTIONS AND NORMALISATION
# ==============================================================================

def sum_all(a):
    shape = a.shape
    return record_op('sum', np.array([a.data.sum()]), (a,), lambda g: (np.full(shape, g[0]),))


def mean_all(a):
    return scale(sum_all(a), 1.0 / a.size)


def softmax_rows(a):
    """Softmax along the last axis with per-row max subtraction."""
    if not np.all(np.isfinite(a.data)):
        raise NonFiniteInput("softmax_rows received non-finite entries")
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    probs = exp / exp.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        return (probs * (g - (g * probs).sum(axis=-1, keepdims=True)),)

    return record_op('softmax_rows', probs, (a,), grad_fn)


def layer_norm(a, gain, bias, eps):
    """Per-row standardisation (population variance) followed by gain/bias."""
    if eps <= 0:
        raise ValidationError(f"layer_norm eps must be positive, got {eps}")
    n = a.shape[-1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise ShapeMismatch(f"gain/bias must have shape ({n},), got {gain.shape} and {bias.shape}")
    mean = a.data.mean(axis=-1, keepdims=True)
    centred = a.data - mean
    inv_std = 1.0 / np.sqrt((centred ** 2).mean(axis=-1, keepdims=True) + eps)
    normed = centred * inv_std
    lead_axes = tuple(range(a.data.ndim - 1))

    def grad_fn(g):
        d_normed = g * gain.data
        d_input = inv_std * (
            d_normed
            - d_normed.mean(axis=-1, keepdims=True)
            - normed * (d_normed * normed).mean(axis=-1, keepdims=True)
        )
        return d_input, (g * normed).sum(axis=lead_axes), g.sum(axis=lead_axes)

    return record_op('layer_norm', normed * gain.data + bias.data, (a, gain, bias), grad_fn)


# ==============================================================================
# GRADIENT CHECKING
# ==============================================================================

def grad_check(f, point, h=1e-6):
    """
    Compare the analytic gradient of scalar `f` at `point` with central
    differences.

    Returns max over coordinates of |analytic - numeric| / max(1, |numeric|).
    Any tensors `f` closes over that require grad also receive gradient
    from the analytic pass.
    """
    if not 0 < h <= 1e-3:
        raise InvalidStepSize(f"h must lie in (0, 1e-3], got {h}")
    x = Tensor(point.data.copy(), requires_grad=True)
    backward(f(x))
    analytic = np.zeros(point.size) if x.grad is None else x.grad.reshape(-1)

    base = point.data.reshape(-1).astype(np.float64)
    numeric = np.empty_like(base)
    with no_grad():
        for i in range(base.size):
            shifted = base.copy()
            shifted[i] = base[i] + h
            upper = f(Tensor(shifted.reshape(point.shape))).item()
            shifted[i] = base[i] - h
            lower = f(Tensor(shifted.reshape(point.shape))).item()
            numeric[i] = (upper - lower) / (2.0 * h)
    errors = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))
    return float(errors.max())
