"""
Tensor with tape-based reverse-mode automatic differentiation.

A `Tensor` wraps a numpy array. Every differentiable operation is a
`Function` subclass: `apply` runs `forward` on the raw arrays and, when any
input requires gradients, records itself as the creator of the output.
`Tensor.backward` replays the recorded graph in reverse topological order
and accumulates gradients into the leaves.
"""

import contextlib
import logging
from typing import Optional, Sequence, Tuple

import numpy as np

from ..core.errors import ContractError, DimensionError

logger = logging.getLogger(__name__)

_DEFAULT_DTYPE = np.float64
_GRAD_ENABLED = True


def set_default_dtype(dtype):
    """Select float64 (checks) or float32 (training) for new tensors."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype.type


def get_default_dtype():
    return _DEFAULT_DTYPE


def is_grad_enabled():
    return _GRAD_ENABLED


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def unbroadcast(grad, shape):
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == tuple(shape):
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Function:
    """Base class of differentiable operations."""

    def __init__(self):
        self.inputs: Tuple["Tensor", ...] = ()

    def forward(self, *arrays, **kwargs):
        raise NotImplementedError

    def backward(self, grad):
        """Return one gradient (or None) per input, given d(loss)/d(output)."""
        raise NotImplementedError

    @classmethod
    def apply(cls, *tensors, **kwargs):
        fn = cls()
        tensors = tuple(as_tensor(t) for t in tensors)
        out = fn.forward(*(t.data for t in tensors), **kwargs)
        requires_grad = _GRAD_ENABLED and any(t.requires_grad for t in tensors)
        if requires_grad:
            fn.inputs = tensors
            return Tensor(out, requires_grad=True, _creator=fn)
        return Tensor(out)


class Tensor:
    """n-dimensional array that may take part in the gradient tape."""

    # numpy defers mixed ndarray/Tensor arithmetic to the reflected Tensor ops
    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False, name=None, dtype=None, _creator=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE, order="C")
        self.requires_grad = bool(requires_grad)
        self.creator: Optional[Function] = _creator
        self.name = name
        # Leaves that require grad carry a same-shape accumulator
        self._grad = np.zeros_like(self.data) if self.requires_grad and _creator is None else None

    # ------------------------------------------------------------------ basics
    @property
    def grad(self):
        return self._grad

    @grad.setter
    def grad(self, value):
        if value is None:
            self._grad = None
            return
        value = np.asarray(value, dtype=self.data.dtype)
        if value.shape != self.data.shape:
            raise DimensionError("gradient shape differs from tensor shape", value.shape, self.data.shape)
        self._grad = value.copy()

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self):
        return self.creator is None

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data.copy())

    def zero_grad(self):
        if self.requires_grad and self.is_leaf:
            self._grad = np.zeros_like(self.data)

    def requires_grad_(self, flag=True):
        if not self.is_leaf:
            raise ContractError("requires_grad can only be changed on leaf tensors")
        self.requires_grad = bool(flag)
        self._grad = np.zeros_like(self.data) if self.requires_grad else None
        return self

    def __repr__(self):
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    def __len__(self):
        return self.shape[0]

    def __array__(self, dtype=None, copy=None):
        return self.data if dtype is None else self.data.astype(dtype)

    # ---------------------------------------------------------------- backward
    def backward(self):
        """Accumulate d(self)/d(leaf) into every reachable leaf that requires grad."""
        if self.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            return

        order = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            if node.creator is not None:
                for parent in node.creator.inputs:
                    if parent.requires_grad and id(parent) not in visited:
                        stack.append((parent, False))

        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            grad = grads.pop(id(node), None)
            if grad is None:
                continue
            if node.creator is None:
                node._grad += grad
                continue
            input_grads = node.creator.backward(grad)
            if not isinstance(input_grads, tuple):
                input_grads = (input_grads,)
            for parent, parent_grad in zip(node.creator.inputs, input_grads):
                if parent_grad is None or not parent.requires_grad:
                    continue
                parent_grad = unbroadcast(np.asarray(parent_grad), parent.shape)
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + parent_grad
                else:
                    grads[key] = parent_grad

    # -------------------------------------------------------------- arithmetic
    def __add__(self, other):
        return Add.apply(self, other)

    def __radd__(self, other):
        return Add.apply(other, self)

    def __sub__(self, other):
        return Sub.apply(self, other)

    def __rsub__(self, other):
        return Sub.apply(other, self)

    def __mul__(self, other):
        return Mul.apply(self, other)

    def __rmul__(self, other):
        return Mul.apply(other, self)

    def __truediv__(self, other):
        return Div.apply(self, other)

    def __rtruediv__(self, other):
        return Div.apply(other, self)

    def __neg__(self):
        return Neg.apply(self)

    def __pow__(self, exponent):
        if isinstance(exponent, Tensor):
            raise ContractError("only scalar exponents are supported")
        return Pow.apply(self, exponent=float(exponent))

    def __matmul__(self, other):
        return MatMul.apply(self, other)

    def __getitem__(self, index):
        return GetItem.apply(self, index=index)

    # --------------------------------------------------------------- reductions
    def sum(self, axis=None, keepdims=False):
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        count = self.data.size if axis is None else int(np.prod([self.shape[a] for a in _axes(axis, self.ndim)]))
        return Sum.apply(self, axis=axis, keepdims=keepdims) * (1.0 / max(count, 1))

    # ------------------------------------------------------------------- shapes
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return Permute.apply(self, axes=axes)

    def transpose(self, axis0=-2, axis1=-1):
        axes = list(range(self.ndim))
        axes[axis0], axes[axis1] = axes[axis1], axes[axis0]
        return Permute.apply(self, axes=tuple(axes))

    # ----------------------------------------------------------- elementwise
    def exp(self):
        return Exp.apply(self)

    def log(self):
        return Log.apply(self)

    def sqrt(self):
        return Sqrt.apply(self)

    def relu(self):
        return Relu.apply(self)

    def clip(self, low, high):
        return Clip.apply(self, low=low, high=high)


def as_tensor(value):
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def cat(tensors: Sequence[Tensor], axis=0):
    """Concatenate along an existing axis."""
    return Cat.apply(*tensors, axis=axis)


def stack(tensors: Sequence[Tensor], axis=0):
    """Join along a new axis."""
    expanded = []
    for t in tensors:
        t = as_tensor(t)
        position = axis % (t.ndim + 1)
        expanded.append(t.reshape(t.shape[:position] + (1,) + t.shape[position:]))
    return Cat.apply(*expanded, axis=axis)


# ---------------------------------------------------------------------------
# Elementwise functions
# ---------------------------------------------------------------------------
class Add(Function):
    def forward(self, a, b):
        return a + b

    def backward(self, grad):
        return grad, grad


class Sub(Function):
    def forward(self, a, b):
        return a - b

    def backward(self, grad):
        return grad, -grad


class Mul(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return grad * self.b, grad * self.a


class Div(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a / b

    def backward(self, grad):
        return grad / self.b, -grad * self.a / (self.b * self.b)


class Neg(Function):
    def forward(self, a):
        return -a

    def backward(self, grad):
        return -grad


class Pow(Function):
    def forward(self, a, exponent):
        self.a, self.exponent = a, exponent
        return a ** exponent

    def backward(self, grad):
        return grad * self.exponent * self.a ** (self.exponent - 1)


class Exp(Function):
    def forward(self, a):
        self.out = np.exp(a)
        return self.out

    def backward(self, grad):
        return grad * self.out


class Log(Function):
    def forward(self, a):
        self.a = a
        return np.log(a)

    def backward(self, grad):
        return grad / self.a


class Sqrt(Function):
    def forward(self, a):
        self.out = np.sqrt(a)
        return self.out

    def backward(self, grad):
        return grad * 0.5 / self.out


class Relu(Function):
    def forward(self, a):
        self.mask = a > 0
        return np.where(self.mask, a, 0.0).astype(a.dtype)

    def backward(self, grad):
        return grad * self.mask


class Clip(Function):
    def forward(self, a, low, high):
        self.mask = (a >= low) & (a <= high)
        return np.clip(a, low, high)

    def backward(self, grad):
        return grad * self.mask


# ---------------------------------------------------------------------------
# Reductions and linear algebra
# ---------------------------------------------------------------------------
class Sum(Function):
    def forward(self, a, axis=None, keepdims=False):
        self.shape = a.shape
        self.axes = _axes(axis, a.ndim)
        self.keepdims = keepdims
        return np.sum(a, axis=self.axes, keepdims=keepdims)

    def backward(self, grad):
        if not self.keepdims:
            for axis in sorted(self.axes):
                grad = np.expand_dims(grad, axis)
        return np.broadcast_to(grad, self.shape).copy()


class MatMul(Function):
    def forward(self, a, b):
        if a.ndim < 2 or b.ndim < 2:
            raise DimensionError("matmul needs operands with at least two dimensions", a.shape, b.shape)
        if a.shape[-1] != b.shape[-2]:
            raise DimensionError("matmul inner extents differ", a.shape, b.shape)
        try:
            np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
        except ValueError:
            raise DimensionError("matmul leading extents are not broadcastable", a.shape, b.shape) from None
        self.a, self.b = a, b
        return np.matmul(a, b)

    def backward(self, grad):
        grad_a = np.matmul(grad, np.swapaxes(self.b, -1, -2))
        grad_b = np.matmul(np.swapaxes(self.a, -1, -2), grad)
        return unbroadcast(grad_a, self.a.shape), unbroadcast(grad_b, self.b.shape)


# ---------------------------------------------------------------------------
# Shape manipulation
# ---------------------------------------------------------------------------
class Reshape(Function):
    def forward(self, a, shape):
        self.shape = a.shape
        try:
            return a.reshape(shape)
        except ValueError:
            raise DimensionError("cannot reshape", a.shape, shape) from None

    def backward(self, grad):
        return grad.reshape(self.shape)


class Permute(Function):
    def forward(self, a, axes):
        self.axes = tuple(axes)
        return np.transpose(a, self.axes)

    def backward(self, grad):
        return np.transpose(grad, np.argsort(self.axes))


class GetItem(Function):
    def forward(self, a, index):
        self.shape, self.index = a.shape, index
        parts = index if isinstance(index, tuple) else (index,)
        self.basic = all(isinstance(p, (int, slice, type(None), type(Ellipsis))) for p in parts)
        return np.array(a[index])

    def backward(self, grad):
        full = np.zeros(self.shape, dtype=grad.dtype)
        if self.basic:
            full[self.index] += grad
        else:
            np.add.at(full, self.index, grad)
        return full


class Cat(Function):
    def forward(self, *arrays, axis=0):
        reference = arrays[0].shape
        for array in arrays[1:]:
            if array.ndim != len(reference):
                raise DimensionError("cannot concatenate tensors of different rank", reference, array.shape)
        self.axis = axis % arrays[0].ndim
        self.sizes = [array.shape[self.axis] for array in arrays]
        try:
            return np.concatenate(arrays, axis=self.axis)
        except ValueError:
            raise DimensionError("cannot concatenate", *(a.shape for a in arrays)) from None

    def backward(self, grad):
        splits = np.cumsum(self.sizes)[:-1]
        return tuple(np.split(grad, splits, axis=self.axis))
