"""
Neural-network primitives built on the tensor tape.

Convolutions are computed offset-by-offset over the kernel: each kernel tap
contracts a strided view of the (padded) input with one [out, in] weight
slice through a BLAS `tensordot`. The same loop, run backwards, scatters
gradients into the input, so 2D and 3D share one implementation.
"""

import logging

import numpy as np

from ..core.config import BN_EPS, BN_MOMENTUM, COSINE_EPS, LN_EPS, PROB_EPS
from ..core.errors import ConfigurationError, ContractError, DimensionError
from .tensor import Function, Tensor, as_tensor

logger = logging.getLogger(__name__)


def _tuple(value, n):
    if isinstance(value, (tuple, list)):
        if len(value) != n:
            raise ConfigurationError(f"expected {n} values, got {value}")
        return tuple(int(v) for v in value)
    return (int(value),) * n


def _window(offset, stride, extent):
    return tuple(slice(o, o + s * (n - 1) + 1, s) for o, s, n in zip(offset, stride, extent))


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------
class ConvNd(Function):
    """Cross-correlation of [N, C, *S] with weights [O, C, *K]."""

    def forward(self, x, weight, stride, padding):
        nd = weight.ndim - 2
        if x.ndim != nd + 2:
            raise DimensionError(f"conv{nd}d expects a rank-{nd + 2} input", x.shape, weight.shape)
        if x.shape[1] != weight.shape[1]:
            raise DimensionError("input channels differ from weight channels", x.shape, weight.shape)
        self.stride, self.padding = _tuple(stride, nd), _tuple(padding, nd)
        kernel = weight.shape[2:]
        padded = np.pad(x, [(0, 0), (0, 0)] + [(p, p) for p in self.padding])
        out_extent = tuple((padded.shape[2 + i] - kernel[i]) // self.stride[i] + 1 for i in range(nd))
        if any(n <= 0 for n in out_extent) or any(padded.shape[2 + i] < kernel[i] for i in range(nd)):
            raise ConfigurationError(
                f"conv output extent {out_extent} is not positive for input {x.shape}, kernel {kernel}, "
                f"stride {self.stride}, padding {self.padding}")

        out = np.zeros((x.shape[0], weight.shape[0]) + out_extent, dtype=x.dtype)
        for offset in np.ndindex(*kernel):
            view = padded[(slice(None), slice(None)) + _window(offset, self.stride, out_extent)]
            tap = weight[(slice(None), slice(None)) + offset]
            out += np.moveaxis(np.tensordot(tap, view, axes=([1], [1])), 0, 1)

        self.padded, self.weight, self.input_shape, self.out_extent = padded, weight, x.shape, out_extent
        return out

    def backward(self, grad):
        nd = len(self.out_extent)
        kernel = self.weight.shape[2:]
        grad_padded = np.zeros_like(self.padded)
        grad_weight = np.zeros_like(self.weight)
        reduce_axes = [0] + list(range(2, nd + 2))
        for offset in np.ndindex(*kernel):
            window = (slice(None), slice(None)) + _window(offset, self.stride, self.out_extent)
            view = self.padded[window]
            tap = self.weight[(slice(None), slice(None)) + offset]
            grad_weight[(slice(None), slice(None)) + offset] = np.tensordot(grad, view, axes=(reduce_axes, reduce_axes))
            grad_padded[window] += np.moveaxis(np.tensordot(tap, grad, axes=([0], [1])), 0, 1)
        crop = (slice(None), slice(None)) + tuple(slice(p, p + n) for p, n in zip(self.padding, self.input_shape[2:]))
        return grad_padded[crop], grad_weight


class ConvTransposeNd(Function):
    """Transposed convolution of [N, C, *S] with weights [C, O, *K]."""

    def forward(self, x, weight, stride, padding):
        nd = weight.ndim - 2
        if x.ndim != nd + 2:
            raise DimensionError(f"deconv{nd}d expects a rank-{nd + 2} input", x.shape, weight.shape)
        if x.shape[1] != weight.shape[0]:
            raise DimensionError("input channels differ from weight channels", x.shape, weight.shape)
        self.stride, self.padding = _tuple(stride, nd), _tuple(padding, nd)
        kernel = weight.shape[2:]
        in_extent = x.shape[2:]
        full_extent = tuple((n - 1) * s + k for n, s, k in zip(in_extent, self.stride, kernel))
        out_extent = tuple(f - 2 * p for f, p in zip(full_extent, self.padding))
        if any(n <= 0 for n in out_extent):
            raise ConfigurationError(
                f"deconv output extent {out_extent} is not positive for input {x.shape}, kernel {kernel}")

        full = np.zeros((x.shape[0], weight.shape[1]) + full_extent, dtype=x.dtype)
        for offset in np.ndindex(*kernel):
            tap = weight[(slice(None), slice(None)) + offset]
            full[(slice(None), slice(None)) + _window(offset, self.stride, in_extent)] += np.moveaxis(
                np.tensordot(tap, x, axes=([0], [1])), 0, 1)

        self.x, self.weight, self.full_extent, self.out_extent = x, weight, full_extent, out_extent
        crop = (slice(None), slice(None)) + tuple(slice(p, p + n) for p, n in zip(self.padding, out_extent))
        self.crop = crop
        return full[crop]

    def backward(self, grad):
        nd = len(self.out_extent)
        kernel = self.weight.shape[2:]
        in_extent = self.x.shape[2:]
        grad_full = np.zeros((grad.shape[0], grad.shape[1]) + self.full_extent, dtype=grad.dtype)
        grad_full[self.crop] = grad
        grad_x = np.zeros_like(self.x)
        grad_weight = np.zeros_like(self.weight)
        reduce_axes = [0] + list(range(2, nd + 2))
        for offset in np.ndindex(*kernel):
            view = grad_full[(slice(None), slice(None)) + _window(offset, self.stride, in_extent)]
            tap = self.weight[(slice(None), slice(None)) + offset]
            grad_x += np.moveaxis(np.tensordot(tap, view, axes=([1], [1])), 0, 1)
            grad_weight[(slice(None), slice(None)) + offset] = np.tensordot(self.x, view,
                                                                            axes=(reduce_axes, reduce_axes))
        return grad_x, grad_weight


def _add_bias(out, bias):
    if bias is None:
        return out
    bias = as_tensor(bias)
    return out + bias.reshape((1, bias.shape[0]) + (1,) * (out.ndim - 2))


def conv2d(x, weight, bias=None, stride=1, padding=0):
    return _add_bias(ConvNd.apply(x, weight, stride=stride, padding=padding), bias)


def conv3d(x, weight, bias=None, stride=1, padding=0):
    return _add_bias(ConvNd.apply(x, weight, stride=stride, padding=padding), bias)


def deconv2d(x, weight, bias=None, stride=1, padding=0):
    return _add_bias(ConvTransposeNd.apply(x, weight, stride=stride, padding=padding), bias)


def deconv3d(x, weight, bias=None, stride=1, padding=0):
    return _add_bias(ConvTransposeNd.apply(x, weight, stride=stride, padding=padding), bias)


# ---------------------------------------------------------------------------
# Activations and normalisation
# ---------------------------------------------------------------------------
class Softmax(Function):
    def forward(self, x, axis):
        self.axis = axis
        shifted = x - np.max(x, axis=axis, keepdims=True)
        e = np.exp(shifted)
        self.out = e / np.sum(e, axis=axis, keepdims=True)
        return self.out

    def backward(self, grad):
        inner = np.sum(grad * self.out, axis=self.axis, keepdims=True)
        return self.out * (grad - inner)


class LogSoftmax(Function):
    def forward(self, x, axis):
        self.axis = axis
        shifted = x - np.max(x, axis=axis, keepdims=True)
        out = shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
        self.softmax = np.exp(out)
        return out

    def backward(self, grad):
        return grad - self.softmax * np.sum(grad, axis=self.axis, keepdims=True)


class Softplus(Function):
    def forward(self, x):
        self.x = x
        return np.logaddexp(0.0, x)

    def backward(self, grad):
        return grad * 0.5 * (1.0 + np.tanh(0.5 * self.x))


def _check_axis(x, axis):
    if not -x.ndim <= axis < x.ndim:
        raise ContractError(f"axis {axis} out of range for shape {x.shape}")
    return axis % x.ndim


def softmax(x, axis=-1):
    x = as_tensor(x)
    return Softmax.apply(x, axis=_check_axis(x, axis))


def log_softmax(x, axis=-1):
    x = as_tensor(x)
    return LogSoftmax.apply(x, axis=_check_axis(x, axis))


def relu(x):
    return as_tensor(x).relu()


def softplus(x):
    return Softplus.apply(x)


def linear(x, weight, bias=None):
    """x @ weight (+ bias) with weight stored as [in, out]."""
    out = as_tensor(x) @ weight
    return out + bias if bias is not None else out


def batchnorm(x, gamma, beta, running_mean, running_var, training=True,
              momentum=BN_MOMENTUM, eps=BN_EPS, update_stats=True):
    """Per-channel normalisation of [N, C, *S]; running stats are numpy arrays updated in place."""
    x = as_tensor(x)
    channels = x.shape[1]
    if gamma.shape != (channels,) or beta.shape != (channels,):
        raise DimensionError("batchnorm affine parameters must match channels", gamma.shape, x.shape)
    axes = (0,) + tuple(range(2, x.ndim))
    broadcast = (1, channels) + (1,) * (x.ndim - 2)
    if training:
        mean = x.mean(axis=axes, keepdims=True)
        centered = x - mean
        var = (centered * centered).mean(axis=axes, keepdims=True)
        if update_stats:
            count = x.size // channels
            unbiased = var.data.reshape(channels) * (count / (count - 1) if count > 1 else 1.0)
            running_mean *= 1.0 - momentum
            running_mean += momentum * mean.data.reshape(channels)
            running_var *= 1.0 - momentum
            running_var += momentum * unbiased
        normalized = centered / (var + eps).sqrt()
    else:
        scale = 1.0 / np.sqrt(running_var + eps)
        normalized = (x - running_mean.reshape(broadcast)) * scale.reshape(broadcast)
    return normalized * gamma.reshape(broadcast) + beta.reshape(broadcast)


def layer_norm(x, gamma, beta, eps=LN_EPS):
    """Normalise over the last axis."""
    x = as_tensor(x)
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered / (var + eps).sqrt() * gamma + beta


# ---------------------------------------------------------------------------
# Feature-space distances
# ---------------------------------------------------------------------------
class HuberNorm(Function):
    """Huber penalty of the L2 norm of `diff` along `axis`."""

    def forward(self, diff, delta, axis):
        self.diff, self.delta, self.axis = diff, delta, axis
        squared = np.sum(diff * diff, axis=axis)
        self.norm = np.sqrt(squared)
        self.inner = self.norm < delta
        return np.where(self.inner, 0.5 * squared, delta * (self.norm - 0.5 * delta))

    def backward(self, grad):
        norm = np.expand_dims(self.norm, self.axis)
        inner = np.expand_dims(self.inner, self.axis)
        safe = np.where(inner, 1.0, norm)
        scale = np.where(inner, 1.0, self.delta / safe)
        return np.expand_dims(grad, self.axis) * scale * self.diff


class CosineSimilarity(Function):
    """a·b / (|a||b| + eps) along `axis`; zero vectors give 0."""

    def forward(self, a, b, axis, eps):
        self.a, self.b, self.axis = a, b, axis
        self.dot = np.sum(a * b, axis=axis)
        self.norm_a = np.sqrt(np.sum(a * a, axis=axis))
        self.norm_b = np.sqrt(np.sum(b * b, axis=axis))
        self.denom = self.norm_a * self.norm_b + eps
        return self.dot / self.denom

    def backward(self, grad):
        expand = lambda v: np.expand_dims(v, self.axis)  # noqa: E731
        dot, denom = expand(self.dot), expand(self.denom)
        norm_a, norm_b = expand(self.norm_a), expand(self.norm_b)
        unit_a = np.where(norm_a > 0, self.a / np.where(norm_a > 0, norm_a, 1.0), 0.0)
        unit_b = np.where(norm_b > 0, self.b / np.where(norm_b > 0, norm_b, 1.0), 0.0)
        g = expand(grad)
        grad_a = g * (self.b / denom - dot * norm_b * unit_a / (denom * denom))
        grad_b = g * (self.a / denom - dot * norm_a * unit_b / (denom * denom))
        return grad_a, grad_b


def huber_norm(diff, delta, axis=-1):
    diff = as_tensor(diff)
    if delta <= 0:
        raise ContractError(f"Huber threshold must be positive, got {delta}")
    return HuberNorm.apply(diff, delta=float(delta), axis=_check_axis(diff, axis))


def cosine_similarity(a, b, axis=-1, eps=COSINE_EPS):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError("cosine similarity needs equal shapes", a.shape, b.shape)
    return CosineSimilarity.apply(a, b, axis=_check_axis(a, axis), eps=eps)


# ---------------------------------------------------------------------------
# Scatter / resampling
# ---------------------------------------------------------------------------
class ScatterAdd(Function):
    """Sum rows of [P, C] into [size, C] by index; index -1 drops the row."""

    def forward(self, features, index, size):
        self.index = index
        keep = np.flatnonzero(index >= 0)
        # Stable sort fixes the accumulation order per target row
        order = keep[np.argsort(index[keep], kind="stable")]
        out = np.zeros((size,) + features.shape[1:], dtype=features.dtype)
        np.add.at(out, index[order], features[order])
        return out

    def backward(self, grad):
        grad_features = np.zeros((self.index.shape[0],) + grad.shape[1:], dtype=grad.dtype)
        keep = self.index >= 0
        grad_features[keep] = grad[self.index[keep]]
        return grad_features


def scatter_add(features, index, size):
    features = as_tensor(features)
    index = np.asarray(index, dtype=np.int64)
    if index.shape != (features.shape[0],):
        raise DimensionError("one index per feature row is required", index.shape, features.shape)
    if index.size and index.max() >= size:
        raise ContractError(f"scatter index {index.max()} out of range for size {size}")
    return ScatterAdd.apply(features, index=index, size=int(size))


def linear_interp_matrix(n_in, n_out):
    """[n_out, n_in] half-pixel linear resampling matrix with edge clamping."""
    matrix = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        source = min(max((i + 0.5) * scale - 0.5, 0.0), n_in - 1)
        low = int(np.floor(source))
        high = min(low + 1, n_in - 1)
        weight = source - low
        matrix[i, low] += 1.0 - weight
        matrix[i, high] += weight
    return matrix


class AxisLinearMap(Function):
    """Apply a fixed matrix along one axis."""

    def forward(self, x, matrix, axis):
        self.matrix, self.axis = matrix, axis
        return np.moveaxis(np.tensordot(matrix, x, axes=([1], [axis])), 0, axis)

    def backward(self, grad):
        return np.moveaxis(np.tensordot(self.matrix.T, grad, axes=([1], [self.axis])), 0, self.axis)


def resize_linear(x, size):
    """(Bi/tri)linear resize of the trailing len(size) axes."""
    x = as_tensor(x)
    first = x.ndim - len(size)
    for i, n_out in enumerate(size):
        axis = first + i
        if x.shape[axis] != n_out:
            matrix = linear_interp_matrix(x.shape[axis], n_out).astype(x.dtype)
            x = AxisLinearMap.apply(x, matrix=matrix, axis=axis)
    return x


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------
def cross_entropy(logits, target, class_weights=None):
    """Mean voxel-wise cross entropy of logits [C, *S] against integer labels [*S]."""
    logits = as_tensor(logits)
    target = np.asarray(target)
    num_classes = logits.shape[0]
    if target.shape != logits.shape[1:]:
        raise DimensionError("labels must match the logits' spatial shape", target.shape, logits.shape)
    if target.size and (target.min() < 0 or target.max() >= num_classes):
        raise ContractError(f"labels must lie in [0, {num_classes}), got [{target.min()}, {target.max()}]")
    one_hot = np.moveaxis(np.eye(num_classes, dtype=logits.dtype)[target], -1, 0)
    picked = (log_softmax(logits, axis=0) * one_hot).sum(axis=0)
    if class_weights is None:
        return -picked.mean()
    weights = np.asarray(class_weights, dtype=logits.dtype)[target]
    return -(picked * weights).sum() * (1.0 / max(float(weights.sum()), PROB_EPS))


def binary_cross_entropy(probs, target, mask, axis=1, eps=PROB_EPS):
    """Per-bin BCE averaged over `axis`, then over unmasked cells."""
    probs = as_tensor(probs)
    target = np.asarray(target, dtype=probs.dtype)
    if target.shape != probs.shape:
        raise DimensionError("BCE target must match predictions", target.shape, probs.shape)
    mask = np.asarray(mask, dtype=probs.dtype)
    clipped = probs.clip(eps, 1.0 - eps)
    per_bin = -(clipped.log() * target + (1.0 - clipped).log() * (1.0 - target))
    per_cell = per_bin.mean(axis=axis)
    if mask.shape != per_cell.shape:
        raise DimensionError("BCE mask must match the reduced cell shape", mask.shape, per_cell.shape)
    valid = float(mask.sum())
    return (per_cell * mask).sum() * (1.0 / valid if valid > 0 else 0.0)
