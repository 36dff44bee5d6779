"""
Finite-difference verification of the analytic gradients
"""

import logging

import numpy as np

from ..core.errors import ContractError
from . import functional as F
from .tensor import Tensor, cat, no_grad

logger = logging.getLogger(__name__)

GRAD_TOLERANCE = 1e-4
END_TO_END_TOLERANCE = 1e-3
# Deep ReLU/BatchNorm stacks put many activations within 1e-5 of a kink
END_TO_END_STEP = 1e-7


def finite_diff_check(f, x, h=1e-5, indices=None, floor=1e-8):
    """Max relative error between backward() and central differences of scalar f(x).

    `x` is a float64 leaf tensor requiring grad; `f` may also read other
    tensors through a closure. `indices` limits the check to some flat positions.
    """
    if x.dtype != np.float64:
        raise ContractError(f"gradient checks need float64 inputs, got {x.dtype}")
    if not x.requires_grad:
        raise ContractError("finite_diff_check needs a tensor that requires grad")

    x.zero_grad()
    loss = f(x)
    if loss.size != 1:
        raise ContractError(f"checked function must return a scalar, got shape {loss.shape}")
    loss.backward()
    analytic = x.grad.reshape(-1).copy()

    flat = x.data.reshape(-1)
    positions = range(flat.size) if indices is None else indices
    worst = 0.0
    with no_grad():
        for i in positions:
            original = flat[i]
            flat[i] = original + h
            plus = f(x).item()
            flat[i] = original - h
            minus = f(x).item()
            flat[i] = original
            numeric = (plus - minus) / (2.0 * h)
            denom = max(abs(analytic[i]), abs(numeric), floor)
            worst = max(worst, abs(analytic[i] - numeric) / denom)
    return worst


def _weighted(out, rng):
    """Reduce a tensor to a scalar with fixed random weights."""
    weights = rng.standard_normal(out.shape)
    return (out * weights).sum()


def _leaf(rng, *shape, low=None, high=None):
    if low is None:
        data = rng.standard_normal(shape)
    else:
        data = rng.uniform(low, high, size=shape)
    return Tensor(data, requires_grad=True, dtype=np.float64)


def _case_matmul(rng):
    b = Tensor(rng.standard_normal((2, 4, 3)), dtype=np.float64)
    return lambda x: _weighted(x @ b, np.random.default_rng(1)), _leaf(rng, 2, 5, 4)


def _case_softmax(rng):
    return lambda x: _weighted(F.softmax(x, axis=1), np.random.default_rng(1)), _leaf(rng, 3, 5)


def _case_log_softmax(rng):
    return lambda x: _weighted(F.log_softmax(x, axis=0), np.random.default_rng(1)), _leaf(rng, 4, 3)


def _case_conv2d(rng):
    weight = Tensor(rng.standard_normal((3, 2, 3, 3)), dtype=np.float64)
    bias = Tensor(rng.standard_normal(3), dtype=np.float64)
    return (lambda x: _weighted(F.conv2d(x, weight, bias, stride=2, padding=1), np.random.default_rng(1)),
            _leaf(rng, 2, 2, 5, 5))


def _case_conv2d_weight(rng):
    x = Tensor(rng.standard_normal((1, 2, 5, 4)), dtype=np.float64)
    return (lambda w: _weighted(F.conv2d(x, w, stride=1, padding=1), np.random.default_rng(1)),
            _leaf(rng, 3, 2, 3, 3))


def _case_conv3d(rng):
    weight = Tensor(rng.standard_normal((2, 2, 3, 3, 3)), dtype=np.float64)
    return (lambda x: _weighted(F.conv3d(x, weight, stride=1, padding=1), np.random.default_rng(1)),
            _leaf(rng, 1, 2, 3, 4, 4))


def _case_deconv2d(rng):
    weight = Tensor(rng.standard_normal((2, 3, 2, 2)), dtype=np.float64)
    return (lambda x: _weighted(F.deconv2d(x, weight, stride=2), np.random.default_rng(1)),
            _leaf(rng, 1, 2, 3, 3))


def _case_deconv3d_weight(rng):
    x = Tensor(rng.standard_normal((1, 2, 2, 2, 2)), dtype=np.float64)
    return (lambda w: _weighted(F.deconv3d(x, w, stride=2), np.random.default_rng(1)),
            _leaf(rng, 2, 2, 2, 2, 2))


def _case_batchnorm(rng):
    gamma = Tensor(rng.uniform(0.5, 1.5, 3), dtype=np.float64)
    beta = Tensor(rng.standard_normal(3), dtype=np.float64)

    def f(x):
        return _weighted(F.batchnorm(x, gamma, beta, np.zeros(3), np.ones(3), training=True,
                                     update_stats=False), np.random.default_rng(1))
    return f, _leaf(rng, 2, 3, 2, 2)


def _case_layer_norm(rng):
    gamma = Tensor(rng.uniform(0.5, 1.5, 6), dtype=np.float64)
    beta = Tensor(rng.standard_normal(6), dtype=np.float64)
    return lambda x: _weighted(F.layer_norm(x, gamma, beta), np.random.default_rng(1)), _leaf(rng, 4, 6)


def _case_softplus(rng):
    return lambda x: _weighted(F.softplus(x), np.random.default_rng(1)), _leaf(rng, 3, 4)


def _case_relu(rng):
    return lambda x: _weighted(F.relu(x), np.random.default_rng(1)), _leaf(rng, 3, 4)


def _case_linear(rng):
    weight = Tensor(rng.standard_normal((4, 3)), dtype=np.float64)
    bias = Tensor(rng.standard_normal(3), dtype=np.float64)
    return lambda x: _weighted(F.linear(x, weight, bias), np.random.default_rng(1)), _leaf(rng, 5, 4)


def _case_huber_norm(rng):
    # Rows with small and large norms exercise both branches
    data = rng.standard_normal((6, 4))
    data[:3] *= 0.2
    data[3:] *= 3.0
    x = Tensor(data, requires_grad=True, dtype=np.float64)
    return lambda x: F.huber_norm(x, delta=2.0, axis=-1).mean(), x


def _case_cosine(rng):
    b = Tensor(rng.standard_normal((5, 4)), dtype=np.float64)
    return lambda x: (1.0 - F.cosine_similarity(x, b, axis=-1)).mean(), _leaf(rng, 5, 4)


def _case_scatter_add(rng):
    index = np.array([0, 2, -1, 2, 1, 5, 0])
    return (lambda x: _weighted(F.scatter_add(x, index, 6), np.random.default_rng(1)),
            _leaf(rng, 7, 3))


def _case_resize(rng):
    return lambda x: _weighted(F.resize_linear(x, (4, 6, 2)), np.random.default_rng(1)), _leaf(rng, 2, 2, 3, 1)


def _case_cross_entropy(rng):
    target = rng.integers(0, 4, size=(2, 3))
    return lambda x: F.cross_entropy(x, target), _leaf(rng, 4, 2, 3)


def _case_weighted_cross_entropy(rng):
    target = rng.integers(0, 4, size=(5,))
    weights = rng.uniform(0.5, 2.0, size=4)
    return lambda x: F.cross_entropy(x, target, class_weights=weights), _leaf(rng, 4, 5)


def _case_bce(rng):
    target = (rng.uniform(size=(2, 3, 2)) > 0.5).astype(float)
    mask = np.array([[1.0, 0.0], [1.0, 1.0]])
    return (lambda x: F.binary_cross_entropy(x, target, mask, axis=1),
            _leaf(rng, 2, 3, 2, low=0.1, high=0.9))


def _case_shape_ops(rng):
    other = Tensor(rng.standard_normal((2, 3)), dtype=np.float64)

    def f(x):
        joined = cat([x.permute(1, 0), other], axis=0)
        return _weighted(joined[1:, ::2] * joined[np.array([0, 0, 3])][:, :2].sum(), np.random.default_rng(1))
    return f, _leaf(rng, 3, 4)


def _case_elementwise(rng):
    def f(x):
        y = (x * x + 1.0).sqrt().log() / (x.exp() + 2.0) - x ** 3
        return _weighted(y.clip(-5.0, 5.0), np.random.default_rng(1))
    return f, _leaf(rng, 3, 3, low=-1.0, high=1.0)


OP_SUITE = {
    "matmul": _case_matmul,
    "softmax": _case_softmax,
    "log_softmax": _case_log_softmax,
    "conv2d": _case_conv2d,
    "conv2d_weight": _case_conv2d_weight,
    "conv3d": _case_conv3d,
    "deconv2d": _case_deconv2d,
    "deconv3d_weight": _case_deconv3d_weight,
    "batchnorm": _case_batchnorm,
    "layer_norm": _case_layer_norm,
    "relu": _case_relu,
    "softplus": _case_softplus,
    "linear": _case_linear,
    "huber_norm": _case_huber_norm,
    "cosine_similarity": _case_cosine,
    "scatter_add": _case_scatter_add,
    "resize_linear": _case_resize,
    "cross_entropy": _case_cross_entropy,
    "weighted_cross_entropy": _case_weighted_cross_entropy,
    "binary_cross_entropy": _case_bce,
    "shape_ops": _case_shape_ops,
    "elementwise": _case_elementwise,
}


def run_op_suite(seeds=(0, 1, 2, 3, 4), names=None):
    """Check every registered op over several seeds; returns {name: worst error}."""
    results = {}
    for name in names or OP_SUITE:
        worst = 0.0
        for seed in seeds:
            f, x = OP_SUITE[name](np.random.default_rng(seed))
            worst = max(worst, finite_diff_check(f, x))
        results[name] = worst
        logger.info("grad-check %-24s max rel err %.3e", name, worst)
    return results
