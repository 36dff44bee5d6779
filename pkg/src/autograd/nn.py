"""
Layer containers: Module, Parameter and the layers the pipeline is built from
"""

import logging
from collections import OrderedDict

import numpy as np

from ..core.config import BN_EPS, BN_MOMENTUM, LN_EPS
from ..core.errors import CheckpointError, DimensionError
from . import functional as F
from .tensor import Tensor, get_default_dtype

logger = logging.getLogger(__name__)

_INIT_RNG = np.random.default_rng(0)


def manual_seed(seed):
    """Reseed the generator used for weight initialisation."""
    global _INIT_RNG
    _INIT_RNG = np.random.default_rng(seed)


def init_uniform(shape, fan_in):
    bound = np.sqrt(1.0 / max(fan_in, 1))
    return _INIT_RNG.uniform(-bound, bound, size=shape)


def init_normal(shape, std=0.02):
    return _INIT_RNG.normal(0.0, std, size=shape)


class Parameter(Tensor):
    """A leaf tensor that a Module registers as learnable."""

    def __init__(self, data, name=None):
        super().__init__(data, requires_grad=True, name=name)


class Module:
    """Base class for every layer; tracks parameters, buffers and children."""

    def __init__(self):
        object.__setattr__(self, "_parameters", OrderedDict())
        object.__setattr__(self, "_modules", OrderedDict())
        object.__setattr__(self, "_buffers", OrderedDict())
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._parameters[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name, array):
        self._buffers[name] = array
        object.__setattr__(self, name, array)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    # ---------------------------------------------------------- traversal
    def named_modules(self, prefix=""):
        yield prefix, self
        for name, child in self._modules.items():
            yield from child.named_modules(f"{prefix}.{name}" if prefix else name)

    def named_parameters(self, prefix=""):
        """Yield (dotted name, Parameter); shared parameters appear once, under their first name."""
        seen = set()
        for module_name, module in self.named_modules(prefix):
            for name, param in module._parameters.items():
                if id(param) in seen:
                    continue
                seen.add(id(param))
                yield (f"{module_name}.{name}" if module_name else name), param

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix=""):
        for module_name, module in self.named_modules(prefix):
            for name in module._buffers:
                yield (f"{module_name}.{name}" if module_name else name), module, name

    def num_parameters(self):
        return int(sum(p.size for p in self.parameters()))

    # -------------------------------------------------------------- modes
    def train(self, mode=True):
        for _, module in self.named_modules():
            object.__setattr__(module, "training", mode)
        return self

    def eval(self):
        return self.train(False)

    def freeze(self):
        """Stop gradient flow into every parameter of this module."""
        for param in self.parameters():
            param.requires_grad_(False)
        return self

    def zero_grad(self):
        for param in self.parameters():
            param.zero_grad()

    # --------------------------------------------------------------- state
    def state_dict(self):
        state = OrderedDict()
        for name, param in self.named_parameters():
            state[name] = param.data
        for name, module, key in self.named_buffers():
            state[name] = np.asarray(module._buffers[key])
        return state

    def load_state_dict(self, state, strict=True):
        expected = {name: param for name, param in self.named_parameters()}
        buffers = {name: (module, key) for name, module, key in self.named_buffers()}
        missing = [n for n in list(expected) + list(buffers) if n not in state]
        unexpected = [n for n in state if n not in expected and n not in buffers]
        if strict and (missing or unexpected):
            raise CheckpointError(f"state mismatch: missing {missing[:5]}, unexpected {unexpected[:5]}")
        for name, param in expected.items():
            if name not in state:
                continue
            value = np.asarray(state[name])
            if value.shape != param.shape:
                raise CheckpointError(f"record {name} has shape {value.shape}, model expects {param.shape}")
            param.data = value.astype(param.dtype).copy()
        for name, (module, key) in buffers.items():
            if name not in state:
                continue
            current = module._buffers[key]
            value = np.asarray(state[name]).astype(np.asarray(current).dtype).reshape(np.shape(current))
            module._buffers[key] = value
            object.__setattr__(module, key, value)
        return self


class Linear(Module):
    """y = x W + b with W stored [in, out]."""

    def __init__(self, in_features, out_features, bias=True):
        super().__init__()
        self.in_features, self.out_features = in_features, out_features
        self.weight = Parameter(init_uniform((in_features, out_features), in_features))
        self.bias = Parameter(init_uniform((out_features,), in_features)) if bias else None

    def forward(self, x):
        if x.shape[-1] != self.in_features:
            raise DimensionError("linear input width differs from layer width", x.shape, self.weight.shape)
        return F.linear(x, self.weight, self.bias)


class _ConvBase(Module):
    dims = 2
    transposed = False

    def __init__(self, in_channels, out_channels, kernel_size, stride=1, padding=0, bias=True):
        super().__init__()
        kernel = F._tuple(kernel_size, self.dims)
        self.stride, self.padding = stride, padding
        fan_in = in_channels * int(np.prod(kernel))
        shape = (in_channels, out_channels) if self.transposed else (out_channels, in_channels)
        self.weight = Parameter(init_uniform(shape + kernel, fan_in))
        self.bias = Parameter(init_uniform((out_channels,), fan_in)) if bias else None

    def _op(self, x):
        raise NotImplementedError

    def forward(self, x):
        # Unbatched inputs [C, *S] are accepted and returned unbatched
        if x.ndim == self.dims + 1:
            return self._op(x.reshape((1,) + x.shape))[0]
        return self._op(x)


class Conv2d(_ConvBase):
    def _op(self, x):
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class Conv3d(_ConvBase):
    dims = 3

    def _op(self, x):
        return F.conv3d(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose2d(_ConvBase):
    transposed = True

    def _op(self, x):
        return F.deconv2d(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose3d(_ConvBase):
    dims = 3
    transposed = True

    def _op(self, x):
        return F.deconv3d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm(Module):
    """Batch normalisation over [N, C, *S] (or unbatched [C, *S]) for any spatial rank."""

    def __init__(self, channels, momentum=BN_MOMENTUM, eps=BN_EPS, freeze_stats=False):
        super().__init__()
        self.channels, self.momentum, self.eps = channels, momentum, eps
        self.freeze_stats = freeze_stats
        self.weight = Parameter(np.ones(channels))
        self.bias = Parameter(np.zeros(channels))
        self.register_buffer("running_mean", np.zeros(channels))
        self.register_buffer("running_var", np.ones(channels))
        self.register_buffer("num_batches_tracked", np.zeros(1))
        self._warned = False

    def forward(self, x, unbatched_dims=None):
        unbatched = unbatched_dims is not None and x.ndim == unbatched_dims
        if unbatched:
            x = x.reshape((1,) + x.shape)
        update = self.training and not self.freeze_stats
        if not self.training and self.num_batches_tracked[0] == 0 and not self._warned:
            logger.warning("BatchNorm(%d) evaluated before any training step; using initial statistics",
                           self.channels)
            self._warned = True
        out = F.batchnorm(x, self.weight, self.bias, self.running_mean, self.running_var,
                          training=self.training, momentum=self.momentum, eps=self.eps,
                          update_stats=update)
        if update:
            self.num_batches_tracked += 1
        return out[0] if unbatched else out


class BatchNorm2d(BatchNorm):
    def forward(self, x):
        return super().forward(x, unbatched_dims=3)


class BatchNorm3d(BatchNorm):
    def forward(self, x):
        return super().forward(x, unbatched_dims=4)


class LayerNorm(Module):
    def __init__(self, features, eps=LN_EPS):
        super().__init__()
        self.eps = eps
        self.weight = Parameter(np.ones(features))
        self.bias = Parameter(np.zeros(features))

    def forward(self, x):
        return F.layer_norm(x, self.weight, self.bias, self.eps)


class ReLU(Module):
    def forward(self, x):
        return F.relu(x)


class Softplus(Module):
    def forward(self, x):
        return F.softplus(x)


class Sequential(Module):
    def __init__(self, *layers):
        super().__init__()
        for index, layer in enumerate(layers):
            setattr(self, str(index), layer)

    def __iter__(self):
        return iter(self._modules.values())

    def __len__(self):
        return len(self._modules)

    def __getitem__(self, index):
        return list(self._modules.values())[index]

    def forward(self, x):
        for layer in self._modules.values():
            x = layer(x)
        return x


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        for module in modules:
            self.append(module)

    def append(self, module):
        setattr(self, str(len(self._modules)), module)

    def __iter__(self):
        return iter(self._modules.values())

    def __len__(self):
        return len(self._modules)

    def __getitem__(self, index):
        return list(self._modules.values())[index]


def conv_bn_relu(in_channels, out_channels, kernel_size, stride=1, padding=0, dims=2, freeze_stats=False):
    """Conv -> BatchNorm -> ReLU, the block every encoder stage is built from."""
    conv = (Conv2d if dims == 2 else Conv3d)(in_channels, out_channels, kernel_size, stride, padding)
    norm = (BatchNorm2d if dims == 2 else BatchNorm3d)(out_channels, freeze_stats=freeze_stats)
    return Sequential(conv, norm, ReLU())


def cast_parameters(module, dtype=None):
    """Convert every parameter and buffer to `dtype` (default: the current default dtype)."""
    dtype = np.dtype(dtype or get_default_dtype())
    for param in module.parameters():
        param.data = param.data.astype(dtype)
        if param.grad is not None:
            param.zero_grad()
    for _, owner, key in module.named_buffers():
        value = np.asarray(owner._buffers[key]).astype(dtype)
        owner._buffers[key] = value
        object.__setattr__(owner, key, value)
    return module
