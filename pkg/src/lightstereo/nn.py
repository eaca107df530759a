"""Layer classes that compose the kernels in ops.py into a trainable graph.

The graph is static and code-defined: each layer's ``forward`` returns
``(output, cache)`` and ``backward(cache, grad)`` returns the input gradient
while accumulating parameter gradients. Caches live with the caller, never on
the layer, so a fixed weight set can serve concurrent forward passes.
"""

from typing import Iterator

import numpy as np

from . import ops
from .ops import BatchNormParams, ConfigurationError, ConvParams


class Parameter:
    """A trainable array with an accumulated gradient."""

    __slots__ = ("data", "grad")

    def __init__(self, data: np.ndarray):
        self.data = np.ascontiguousarray(data)
        self.grad = np.zeros_like(self.data)

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Parameter(shape={self.data.shape}, dtype={self.data.dtype})"


class Module:
    """Base class providing parameter/buffer discovery and checkpoint state.

    Child modules and parameters are found by walking instance attributes in
    definition order, so state_dict ordering is deterministic per build.
    """

    buffer_attrs: tuple = ()

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for key, value in vars(self).items():
            if isinstance(value, Module):
                yield key, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{key}.{i}", item

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for name, child in self.children():
            yield from child.named_modules(prefix + name + "." if prefix else name + ".")

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + key, value
        for name, child in self.children():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for key in self.buffer_attrs:
            yield prefix + key, getattr(self, key)
        for name, child in self.children():
            yield from child.named_buffers(prefix + name + ".")

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update({name: buf for name, buf in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = self.state_dict()
        for name, arr in own.items():
            if name not in state:
                raise ConfigurationError(f"checkpoint is missing tensor '{name}'")
            src = state[name]
            if tuple(src.shape) != tuple(arr.shape):
                raise ConfigurationError(
                    f"tensor '{name}' has shape {tuple(src.shape)}, expected {tuple(arr.shape)}"
                )
            arr[...] = src.astype(arr.dtype)
        extra = set(state) - set(own)
        if extra:
            raise ConfigurationError(f"checkpoint has unexpected tensor '{sorted(extra)[0]}'")

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad[...] = 0

    def param_count(self) -> int:
        return sum(p.data.size for p in self.parameters())


def he_init(rng: np.random.Generator, c_out: int, c_in_per_group: int,
            kh: int, kw: int, dtype) -> np.ndarray:
    """Variance-scaling (fan-in) normal init."""
    fan_in = c_in_per_group * kh * kw
    std = np.sqrt(2.0 / fan_in)
    return (rng.standard_normal((c_out, c_in_per_group, kh, kw)) * std).astype(dtype)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel, stride=1, padding=0,
                 groups: int = 1, bias: bool = False, *,
                 rng: np.random.Generator, dtype=np.float32):
        kh, kw = ops._as_pair(kernel)
        if c_in % groups or c_out % groups:
            raise ConfigurationError(
                f"channels ({c_in}->{c_out}) not divisible by groups={groups}"
            )
        self.c_in = c_in
        self.c_out = c_out
        self.kernel = (kh, kw)
        self.stride = ops._as_pair(stride)
        self.padding = ops._as_pair(padding)
        self.groups = groups
        self.weight = Parameter(he_init(rng, c_out, c_in // groups, kh, kw, dtype))
        self.bias = Parameter(np.zeros(c_out, dtype=dtype)) if bias else None

    def conv_params(self) -> ConvParams:
        return ConvParams(
            weight=self.weight.data,
            bias=None if self.bias is None else self.bias.data,
            stride=self.stride,
            padding=self.padding,
            groups=self.groups,
        )

    def forward(self, x: np.ndarray, training: bool = False):
        return ops.conv2d(x, self.conv_params()), x

    def backward(self, cache, grad_out: np.ndarray) -> np.ndarray:
        gx, gw, gb = ops.conv2d_backward(cache, self.conv_params(), grad_out)
        self.weight.grad += gw
        if self.bias is not None:
            self.bias.grad += gb
        return gx


class BatchNorm2d(Module):
    buffer_attrs = ("running_mean", "running_var")

    def __init__(self, c: int, eps: float = 1e-5, momentum: float = 0.1, *,
                 dtype=np.float32):
        self.c = c
        self.eps = eps
        self.momentum = momentum
        self.gamma = Parameter(np.ones(c, dtype=dtype))
        self.beta = Parameter(np.zeros(c, dtype=dtype))
        self.running_mean = np.zeros(c, dtype=dtype)
        self.running_var = np.ones(c, dtype=dtype)

    def bn_params(self) -> BatchNormParams:
        return BatchNormParams(
            gamma=self.gamma.data, beta=self.beta.data,
            running_mean=self.running_mean, running_var=self.running_var,
            eps=self.eps, momentum=self.momentum,
        )

    def forward(self, x: np.ndarray, training: bool = False):
        return ops.batch_norm(x, self.bn_params(), training)

    def backward(self, cache, grad_out: np.ndarray) -> np.ndarray:
        gx, ggamma, gbeta = ops.batch_norm_backward(cache, grad_out)
        self.gamma.grad += ggamma
        self.beta.grad += gbeta
        return gx


class ReLU6(Module):
    def forward(self, x: np.ndarray, training: bool = False):
        return ops.relu6(x), x

    def backward(self, cache, grad_out: np.ndarray) -> np.ndarray:
        return ops.relu6_backward(cache, grad_out)


class Sequential(Module):
    def __init__(self, *layers: Module):
        self.layers = list(layers)

    def forward(self, x: np.ndarray, training: bool = False):
        caches = []
        for layer in self.layers:
            x, cache = layer.forward(x, training)
            caches.append(cache)
        return x, caches

    def backward(self, caches, grad_out: np.ndarray) -> np.ndarray:
        for layer, cache in zip(reversed(self.layers), reversed(caches)):
            grad_out = layer.backward(cache, grad_out)
        return grad_out


def conv_bn_act(c_in: int, c_out: int, kernel, stride=1, padding=0, groups=1, *,
                rng, dtype=np.float32, act: bool = True) -> Sequential:
    layers = [
        Conv2d(c_in, c_out, kernel, stride, padding, groups, rng=rng, dtype=dtype),
        BatchNorm2d(c_out, dtype=dtype),
    ]
    if act:
        layers.append(ReLU6())
    return Sequential(*layers)


class InvertedResidual(Module):
    """expand 1x1 -> depthwise 3x3 -> linear project 1x1, skip when shapes match.

    The expansion widens the channel axis by ``expansion``; the projection has
    batch norm but no activation. The skip connection exists exactly when
    stride is 1 and input/output channel counts agree.
    """

    def __init__(self, c_in: int, c_out: int, stride: int = 1, expansion: int = 4, *,
                 rng, dtype=np.float32):
        hidden = c_in * expansion
        self.c_in = c_in
        self.c_out = c_out
        self.stride = int(stride)
        self.expansion = int(expansion)
        self.hidden = hidden
        self.use_skip = self.stride == 1 and c_in == c_out
        self.expand = conv_bn_act(c_in, hidden, 1, rng=rng, dtype=dtype)
        self.depthwise = conv_bn_act(hidden, hidden, 3, stride=self.stride, padding=1,
                                     groups=hidden, rng=rng, dtype=dtype)
        self.project = conv_bn_act(hidden, c_out, 1, rng=rng, dtype=dtype, act=False)

    def forward(self, x: np.ndarray, training: bool = False):
        y, c1 = self.expand.forward(x, training)
        y, c2 = self.depthwise.forward(y, training)
        y, c3 = self.project.forward(y, training)
        if self.use_skip:
            y = ops.ewise_add(y, x)
        return y, (c1, c2, c3)

    def backward(self, cache, grad_out: np.ndarray) -> np.ndarray:
        c1, c2, c3 = cache
        g = self.project.backward(c3, grad_out)
        g = self.depthwise.backward(c2, g)
        g = self.expand.backward(c1, g)
        if self.use_skip:
            g = g + grad_out
        return g


class Upsample2x(Module):
    """Bilinear x2 upsampling (half-pixel centers)."""

    def forward(self, x: np.ndarray, training: bool = False):
        n, c, h, w = x.shape
        y = ops.bilinear_resize(x, 2 * h, 2 * w)
        return y, x.shape

    def backward(self, cache, grad_out: np.ndarray) -> np.ndarray:
        return ops.bilinear_resize_backward(cache, grad_out)
