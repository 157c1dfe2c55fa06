"""Small layer containers with named parameters and buffers."""
from __future__ import annotations

import math

import numpy as np

from . import ops
from .tensor import Parameter, Tensor


class Module:
    training = True

    def named_children(self):
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
                for i, v in enumerate(value):
                    yield f"{name}.{i}", v

    def _own_parameters(self):
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield name, value

    def _own_buffers(self):
        return []

    def named_parameters(self, prefix: str = ""):
        for name, p in self._own_parameters():
            yield prefix + name, p
        for name, child in self.named_children():
            yield from child.named_parameters(prefix + name + ".")

    def named_buffers(self, prefix: str = ""):
        for name, b in self._own_buffers():
            yield prefix + name, b
        for name, child in self.named_children():
            yield from child.named_buffers(prefix + name + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def train(self, mode: bool = True):
        self.training = mode
        for _, child in self.named_children():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))


class Conv3d(Module):
    def __init__(self, c_in, c_out, kernel=3, stride=1, padding=None, rng=None, dtype=np.float32,
                 init_std=None, bias_value=0.0, bias: bool = True):
        k = kernel
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        fan_in = c_in * k ** 3
        std = math.sqrt(2.0 / fan_in) if init_std is None else init_std
        w = rng.standard_normal((c_out, c_in, k, k, k)) * std
        self.weight = Parameter(w.astype(dtype))
        self.bias = None
        if bias:
            b = np.full(c_out, bias_value, dtype=np.float64) if np.isscalar(bias_value) else np.asarray(bias_value)
            self.bias = Parameter(b.astype(dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv3d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class BatchNorm3d(Module):
    def __init__(self, channels, dtype=np.float32, momentum=0.1, eps=1e-5):
        self.weight = Parameter(np.ones(channels, dtype=dtype))
        self.bias = Parameter(np.zeros(channels, dtype=dtype))
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps

    def _own_buffers(self):
        return [("running_mean", self.running_mean), ("running_var", self.running_var)]

    def __call__(self, x: Tensor) -> Tensor:
        return ops.batchnorm3d(x, self.weight, self.bias, self.running_mean, self.running_var,
                               self.training, self.momentum, self.eps)


class Identity(Module):
    def __call__(self, x):
        return x
