"""Parameter containers and the two learnable layer types (dense, conv)."""
from __future__ import annotations

import numpy as np

from . import numerics as nx
from .numerics import Tensor


class Parameter(Tensor):
    """Trainable leaf tensor.

    ``decay`` marks whether decoupled weight decay applies; biases and the
    position encoding opt out.
    """

    def __init__(self, data, decay=True, dtype=np.float32):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.decay = decay


class Module:
    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
            self._children.pop(name, None)
        elif isinstance(value, Module):
            self._children[name] = value
            self._params.pop(name, None)
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix=""):
        for name, p in self._params.items():
            yield prefix + name, p
        for name, child in self._children.items():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]

    def num_parameters(self):
        return sum(p.size for p in self.parameters())

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def freeze(self):
        for p in self.parameters():
            p.requires_grad = False
        return self

    def astype(self, dtype):
        """Cast every parameter in place (float64 for gradient checks)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def state_dict(self):
        return {name: p.data for name, p in self.named_parameters()}

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        object.__setattr__(self, "_items", [])
        for m in modules:
            self.append(m)

    def append(self, module):
        self._children[str(len(self._items))] = module
        self._items.append(module)

    def __getitem__(self, i):
        return self._items[i]

    def __len__(self):
        return len(self._items)

    def __iter__(self):
        return iter(self._items)


def fan_in_uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class Linear(Module):
    """Per-token affine map over the last axis."""

    def __init__(self, in_features, out_features, rng, bias=True, zero_bias=False):
        super().__init__()
        self.weight = Parameter(fan_in_uniform(rng, (out_features, in_features), in_features))
        if bias:
            init = np.zeros(out_features, np.float32) if zero_bias else fan_in_uniform(rng, (out_features,), in_features)
            self.bias = Parameter(init, decay=False)
        else:
            self.bias = None

    def forward(self, x):
        return nx.linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, in_channels, out_channels, kernel_size, rng, stride=1, padding=0, zero_bias=False):
        super().__init__()
        fan_in = in_channels * kernel_size * kernel_size
        self.stride = stride
        self.padding = padding
        self.weight = Parameter(fan_in_uniform(rng, (out_channels, in_channels, kernel_size, kernel_size), fan_in))
        init = np.zeros(out_channels, np.float32) if zero_bias else fan_in_uniform(rng, (out_channels,), fan_in)
        self.bias = Parameter(init, decay=False)

    def forward(self, x):
        return nx.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)
