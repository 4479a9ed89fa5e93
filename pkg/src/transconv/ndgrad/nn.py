"""Parameter containers and the layers built from the functional ops."""
from __future__ import annotations

from collections import OrderedDict
from typing import Iterator, Optional

import numpy as np

from ..errors import ShapeError
from . import functional as F
from .tensor import Tensor


class Parameter(Tensor):
    """A leaf tensor that always requires grad.

    Its hierarchical name is assigned by the owning :class:`Module` tree
    (see :meth:`Module.named_parameters`).
    """

    __slots__ = ()

    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Module:
    """Tree of parameters, buffers and sub-modules with torch-like naming."""

    def __init__(self):
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_buffers", OrderedDict())
        object.__setattr__(self, "_modules", OrderedDict())
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def named_children(self):
        return self._modules.items()

    def named_parameters(self, prefix: str = "") -> Iterator[tuple]:
        for name, p in self._params.items():
            yield (f"{prefix}.{name}" if prefix else name), p
        for name, m in self._modules.items():
            yield from m.named_parameters(f"{prefix}.{name}" if prefix else name)

    def named_buffers(self, prefix: str = "") -> Iterator[tuple]:
        for name, b in self._buffers.items():
            yield (f"{prefix}.{name}" if prefix else name), b
        for name, m in self._modules.items():
            yield from m.named_buffers(f"{prefix}.{name}" if prefix else name)

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def train(self, mode: bool = True) -> "Module":
        object.__setattr__(self, "training", mode)
        for m in self._modules.values():
            m.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        state = OrderedDict((n, p.data.copy()) for n, p in self.named_parameters())
        state.update((n, b.copy()) for n, b in self.named_buffers())
        return state

    def load_state_dict(self, state: dict) -> None:
        own = dict(self.named_parameters())
        bufs = dict(self.named_buffers())
        missing = (set(own) | set(bufs)) - set(state)
        unexpected = set(state) - set(own) - set(bufs)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, p in own.items():
            if p.shape != tuple(state[name].shape):
                raise ShapeError(f"parameter {name}", p.shape, state[name].shape)
            p.data = np.ascontiguousarray(state[name], dtype=p.dtype)
        for name, b in bufs.items():
            b[...] = state[name]

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        for m in modules:
            self.append(m)

    def append(self, module: Module) -> None:
        setattr(self, str(len(self._modules)), module)

    def __iter__(self):
        return iter(self._modules.values())

    def __len__(self):
        return len(self._modules)

    def __getitem__(self, i):
        return list(self._modules.values())[i]


class Identity(Module):
    def forward(self, x, *args):
        return x


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator,
                 bias: bool = True, zero_init: bool = False):
        super().__init__()
        shape = (out_features, in_features)
        w = np.zeros(shape) if zero_init else kaiming_uniform(rng, shape, in_features)
        self.w = Parameter(w)
        self.b = Parameter(np.zeros(out_features)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.linear(x, self.w, self.b)


class Conv1d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, rng: np.random.Generator,
                 stride: int = 1, dilation: int = 1, padding="same", zero_init: bool = False):
        super().__init__()
        shape = (out_channels, in_channels, kernel_size)
        fan_in = in_channels * kernel_size
        self.w = Parameter(np.zeros(shape) if zero_init else kaiming_uniform(rng, shape, fan_in))
        self.b = Parameter(np.zeros(out_channels))
        self.stride, self.dilation, self.padding = stride, dilation, padding

    def forward(self, x: Tensor) -> Tensor:
        return F.conv1d(x, self.w, self.b, stride=self.stride, dilation=self.dilation, padding=self.padding)


class BatchNorm1d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        self.register_buffer("running_mean", np.zeros(channels))
        self.register_buffer("running_var", np.ones(channels))
        self.momentum, self.eps = momentum, eps

    def forward(self, x: Tensor) -> Tensor:
        return F.batchnorm1d(x, self.gamma, self.beta, self.running_mean, self.running_var,
                             self.training, self.momentum, self.eps)


class LayerNorm(Module):
    def __init__(self, features: int, eps: float = 1e-5):
        super().__init__()
        self.gamma = Parameter(np.ones(features))
        self.beta = Parameter(np.zeros(features))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return F.layernorm(x, self.gamma, self.beta, self.eps)


class _Recurrent(Module):
    gates = 1
    kernel = None

    def __init__(self, input_size: int, hidden_size: int, rng: np.random.Generator, num_layers: int = 1):
        super().__init__()
        self.hidden_size = hidden_size
        bound = 1.0 / np.sqrt(hidden_size)
        self.layers = ModuleList()
        for layer in range(num_layers):
            cell = Module()
            width = input_size if layer == 0 else hidden_size
            cell.w_ih = Parameter(rng.uniform(-bound, bound, (self.gates * hidden_size, width)))
            cell.w_hh = Parameter(rng.uniform(-bound, bound, (self.gates * hidden_size, hidden_size)))
            cell.b_ih = Parameter(np.zeros(self.gates * hidden_size))
            cell.b_hh = Parameter(np.zeros(self.gates * hidden_size))
            self.layers.append(cell)

    def forward(self, x: Tensor) -> Tensor:
        """``x[B, L, I]`` -> hidden sequence ``[B, L, H]`` of the top layer."""
        h = x
        for cell in self.layers:
            h = type(self).kernel(h, cell.w_ih, cell.w_hh, cell.b_ih, cell.b_hh)
        return h


class GRU(_Recurrent):
    gates = 3
    kernel = staticmethod(F.gru)


class LSTM(_Recurrent):
    gates = 4
    kernel = staticmethod(F.lstm)


def new_rng(seed: Optional[int]) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))
