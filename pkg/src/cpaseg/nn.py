"""Parameter containers and the layers built from tensor primitives."""

from __future__ import annotations

from collections import OrderedDict
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Parameter(Tensor):
    """A leaf tensor that the optimizer updates."""

    __slots__ = ()

    def __init__(self, data, name: str | None = None):
        super().__init__(data, requires_grad=True, name=name)


class Module:
    """Minimal module tree: parameters, buffers and a train/eval flag.

    Attributes that are Parameters, Modules or lists of Modules are
    discovered automatically, in attribute assignment order, which fixes
    the parameter ordering used by checkpoints and the optimizer.
    """

    def __init__(self) -> None:
        self.training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def _children(self) -> Iterator[tuple[str, object]]:
        for key, value in vars(self).items():
            if isinstance(value, (Parameter, Module)):
                yield key, value
            elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
                for i, v in enumerate(value):
                    yield f"{key}.{i}", v

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in self._children():
            if isinstance(value, Parameter):
                yield prefix + key, value
            else:
                yield from value.named_parameters(prefix + key + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator[Module]:
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, buf in self._buffers():
            yield prefix + name, buf
        for key, value in self._children():
            if isinstance(value, Module):
                yield from value.named_buffers(prefix + key + ".")

    def _buffers(self) -> Iterator[tuple[str, np.ndarray]]:
        return iter(())

    def train(self, mode: bool = True) -> Module:
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> Module:
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype) -> Module:
        """Cast every parameter and buffer in place."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        for m in self.modules():
            m._cast_buffers(dtype)
        return self

    def _cast_buffers(self, dtype) -> None:
        pass

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        state: OrderedDict[str, np.ndarray] = OrderedDict()
        for name, p in self.named_parameters():
            state[name] = p.data
        for name, b in self.named_buffers():
            state[name] = b
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = self.state_dict()
        missing = set(own) - set(state)
        unexpected = set(state) - set(own)
        if missing or unexpected:
            raise KeyError(f"state mismatch; missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, target in own.items():
            src = np.asarray(state[name])
            if src.shape != target.shape:
                raise T.ShapeError(f"{name}: checkpoint shape {src.shape} != model shape {target.shape}")
            target[...] = src

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())


def kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Conv2d(Module):
    def __init__(
        self,
        rng: np.random.Generator,
        in_ch: int,
        out_ch: int,
        k: int,
        stride: int = 1,
        padding: int | None = None,
        dilation: int = 1,
        bias: bool = True,
    ):
        super().__init__()
        self.stride, self.dilation = stride, dilation
        self.padding = dilation * (k - 1) // 2 if padding is None else padding
        self.weight = Parameter(kaiming_uniform(rng, (out_ch, in_ch, k, k)))
        self.bias = Parameter(np.zeros(out_ch)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.dilation)


class BatchNorm2d(Module):
    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.eps, self.momentum = eps, momentum
        self.weight = Parameter(np.ones(channels))
        self.bias = Parameter(np.zeros(channels))
        self.running_mean = np.zeros(channels, dtype=self.weight.dtype)
        self.running_var = np.ones(channels, dtype=self.weight.dtype)

    def _buffers(self):
        yield "running_mean", self.running_mean
        yield "running_var", self.running_var

    def _cast_buffers(self, dtype) -> None:
        self.running_mean = self.running_mean.astype(dtype)
        self.running_var = self.running_var.astype(dtype)

    def forward(self, x: Tensor) -> Tensor:
        return T.batchnorm2d(
            x, self.weight, self.bias, self.running_mean, self.running_var,
            self.training, self.eps, self.momentum,
        )


class ConvReLUBN(Module):
    """3x3 convolution followed by ReLU and then BatchNorm, in that order."""

    def __init__(self, rng: np.random.Generator, in_ch: int, out_ch: int, k: int = 3):
        super().__init__()
        self.conv = Conv2d(rng, in_ch, out_ch, k, bias=False)
        self.bn = BatchNorm2d(out_ch)

    def forward(self, x: Tensor) -> Tensor:
        return self.bn(T.relu(self.conv(x)))


class ConvBNReLU(Module):
    def __init__(self, rng: np.random.Generator, in_ch: int, out_ch: int, k: int = 3, stride: int = 1, dilation: int = 1):
        super().__init__()
        self.conv = Conv2d(rng, in_ch, out_ch, k, stride=stride, dilation=dilation, bias=False)
        self.bn = BatchNorm2d(out_ch)

    def forward(self, x: Tensor) -> Tensor:
        return T.relu(self.bn(self.conv(x)))
