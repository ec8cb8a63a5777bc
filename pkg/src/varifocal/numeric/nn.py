"""Minimal module system: parameter discovery, train/eval switching, state dicts."""
from __future__ import annotations

from typing import Iterator, Optional

import numpy as np

from . import ops
from .tensor import NumericError, Parameter, Tensor, default_dtype


class Module:
    training: bool = True

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, value in vars(self).items():
            if isinstance(value, (Parameter, Module)):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, (Parameter, Module)):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, child in self._children():
            full = f"{prefix}{name}"
            if isinstance(child, Parameter):
                yield full, child
            else:
                yield from child.named_parameters(full + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name in getattr(self, "_buffer_names", ()):
            yield f"{prefix}{name}", getattr(self, name)
        for name, child in self._children():
            if isinstance(child, Module):
                yield from child.named_buffers(f"{prefix}{name}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self._children():
            if isinstance(child, Module):
                yield from child.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.trainable = flag

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(dict(self.named_buffers()))
        return state

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        missing = [k for k in list(params) + list(buffers) if k not in state]
        if strict and missing:
            raise KeyError(f"state dict is missing {missing[:5]}{'...' if len(missing) > 5 else ''}")
        for name, p in params.items():
            if name in state:
                arr = np.asarray(state[name])
                if arr.shape != p.shape:
                    raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
                p.data = arr.astype(p.dtype).copy()
                p.zero_grad()
        for name, buf in buffers.items():
            if name in state:
                buf[...] = state[name]

    def astype(self, dtype) -> "Module":
        """Cast all parameters and buffers in place (e.g. to float64 for gradient checks)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.zero_grad()
        for m in self.modules():
            for name in getattr(m, "_buffer_names", ()):
                buf = getattr(m, name)
                if np.issubdtype(buf.dtype, np.floating):
                    setattr(m, name, buf.astype(dtype))
        return self


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, stride: int = 1, pad: int = 0, bias: bool = False):
        self.c_in, self.c_out, self.kernel, self.stride, self.pad = c_in, c_out, kernel, stride, pad
        self.weight = Parameter(np.zeros((c_out, c_in, kernel, kernel), dtype=default_dtype()))
        self.bias = Parameter(np.zeros(c_out, dtype=default_dtype())) if bias else None

    @property
    def fan_in(self) -> int:
        return self.c_in * self.kernel * self.kernel

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, stride=self.stride, pad=self.pad)


class BatchNorm2d(Module):
    _buffer_names = ("running_mean", "running_var", "num_batches_tracked")

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        if eps <= 0:
            raise ValueError("batch norm epsilon must be positive")
        self.channels, self.momentum, self.eps = channels, momentum, eps
        self.gamma = Parameter(np.ones(channels, dtype=default_dtype()))
        self.beta = Parameter(np.zeros(channels, dtype=default_dtype()))
        self.running_mean = np.zeros(channels, dtype=default_dtype())
        self.running_var = np.ones(channels, dtype=default_dtype())
        self.num_batches_tracked = np.zeros(1, dtype=np.int64)

    def forward(self, x: Tensor) -> Tensor:
        if self.training:
            self.num_batches_tracked += 1
            return ops.batch_norm2d(x, self.gamma, self.beta, self.running_mean, self.running_var,
                                    training=True, momentum=self.momentum, eps=self.eps)
        if self.num_batches_tracked[0] == 0:
            raise NumericError("batch norm has no running statistics; train the model first")
        return ops.batch_norm2d(x, self.gamma, self.beta, self.running_mean, self.running_var,
                                training=False, eps=self.eps)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int):
        self.d_in, self.d_out = d_in, d_out
        self.weight = Parameter(np.zeros((d_out, d_in), dtype=default_dtype()))
        self.bias = Parameter(np.zeros(d_out, dtype=default_dtype()))

    def forward(self, x: Tensor) -> Tensor:
        return ops.fully_connected(x, self.weight, self.bias)


def he_normal_(weight: Parameter, fan_in: int, rng: np.random.Generator) -> None:
    """Fill ``weight`` from N(0, 2/fan_in)."""
    weight.data = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=weight.shape).astype(weight.dtype)
    weight.zero_grad()


def init_module(module: Module, rng: np.random.Generator, bias_value: Optional[float] = 0.0) -> None:
    """He-initialize conv and FC weights, zero biases, reset batch-norm affine to (1, 0)."""
    for m in module.modules():
        if isinstance(m, Conv2d):
            he_normal_(m.weight, m.fan_in, rng)
            if m.bias is not None:
                m.bias.data[...] = bias_value
        elif isinstance(m, Linear):
            he_normal_(m.weight, m.d_in, rng)
            m.bias.data[...] = bias_value
        elif isinstance(m, BatchNorm2d):
            m.gamma.data[...] = 1.0
            m.beta.data[...] = 0.0
