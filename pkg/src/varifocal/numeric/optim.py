from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from .tensor import Parameter


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    learning_rate: float = 1e-4

    @classmethod
    def for_param(cls, param: Parameter, **hyper) -> "AdamState":
        return cls(np.zeros_like(param.data), np.zeros_like(param.data), **hyper)


def adam_step(param: Parameter, state: Optional[AdamState]) -> None:
    """One bias-corrected Adam update of ``param`` in place; advances ``state``."""
    if state is None:
        raise ValueError("Adam state is not initialized")
    if param.grad is None:
        raise ValueError("parameter has no gradient")
    if state.m.shape != param.shape:
        raise ValueError(f"Adam state shape {state.m.shape} != parameter shape {param.shape}")
    g = param.grad
    state.step += 1
    state.m *= state.beta1
    state.m += (1 - state.beta1) * g
    state.v *= state.beta2
    state.v += (1 - state.beta2) * g * g
    m_hat = state.m / (1 - state.beta1 ** state.step)
    v_hat = state.v / (1 - state.beta2 ** state.step)
    param.data -= (state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)).astype(param.dtype)


def step_decay_lr(base_lr: float, epoch: int, factor: float = 0.9, every: int = 10) -> float:
    """Learning rate after multiplying by ``factor`` every ``every`` epochs (epochs count from 0)."""
    return base_lr * factor ** (epoch // every)


@dataclass
class Adam:
    params: list
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    states: dict = field(default_factory=dict)

    def __post_init__(self):
        self.params = [p for p in self.params if p.trainable]
        for i, p in enumerate(self.params):
            self.states.setdefault(i, AdamState.for_param(
                p, beta1=self.beta1, beta2=self.beta2, epsilon=self.epsilon, learning_rate=self.lr))

    @classmethod
    def over(cls, params: Iterable[Parameter], **kwargs) -> "Adam":
        return cls(list(params), **kwargs)

    def set_lr(self, lr: float) -> None:
        self.lr = lr
        for s in self.states.values():
            s.learning_rate = lr

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        for i, p in enumerate(self.params):
            adam_step(p, self.states[i])

    def state_arrays(self, prefix: str = "adam") -> dict[str, np.ndarray]:
        out = {}
        for i, s in self.states.items():
            out[f"{prefix}.{i}.m"] = s.m
            out[f"{prefix}.{i}.v"] = s.v
            out[f"{prefix}.{i}.step"] = np.array([s.step], dtype=np.int64)
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], prefix: str = "adam") -> None:
        for i, s in self.states.items():
            key = f"{prefix}.{i}"
            if f"{key}.m" in arrays:
                s.m = arrays[f"{key}.m"].astype(s.m.dtype).copy()
                s.v = arrays[f"{key}.v"].astype(s.v.dtype).copy()
                s.step = int(arrays[f"{key}.step"][0])
