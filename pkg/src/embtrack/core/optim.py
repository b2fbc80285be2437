"""ADAM with an L2 penalty, and He initialisation."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, get_default_dtype


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-5
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


class Adam:
    """ADAM over a name -> Tensor parameter dict.

    The L2 term ``weight_decay * w`` is added to each gradient before the
    moment updates.
    """

    def __init__(self, params: dict[str, Tensor], lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8,
                 weight_decay=1e-5, state: AdamState | None = None):
        self.params = params
        self.state = state or AdamState(lr, beta1, beta2, eps, weight_decay)
        for name, p in params.items():
            if name in self.state.m:
                if self.state.m[name].shape != p.shape:
                    raise ValueError(f"moment buffer for {name} has shape {self.state.m[name].shape}, "
                                     f"parameter has {p.shape}")
                continue
            self.state.m[name] = np.zeros_like(p.data)
            self.state.v[name] = np.zeros_like(p.data)

    @property
    def lr(self) -> float:
        return self.state.lr

    @lr.setter
    def lr(self, value: float) -> None:
        self.state.lr = float(value)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        s = self.state
        for name, p in self.params.items():
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
        s.step += 1
        bc1 = 1.0 - s.beta1 ** s.step
        bc2 = 1.0 - s.beta2 ** s.step
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            g = g + s.weight_decay * p.data
            m, v = s.m[name], s.v[name]
            m *= s.beta1
            m += (1.0 - s.beta1) * g
            v *= s.beta2
            v += (1.0 - s.beta2) * g * g
            p.data -= (s.lr * (m / bc1) / (np.sqrt(v / bc2) + s.eps)).astype(p.data.dtype)


def he_init(shape, rng: np.random.Generator) -> Tensor:
    """Zero-mean normal weights with variance 2 / fan_in."""
    shape = tuple(int(s) for s in shape)
    fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else shape[0]
    if fan_in <= 0:
        raise ValueError(f"cannot compute fan-in for shape {shape}")
    w = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
    return Tensor(w.astype(get_default_dtype()), requires_grad=True)


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape, dtype=get_default_dtype()), requires_grad=True)
