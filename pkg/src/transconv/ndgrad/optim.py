"""Adam with bias correction."""
from __future__ import annotations

from typing import Iterable

import numpy as np

from ..errors import NumericalError


def adam_step(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray, lr: float,
              betas=(0.9, 0.999), eps: float = 1e-8, step: int = 1) -> None:
    """In-place Adam update of one array; ``step`` counts from 1."""
    if step < 1:
        raise ValueError("Adam step counter starts at 1")
    b1, b2 = betas
    m *= b1
    m += (1.0 - b1) * grad
    v *= b2
    v += (1.0 - b2) * grad * grad
    m_hat = m / (1.0 - b1 ** step)
    v_hat = v / (1.0 - b2 ** step)
    param -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(param.dtype, copy=False)


class Adam:
    def __init__(self, named_params: Iterable, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(named_params)
        names = [n for n, _ in self.params]
        if len(set(names)) != len(names):
            raise ValueError("parameter names must be unique")
        self.lr, self.betas, self.eps = float(lr), tuple(float(b) for b in betas), float(eps)
        self.step_count = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.params}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params}

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    def step(self) -> None:
        # validate every gradient before touching any parameter
        for name, p in self.params:
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise NumericalError(f"non-finite gradient in parameter {name}")
        self.step_count += 1
        for name, p in self.params:
            if p.grad is None:
                continue
            adam_step(p.data, p.grad, self.m[name], self.v[name], self.lr, self.betas, self.eps, self.step_count)

    def hyperparams(self) -> dict:
        return {"lr": self.lr, "betas": list(self.betas), "eps": self.eps, "step": self.step_count}

    def load_state(self, hyper: dict, m: dict, v: dict) -> None:
        self.step_count = int(hyper["step"])
        for name, _ in self.params:
            self.m[name][...] = m[name]
            self.v[name][...] = v[name]
