"""Gradient-descent optimizers over named parameter dictionaries.

SGD with momentum trains the model zoo (the classifier/LM recipe); Adam
drives perturbation-pattern and attack-classifier optimization, where it is
far less sensitive to scale.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor


class FrozenParameterError(RuntimeError):
    """Attempted to update a parameter of a frozen model."""


def _check_updatable(params: dict[str, Tensor]) -> None:
    for name, p in params.items():
        if not p.data.flags.writeable or not p.requires_grad:
            raise FrozenParameterError(f"parameter '{name}' is frozen")


class Sgd:
    def __init__(self, params: dict[str, Tensor], lr: float, momentum: float = 0.0):
        self.params = dict(params)
        self.lr = float(lr)
        self.momentum = float(momentum)
        self._velocity = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self) -> None:
        _check_updatable(self.params)
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            v = self._velocity[name]
            v *= self.momentum
            v += g
            p.data -= self.lr * v
            p._fin = False  # data mutated in place; re-verify on next use

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = dict(params)
        self.lr = float(lr)
        self.beta1, self.beta2 = betas
        self.eps = float(eps)
        self._m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self._v = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self._t = 0

    def step(self) -> None:
        _check_updatable(self.params)
        self._t += 1
        b1, b2, t = self.beta1, self.beta2, self._t
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = self._m[name]
            v = self._v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            m_hat = m / (1 - b1**t)
            v_hat = v / (1 - b2**t)
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
            p._fin = False  # data mutated in place; re-verify on next use

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()
