"""Shared model machinery: parameter registry, freezing, training report."""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from ..autodiff import Tensor
from ..optim import FrozenParameterError


class TrainingDivergedError(RuntimeError):
    """Training produced a non-finite loss; the message names the epoch."""


@dataclass
class TrainReport:
    train_loss: float
    test_loss: float
    rho: float            # overfitting ratio: test loss / train loss
    epochs: int
    seed: int

    def __post_init__(self):
        if self.rho < 0:
            raise ValueError("rho must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


class Module:
    """Base for the tiny model zoo: a named-parameter dict plus freezing.

    ``freeze`` disables gradient accumulation and makes the underlying arrays
    read-only, so a frozen model is bit-immutable: optimizers refuse to touch
    it and raw writes fail.  Freezing is idempotent; forward passes and
    gradients with respect to inputs or injected patterns are unaffected.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._frozen = False

    def _param(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(np.asarray(value, dtype=np.float64), requires_grad=True)
        self._params[name] = t
        return t

    def parameters(self) -> dict[str, Tensor]:
        return dict(self._params)

    @property
    def frozen(self) -> bool:
        return self._frozen

    def freeze(self):
        for p in self._params.values():
            p.requires_grad = False
            p.grad = None
            p.data.flags.writeable = False
        self._frozen = True
        return self

    def require_unfrozen(self) -> None:
        if self._frozen:
            raise FrozenParameterError(f"{type(self).__name__} is frozen")

    def parameter_fingerprint(self) -> str:
        import hashlib
        h = hashlib.sha256()
        for name in sorted(self._params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self._params[name].data, dtype="<f8").tobytes())
        return h.hexdigest()

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self._params.items()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.require_unfrozen()
        for name, p in self._params.items():
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise ValueError(f"parameter '{name}': shape {arr.shape} != {p.data.shape}")
            p.data[...] = arr


def freeze(model: Module) -> Module:
    """Freeze a trained model in place and return it (idempotent)."""
    return model.freeze()
