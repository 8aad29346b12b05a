from __future__ import annotations

import numpy as np

from .layers import FrozenParameterError, Module
from .tensor import check_finite


def poly_lr(lr0: float, epoch: int, total_epochs: int, exponent: float = 0.9) -> float:
    """Polynomial decay ``lr0 * (1 - epoch/total)^exponent``."""
    if total_epochs <= 0:
        raise ValueError("total_epochs must be positive")
    return lr0 * (1.0 - min(epoch, total_epochs) / total_epochs) ** exponent


def sgd_update(param, grad, velocity, lr, momentum=0.0, nesterov=False):
    """One in-place SGD step; returns the new velocity.

    Uses the ``v = mu*v + g`` convention, with the Nesterov look-ahead
    ``p -= lr * (g + mu*v)``.
    """
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    if not param.flags.writeable:
        raise FrozenParameterError("update of a read-only parameter")
    if momentum:
        velocity = momentum * velocity + grad if velocity is not None else grad.copy()
        step = grad + momentum * velocity if nesterov else velocity
    else:
        step = grad
    param -= (lr * step).astype(param.dtype, copy=False)
    return velocity


class SGD:
    def __init__(self, modules, lr=0.01, momentum=0.99, nesterov=True):
        if isinstance(modules, Module):
            modules = [modules]
        self.entries = []
        for m in modules:
            if m.frozen:
                raise FrozenParameterError("cannot optimize a frozen module")
            self.entries.extend((owner, key) for _, owner, key in m.named_parameters())
        self.lr = lr
        self.momentum = momentum
        self.nesterov = nesterov
        self._velocity: dict[tuple[int, str], np.ndarray] = {}

    def step(self) -> None:
        for owner, key in self.entries:
            grad = owner.grads.get(key)
            if grad is None:
                continue
            check_finite(grad, f"gradient of {key}")
            slot = (id(owner), key)
            self._velocity[slot] = sgd_update(owner.params[key], grad, self._velocity.get(slot),
                                              self.lr, self.momentum, self.nesterov)

    def zero_grad(self) -> None:
        for owner, _ in self.entries:
            owner.grads = {}
