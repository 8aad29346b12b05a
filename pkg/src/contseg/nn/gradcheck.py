"""Central finite-difference oracles for analytic gradients."""
from __future__ import annotations

from typing import Callable

import numpy as np


def numerical_gradient(f: Callable[[], float], x: np.ndarray, h: float = 1e-3) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. ``x``, perturbed in place."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        g[i] = (fp - fm) / (2 * h)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float((np.abs(a - n) / denom).max())


def check_layer(layer, x: np.ndarray, h: float = 1e-3, seed: int = 0, floor: float = 1e-8) -> dict[str, float]:
    """Max relative error of input and parameter gradients of ``layer``.

    The probe objective is ``sum(layer(x) * r)`` for a fixed random ``r``;
    everything runs in float64.  ``floor`` bounds the relative-error
    denominator, which matters for parameters whose true gradient is zero
    (a bias followed by normalization).
    """
    layer.astype(np.float64)
    x = np.array(x, dtype=np.float64)
    out = layer.forward(x, train=True)
    r = np.random.default_rng(seed).standard_normal(out.shape)
    grad_in = layer.backward(r)
    analytic = {name: owner.grads[key].copy() for name, owner, key in layer.named_parameters()}

    def objective():
        return float((layer.forward(x, train=True) * r).sum())

    errors = {}
    if grad_in is not None:
        errors["input"] = max_relative_error(grad_in, numerical_gradient(objective, x, h), floor)
    for name, owner, key in layer.named_parameters():
        errors[name] = max_relative_error(analytic[name], numerical_gradient(objective, owner.params[key], h), floor)
    for mod in layer.modules():
        if hasattr(mod, "_cache"):
            mod._cache = None
    return errors
