"""Layers with explicit forward/backward passes over NCDHW arrays.

Every layer caches what its backward needs during a ``train=True`` forward
and is meant to be applied once per forward pass: parameter gradients are
overwritten, not accumulated.
"""
from __future__ import annotations

from typing import Iterator

import numpy as np

from .tensor import DTYPE, check_finite


class FrozenParameterError(RuntimeError):
    """A gradient or update was written to a frozen parameter store."""


class BackwardError(RuntimeError):
    pass


class Module:
    """Parameter owner with recursive discovery of child modules."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.frozen = False

    # -- tree walking -----------------------------------------------------
    def children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self.children():
            yield from child.modules()

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, "Module", str]]:
        """Yield ``(qualified_name, owner, key)`` in deterministic order.

        A module reachable through several attributes is reported once.
        """
        seen: set[int] = set()
        for name, owner, key in self._walk_parameters(prefix):
            if (id(owner), key) not in seen:
                seen.add((id(owner), key))
                yield name, owner, key

    def _walk_parameters(self, prefix):
        for key in self.params:
            yield f"{prefix}{key}", self, key
        for name, child in self.children():
            yield from child._walk_parameters(f"{prefix}{name}.")

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {name: owner.params[key] for name, owner, key in self.named_parameters()}
        for name, mod in self.named_buffers():
            out[name] = mod
        return out

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for key, value in getattr(self, "buffers", {}).items():
            yield f"{prefix}{key}", value
        for name, child in self.children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for name, owner, key in self.named_parameters():
            arr = state[name]
            if arr.shape != owner.params[key].shape:
                raise ValueError(f"shape mismatch for {name}")
            owner.params[key] = np.array(arr, dtype=owner.params[key].dtype)
        for mod_prefix, mod in self._buffer_owners():
            for key in list(mod.buffers):
                mod.buffers[key] = np.array(state[mod_prefix + key], dtype=mod.buffers[key].dtype)
        if self.frozen:
            self.freeze()

    def _buffer_owners(self, prefix: str = ""):
        if getattr(self, "buffers", None):
            yield prefix, self
        for name, child in self.children():
            yield from child._buffer_owners(f"{prefix}{name}.")

    def param_count(self) -> int:
        return sum(owner.params[key].size for _, owner, key in self.named_parameters())

    # -- freezing ---------------------------------------------------------
    def freeze(self) -> "Module":
        """Mark every parameter store read-only (idempotent)."""
        for mod in self.modules():
            mod.frozen = True
            for arr in mod.params.values():
                arr.setflags(write=False)
            mod.grads = {}
        return self

    def unfreeze(self) -> "Module":
        for mod in self.modules():
            mod.frozen = False
            for key, arr in list(mod.params.items()):
                if not arr.flags.writeable:
                    mod.params[key] = arr.copy()
        return self

    def set_grad(self, key: str, value: np.ndarray) -> None:
        if self.frozen:
            raise FrozenParameterError(f"gradient write to frozen parameter {key!r}")
        self.grads[key] = value

    def astype(self, dtype) -> "Module":
        for mod in self.modules():
            for key in mod.params:
                mod.params[key] = mod.params[key].astype(dtype)
            for key in getattr(mod, "buffers", {}):
                mod.buffers[key] = mod.buffers[key].astype(dtype)
        return self


class Layer(Module):
    """Single op with cached-state backward."""

    def __init__(self):
        super().__init__()
        self._cache = None

    def __call__(self, x: np.ndarray, train: bool = True) -> np.ndarray:
        out = self.forward(x, train)
        return check_finite(out, type(self).__name__)

    def forward(self, x, train=True):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    def _pop_cache(self):
        if self._cache is None:
            raise BackwardError(f"{type(self).__name__}.backward called without a train-mode forward")
        cache, self._cache = self._cache, None
        return cache


class Conv3d(Layer):
    """Stride-1 convolution with "same" zero padding and odd kernel extents."""

    def __init__(self, cin, cout, kernel=(3, 3, 3), bias=True, rng=None, dtype=DTYPE):
        super().__init__()
        if any(k % 2 == 0 for k in kernel):
            raise ValueError("kernel extents must be odd for same padding")
        self.cin, self.cout, self.kernel = cin, cout, tuple(kernel)
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = cin * int(np.prod(kernel))
        w = rng.standard_normal((cout, cin, *kernel)) * np.sqrt(2.0 / fan_in)
        self.params["weight"] = w.astype(dtype)
        if bias:
            self.params["bias"] = np.zeros(cout, dtype=dtype)
        self.needs_input_grad = True

    def forward(self, x, train=True):
        if x.ndim != 5 or x.shape[1] != self.cin:
            raise ValueError(f"Conv3d expected (N,{self.cin},D,H,W), got {x.shape}")
        n, c, d, h, w = x.shape
        kd, kh, kw = self.kernel
        weight = self.params["weight"]
        if self.kernel == (1, 1, 1):
            cols = x.transpose(1, 0, 2, 3, 4).reshape(c, -1)
        else:
            pd, ph, pw = kd // 2, kh // 2, kw // 2
            xp = np.pad(x, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw)))
            cols = np.empty((c, kd, kh, kw, n, d, h, w), dtype=x.dtype)
            xt = xp.transpose(1, 0, 2, 3, 4)
            for i in range(kd):
                for j in range(kh):
                    for k in range(kw):
                        cols[:, i, j, k] = xt[:, :, i:i + d, j:j + h, k:k + w]
            cols = cols.reshape(c * kd * kh * kw, -1)
        y = weight.reshape(self.cout, -1).astype(x.dtype, copy=False) @ cols
        if "bias" in self.params:
            y += self.params["bias"].astype(x.dtype, copy=False)[:, None]
        if train:
            self._cache = (cols, x.shape)
        return np.ascontiguousarray(y.reshape(self.cout, n, d, h, w).transpose(1, 0, 2, 3, 4))

    def backward(self, grad):
        cols, shape = self._pop_cache()
        n, c, d, h, w = shape
        kd, kh, kw = self.kernel
        g = grad.transpose(1, 0, 2, 3, 4).reshape(self.cout, -1)
        if not self.frozen:
            self.set_grad("weight", (g @ cols.T).reshape(self.params["weight"].shape))
            if "bias" in self.params:
                self.set_grad("bias", g.sum(axis=1))
        if not self.needs_input_grad:
            return None
        wm = self.params["weight"].reshape(self.cout, -1).astype(grad.dtype, copy=False)
        dcols = wm.T @ g
        if self.kernel == (1, 1, 1):
            return np.ascontiguousarray(dcols.reshape(c, n, d, h, w).transpose(1, 0, 2, 3, 4))
        pd, ph, pw = kd // 2, kh // 2, kw // 2
        dcols = dcols.reshape(c, kd, kh, kw, n, d, h, w)
        dxp = np.zeros((c, n, d + 2 * pd, h + 2 * ph, w + 2 * pw), dtype=grad.dtype)
        for i in range(kd):
            for j in range(kh):
                for k in range(kw):
                    dxp[:, :, i:i + d, j:j + h, k:k + w] += dcols[:, i, j, k]
        dx = dxp[:, :, pd:pd + d, ph:ph + h, pw:pw + w].transpose(1, 0, 2, 3, 4)
        return np.ascontiguousarray(dx)


class _Norm(Layer):
    eps = 1e-5

    def __init__(self, channels, dtype=DTYPE):
        super().__init__()
        self.channels = channels
        self.params["gamma"] = np.ones(channels, dtype=dtype)
        self.params["beta"] = np.zeros(channels, dtype=dtype)

    def _affine(self, xhat):
        g = self.params["gamma"].astype(xhat.dtype, copy=False)[None, :, None, None, None]
        b = self.params["beta"].astype(xhat.dtype, copy=False)[None, :, None, None, None]
        return xhat * g + b

    def _normalized_backward(self, grad, xhat, inv_std, axes):
        if not self.frozen:
            self.set_grad("gamma", (grad * xhat).sum(axis=(0, 2, 3, 4)))
            self.set_grad("beta", grad.sum(axis=(0, 2, 3, 4)))
        gamma = self.params["gamma"].astype(grad.dtype, copy=False)[None, :, None, None, None]
        dxhat = grad * gamma
        m = int(np.prod([xhat.shape[a] for a in axes]))
        s1 = dxhat.sum(axis=axes, keepdims=True)
        s2 = (dxhat * xhat).sum(axis=axes, keepdims=True)
        return inv_std * (dxhat - s1 / m - xhat * s2 / m)


class InstanceNorm3d(_Norm):
    axes = (2, 3, 4)

    def forward(self, x, train=True):
        mu = x.mean(axis=self.axes, keepdims=True)
        var = x.var(axis=self.axes, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mu) * inv_std
        if train:
            self._cache = (xhat, inv_std)
        return self._affine(xhat)

    def backward(self, grad):
        xhat, inv_std = self._pop_cache()
        return self._normalized_backward(grad, xhat, inv_std, self.axes)


class BatchNorm3d(_Norm):
    """Batch norm with running statistics; ``train=False`` uses the stored ones.

    ``use_running`` forces running statistics even in train mode, which turns
    the layer into a per-channel affine map (used when distilling students).
    """

    axes = (0, 2, 3, 4)
    momentum = 0.1

    def __init__(self, channels, dtype=DTYPE):
        super().__init__(channels, dtype)
        self.buffers = {
            "running_mean": np.zeros(channels, dtype=dtype),
            "running_var": np.ones(channels, dtype=dtype),
        }
        self.use_running = False

    def forward(self, x, train=True):
        if train and not self.use_running:
            mu = x.mean(axis=self.axes, keepdims=True)
            var = x.var(axis=self.axes, keepdims=True)
            if not self.frozen:
                m = x.size // x.shape[1]
                rm, rv = self.buffers["running_mean"], self.buffers["running_var"]
                unbiased = var.reshape(-1) * (m / max(m - 1, 1))
                self.buffers["running_mean"] = ((1 - self.momentum) * rm + self.momentum * mu.reshape(-1)).astype(rm.dtype)
                self.buffers["running_var"] = ((1 - self.momentum) * rv + self.momentum * unbiased).astype(rv.dtype)
            inv_std = 1.0 / np.sqrt(var + self.eps)
            xhat = (x - mu) * inv_std
            self._cache = ("batch", xhat, inv_std)
            return self._affine(xhat)
        rm = self.buffers["running_mean"].astype(x.dtype, copy=False)[None, :, None, None, None]
        rv = self.buffers["running_var"].astype(x.dtype, copy=False)[None, :, None, None, None]
        inv_std = 1.0 / np.sqrt(rv + self.eps)
        xhat = (x - rm) * inv_std
        if train:
            self._cache = ("running", xhat, inv_std)
        return self._affine(xhat)

    def backward(self, grad):
        mode, xhat, inv_std = self._pop_cache()
        if mode == "batch":
            return self._normalized_backward(grad, xhat, inv_std, self.axes)
        if not self.frozen:
            self.set_grad("gamma", (grad * xhat).sum(axis=(0, 2, 3, 4)))
            self.set_grad("beta", grad.sum(axis=(0, 2, 3, 4)))
        gamma = self.params["gamma"].astype(grad.dtype, copy=False)[None, :, None, None, None]
        return grad * gamma * inv_std


class LeakyReLU(Layer):
    def __init__(self, slope=0.01):
        super().__init__()
        self.slope = slope

    def forward(self, x, train=True):
        pos = x > 0
        if train:
            self._cache = pos
        return np.where(pos, x, x * x.dtype.type(self.slope))

    def backward(self, grad):
        pos = self._pop_cache()
        return np.where(pos, grad, grad * grad.dtype.type(self.slope))


class ReLU(Layer):
    def forward(self, x, train=True):
        pos = x > 0
        if train:
            self._cache = pos
        return x * pos

    def backward(self, grad):
        return grad * self._pop_cache()


class MaxPool3d(Layer):
    """Non-overlapping max pooling (window == stride)."""

    def __init__(self, window=2):
        super().__init__()
        self.window = window

    def forward(self, x, train=True):
        n, c, d, h, w = x.shape
        k = self.window
        if d % k or h % k or w % k:
            raise ValueError(f"extents {x.shape[2:]} not divisible by pool window {k}")
        blocks = x.reshape(n, c, d // k, k, h // k, k, w // k, k).transpose(0, 1, 2, 4, 6, 3, 5, 7)
        blocks = blocks.reshape(n, c, d // k, h // k, w // k, k ** 3)
        idx = blocks.argmax(axis=-1)
        if train:
            self._cache = (idx, x.shape)
        return np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def backward(self, grad):
        idx, shape = self._pop_cache()
        n, c, d, h, w = shape
        k = self.window
        out = np.zeros(grad.shape + (k ** 3,), dtype=grad.dtype)
        np.put_along_axis(out, idx[..., None], grad[..., None], axis=-1)
        out = out.reshape(n, c, d // k, h // k, w // k, k, k, k).transpose(0, 1, 2, 5, 3, 6, 4, 7)
        return out.reshape(shape)


class NearestUpsample(Layer):
    def __init__(self, factor=2):
        super().__init__()
        self.factor = factor

    def forward(self, x, train=True):
        f = self.factor
        if train:
            self._cache = x.shape
        if f == 1:
            return x
        n, c, d, h, w = x.shape
        out = np.broadcast_to(x[:, :, :, None, :, None, :, None], (n, c, d, f, h, f, w, f))
        return out.reshape(n, c, d * f, h * f, w * f)

    def backward(self, grad):
        n, c, d, h, w = self._pop_cache()
        f = self.factor
        if f == 1:
            return grad
        return grad.reshape(n, c, d, f, h, f, w, f).sum(axis=(3, 5, 7))


def softmax(logits: np.ndarray, axis: int = 1) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


class SoftmaxOverChannels(Layer):
    def forward(self, x, train=True):
        p = softmax(x, axis=1)
        if train:
            self._cache = p
        return p

    def backward(self, grad):
        p = self._pop_cache()
        return p * (grad - (grad * p).sum(axis=1, keepdims=True))


class Sequential(Layer):
    def __init__(self, *layers: Layer):
        super().__init__()
        self.layers = list(layers)

    def forward(self, x, train=True):
        for layer in self.layers:
            x = layer(x, train)
        return x

    def backward(self, grad):
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad
