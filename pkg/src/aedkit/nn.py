"""Minimal numpy layers with explicit backward passes.

Tensors are NCHW. Every leaf layer owns ``params`` (trainable), ``buffers``
(non-trainable state such as batch-norm running statistics) and ``grads``.
``forward`` caches whatever ``backward`` needs; ``backward`` accumulates
nothing, it overwrites ``grads`` and returns the gradient w.r.t. the input.
"""

from __future__ import annotations

import math

import numpy as np

from .rng import as_rng


class Module:
    params: dict
    buffers: dict
    grads: dict

    def __init__(self):
        self.params = {}
        self.buffers = {}
        self.grads = {}
        self.children: list[tuple[str, Module]] = []
        self._cache = None

    def named_modules(self, prefix=""):
        yield prefix, self
        for name, child in self.children:
            yield from child.named_modules(f"{prefix}.{name}" if prefix else name)

    def named_parameters(self, prefix=""):
        for path, module in self.named_modules(prefix):
            for key, value in module.params.items():
                yield (f"{path}.{key}" if path else key), module, key, value

    def named_buffers(self, prefix=""):
        for path, module in self.named_modules(prefix):
            for key, value in module.buffers.items():
                yield (f"{path}.{key}" if path else key), module, key, value

    def _cached(self):
        if self._cache is None:
            raise RuntimeError(f"{type(self).__name__}.backward called before forward")
        return self._cache

    def forward(self, x, training=False):
        raise NotImplementedError

    def backward(self, dy):
        raise NotImplementedError


def _he_uniform(rng, shape, fan_in, dtype):
    limit = math.sqrt(6.0 / fan_in)
    return as_rng(rng).uniform(-limit, limit, size=shape).astype(dtype)


def same_padding(n, k, stride):
    """(before, after) padding so that the output has ceil(n / stride) positions."""
    out = -(-n // stride)
    total = max((out - 1) * stride + k - n, 0)
    return total // 2, total - total // 2


class Conv2d(Module):
    """Dense 2-D convolution without bias (a batch norm always follows)."""

    def __init__(self, cin, cout, kernel, stride=1, padding="valid", rng=0, dtype=np.float32):
        super().__init__()
        self.kernel, self.stride, self.padding = kernel, stride, padding
        fan_in = cin * kernel * kernel
        self.params["weight"] = _he_uniform(rng, (cout, cin, kernel, kernel), fan_in, dtype)

    def _pads(self, h, w):
        if self.padding == "same":
            return same_padding(h, self.kernel, self.stride), same_padding(w, self.kernel, self.stride)
        return (0, 0), (0, 0)

    def forward(self, x, training=False):
        w = self.params["weight"]
        k, s = self.kernel, self.stride
        cout, cin = w.shape[:2]
        if x.shape[1] != cin:
            raise ValueError(f"expected {cin} input channels, got {x.shape[1]}")
        if k == 1:
            xs = x[:, :, ::s, ::s]
            b, _, ho, wo = xs.shape
            out = np.matmul(w.reshape(cout, cin), xs.reshape(b, cin, ho * wo))
            self._cache = (x.shape, xs)
            return out.reshape(b, cout, ho, wo)
        ph, pw = self._pads(*x.shape[2:])
        xp = np.pad(x, ((0, 0), (0, 0), ph, pw)) if any(ph + pw) else x
        b, _, hp, wp = xp.shape
        ho, wo = (hp - k) // s + 1, (wp - k) // s + 1
        if ho < 1 or wo < 1:
            raise ValueError(f"input {x.shape[2:]} too small for {k}x{k} kernel")
        cols = np.stack(
            [xp[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] for i in range(k) for j in range(k)],
            axis=2,
        ).reshape(b, cin * k * k, ho * wo)
        out = np.matmul(w.reshape(cout, -1), cols)
        self._cache = (x.shape, xp.shape, ph, pw, cols)
        return out.reshape(b, cout, ho, wo)

    def backward(self, dy):
        w = self.params["weight"]
        k, s = self.kernel, self.stride
        cout, cin = w.shape[:2]
        b, _, ho, wo = dy.shape
        dy2 = dy.reshape(b, cout, ho * wo)
        if k == 1:
            xshape, xs = self._cached()
            x2 = xs.reshape(b, cin, ho * wo)
            self.grads["weight"] = np.tensordot(dy2, x2, axes=([0, 2], [0, 2])).reshape(w.shape)
            dxs = np.matmul(w.reshape(cout, cin).T, dy2).reshape(b, cin, ho, wo)
            if s == 1:
                return dxs
            dx = np.zeros(xshape, dtype=dy.dtype)
            dx[:, :, ::s, ::s] = dxs
            return dx
        xshape, pshape, ph, pw, cols = self._cached()
        self.grads["weight"] = np.tensordot(dy2, cols, axes=([0, 2], [0, 2])).reshape(w.shape)
        dcols = np.matmul(w.reshape(cout, -1).T, dy2).reshape(b, cin, k, k, ho, wo)
        dxp = np.zeros(pshape, dtype=dy.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += dcols[:, :, i, j]
        h, w_ = xshape[2:]
        return dxp[:, :, ph[0]:ph[0] + h, pw[0]:pw[0] + w_]


class DepthwiseConv2d(Module):
    """Per-channel k x k convolution, stride 1, 'same' padding."""

    def __init__(self, channels, kernel=3, rng=0, dtype=np.float32):
        super().__init__()
        self.kernel = kernel
        self.params["weight"] = _he_uniform(rng, (channels, 1, kernel, kernel), kernel * kernel, dtype)

    def forward(self, x, training=False):
        k = self.kernel
        w = self.params["weight"][:, 0]
        h, wd = x.shape[2:]
        ph, pw = same_padding(h, k, 1), same_padding(wd, k, 1)
        xp = np.pad(x, ((0, 0), (0, 0), ph, pw))
        out = np.zeros_like(x)
        for i in range(k):
            for j in range(k):
                out += xp[:, :, i:i + h, j:j + wd] * w[None, :, i, j, None, None]
        self._cache = (xp, ph, pw)
        return out

    def backward(self, dy):
        xp, ph, pw = self._cached()
        k = self.kernel
        w = self.params["weight"][:, 0]
        h, wd = dy.shape[2:]
        dw = np.empty_like(self.params["weight"])
        dxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                dw[:, 0, i, j] = np.einsum("bchw,bchw->c", dy, xp[:, :, i:i + h, j:j + wd])
                dxp[:, :, i:i + h, j:j + wd] += dy * w[None, :, i, j, None, None]
        self.grads["weight"] = dw
        return dxp[:, :, ph[0]:ph[0] + h, pw[0]:pw[0] + wd]


class BatchNorm2d(Module):
    """Batch statistics in training mode, running averages otherwise.

    Running statistics follow ``running = momentum * running + (1 - momentum) * batch``
    with the unbiased batch variance.
    """

    def __init__(self, channels, momentum=0.9, eps=1e-3, dtype=np.float32):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.params["gamma"] = np.ones(channels, dtype=dtype)
        self.params["beta"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_mean"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_var"] = np.ones(channels, dtype=dtype)

    def forward(self, x, training=False):
        gamma, beta = self.params["gamma"], self.params["beta"]
        if training:
            n = x.shape[0] * x.shape[2] * x.shape[3]
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            m = self.momentum
            unbiased = var * (n / max(n - 1, 1))
            self.buffers["running_mean"][...] = m * self.buffers["running_mean"] + (1 - m) * mean
            self.buffers["running_var"][...] = m * self.buffers["running_var"] + (1 - m) * unbiased
        else:
            mean, var = self.buffers["running_mean"], self.buffers["running_var"]
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
        self._cache = (xhat, inv_std, training)
        return xhat * gamma[None, :, None, None] + beta[None, :, None, None]

    def backward(self, dy):
        xhat, inv_std, training = self._cached()
        gamma = self.params["gamma"]
        sum_dy = dy.sum(axis=(0, 2, 3))
        sum_dy_xhat = np.einsum("bchw,bchw->c", dy, xhat)
        self.grads["gamma"] = sum_dy_xhat
        self.grads["beta"] = sum_dy
        scale = (gamma * inv_std)[None, :, None, None]
        if not training:
            return dy * scale
        n = dy.shape[0] * dy.shape[2] * dy.shape[3]
        return scale * (dy - (sum_dy[None, :, None, None] + xhat * sum_dy_xhat[None, :, None, None]) / n)


class ReLU(Module):
    def forward(self, x, training=False):
        mask = x > 0
        self._cache = mask
        return x * mask

    def backward(self, dy):
        return dy * self._cached()


class MaxPool2d(Module):
    """k x k max pooling with 'same' padding."""

    def __init__(self, kernel=3, stride=2):
        super().__init__()
        self.kernel, self.stride = kernel, stride

    def forward(self, x, training=False):
        k, s = self.kernel, self.stride
        h, w = x.shape[2:]
        ph, pw = same_padding(h, k, s), same_padding(w, k, s)
        xp = np.pad(x, ((0, 0), (0, 0), ph, pw), constant_values=-np.inf)
        ho, wo = -(-h // s), -(-w // s)
        taps = np.stack(
            [xp[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] for i in range(k) for j in range(k)]
        )
        arg = taps.argmax(axis=0)
        out = np.take_along_axis(taps, arg[None], axis=0)[0]
        self._cache = (x.shape, xp.shape, ph, pw, arg)
        return out

    def backward(self, dy):
        xshape, pshape, ph, pw, arg = self._cached()
        k, s = self.kernel, self.stride
        ho, wo = dy.shape[2:]
        dxp = np.zeros(pshape, dtype=dy.dtype)
        for t in range(k * k):
            i, j = divmod(t, k)
            dxp[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += dy * (arg == t)
        h, w = xshape[2:]
        return dxp[:, :, ph[0]:ph[0] + h, pw[0]:pw[0] + w]


class GlobalAvgPool(Module):
    """Mean over frequency and time; (B, C, H, W) -> (B, C)."""

    def forward(self, x, training=False):
        self._cache = x.shape
        return x.mean(axis=(2, 3))

    def backward(self, dy):
        shape = self._cached()
        scale = 1.0 / (shape[2] * shape[3])
        return np.broadcast_to((dy * scale)[:, :, None, None], shape).copy()


class Linear(Module):
    """``y = x @ weight.T + bias`` with weight of shape (out, in)."""

    def __init__(self, fin, fout, rng=0, dtype=np.float32):
        super().__init__()
        limit = 1.0 / math.sqrt(fin)
        self.params["weight"] = as_rng(rng).uniform(-limit, limit, size=(fout, fin)).astype(dtype)
        self.params["bias"] = np.zeros(fout, dtype=dtype)

    def forward(self, x, training=False):
        self._cache = x
        return x @ self.params["weight"].T + self.params["bias"]

    def backward(self, dy):
        x = self._cached()
        self.grads["weight"] = dy.T @ x
        self.grads["bias"] = dy.sum(axis=0)
        return dy @ self.params["weight"]


class Sequential(Module):
    def __init__(self, *layers):
        super().__init__()
        self.children = list(layers)

    def forward(self, x, training=False):
        for _, layer in self.children:
            x = layer.forward(x, training)
        return x

    def backward(self, dy):
        for _, layer in reversed(self.children):
            dy = layer.backward(dy)
        return dy


class SeparableConv2d(Sequential):
    """Depthwise k x k followed by pointwise 1 x 1."""

    def __init__(self, cin, cout, kernel=3, rng=0, dtype=np.float32):
        rng = as_rng(rng)
        super().__init__(
            ("depthwise", DepthwiseConv2d(cin, kernel, rng=rng, dtype=dtype)),
            ("pointwise", Conv2d(cin, cout, 1, rng=rng, dtype=dtype)),
        )


class Residual(Module):
    """``main(x) + shortcut(x)``; the shortcut is the identity when omitted."""

    def __init__(self, main: Module, shortcut: Module | None = None):
        super().__init__()
        self.main, self.shortcut = main, shortcut
        self.children = [(name, m) for name, m in main.children]
        if shortcut is not None:
            self.children.append(("shortcut", shortcut))

    def forward(self, x, training=False):
        out = self.main.forward(x, training)
        skip = x if self.shortcut is None else self.shortcut.forward(x, training)
        if out.shape != skip.shape:
            raise ValueError(f"residual shape mismatch: {out.shape} vs {skip.shape}")
        return out + skip

    def backward(self, dy):
        dx = self.main.backward(dy)
        return dx + (dy if self.shortcut is None else self.shortcut.backward(dy))
