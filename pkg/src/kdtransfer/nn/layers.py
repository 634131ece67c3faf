"""Layer vocabulary for the numpy engine.

Shapes are *declared* in ``(C, H, W)`` order, but activations travel between
layers as channels-last float32 arrays ``(B, H, W, C)``, which keeps the
im2col copies cache friendly. Feature vectors are ``(B, F)``. Layers compute in
the dtype of their inputs (float32 in normal use). Weights are
stored in the conventional layouts: conv ``(out, in, k, k)``, dense
``(out, in)``.

A layer holds hyperparameters only. ``forward(params, *xs)`` returns the
output and a cache; ``backward(params, cache, grad, need_params)`` returns the
list of input gradients and a dict of parameter gradients.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when a layer receives inputs it cannot consume."""


class Layer:
    kind = "layer"
    arity = 1

    def output_shape(self, *shapes):
        raise NotImplementedError

    def param_shapes(self):
        return {}

    def fan_in(self):
        return None

    def forward(self, params, *inputs):
        raise NotImplementedError

    def backward(self, params, cache, grad, need_params=True):
        raise NotImplementedError

    def describe(self):
        """Canonical ``key=value`` hyperparameter text."""
        return ""


def _pad_hw(x, pad):
    if not pad:
        return x
    b, h, w, c = x.shape
    out = np.zeros((b, h + 2 * pad, w + 2 * pad, c), dtype=x.dtype)
    out[:, pad:pad + h, pad:pad + w] = x
    return out


class Conv2d(Layer):
    kind = "conv2d"

    def __init__(self, in_ch, out_ch, kernel, stride=1, padding=0):
        self.in_ch, self.out_ch = int(in_ch), int(out_ch)
        self.kernel, self.stride, self.padding = int(kernel), int(stride), int(padding)

    def output_shape(self, shape):
        if len(shape) != 3:
            raise ShapeError(f"expected (C, H, W), got {tuple(shape)}")
        c, h, w = shape
        if c != self.in_ch:
            raise ShapeError(f"expected {self.in_ch} input channels, got {c}")
        ho = (h + 2 * self.padding - self.kernel) // self.stride + 1
        wo = (w + 2 * self.padding - self.kernel) // self.stride + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"spatial size {h}x{w} too small for kernel {self.kernel}")
        return (self.out_ch, ho, wo)

    def param_shapes(self):
        return {
            "weight": (self.out_ch, self.in_ch, self.kernel, self.kernel),
            "bias": (self.out_ch,),
        }

    def fan_in(self):
        return self.in_ch * self.kernel * self.kernel

    def _wmat(self, weight):
        # (out, k, k, in) rows match the im2col column order
        return weight.transpose(0, 2, 3, 1).reshape(self.out_ch, -1)

    def forward(self, params, x):
        k, s = self.kernel, self.stride
        b = x.shape[0]
        xp = _pad_hw(x, self.padding)
        if k == 1 and s == 1:
            ho, wo = xp.shape[1], xp.shape[2]
            cols = xp.reshape(-1, self.in_ch)
        else:
            win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::s, ::s]
            ho, wo = win.shape[1], win.shape[2]
            cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(b * ho * wo, k * k * self.in_ch)
        out = cols @ self._wmat(params["weight"]).T
        out += params["bias"]
        return out.reshape(b, ho, wo, self.out_ch), (cols, ho, wo, xp.shape)

    def backward(self, params, cache, grad, need_params=True):
        cols, ho, wo, padded = cache
        b, hp, wp, c = padded
        k, s, p = self.kernel, self.stride, self.padding
        gmat = grad.reshape(-1, self.out_ch)
        pgrads = {}
        if need_params:
            dw = (gmat.T @ cols).reshape(self.out_ch, k, k, c)
            pgrads["weight"] = np.ascontiguousarray(dw.transpose(0, 3, 1, 2))
            pgrads["bias"] = gmat.sum(axis=0)
        dcols = gmat @ self._wmat(params["weight"])
        if k == 1 and s == 1:
            dx = dcols.reshape(padded)
        else:
            dcols = dcols.reshape(b, ho, wo, k, k, c)
            dx = np.zeros(padded, dtype=dcols.dtype)
            for i in range(k):
                for j in range(k):
                    dx[:, i:i + s * ho:s, j:j + s * wo:s] += dcols[:, :, :, i, j]
        if p:
            dx = dx[:, p:hp - p, p:wp - p]
        return [dx], pgrads

    def describe(self):
        return (f"in={self.in_ch} out={self.out_ch} k={self.kernel} "
                f"s={self.stride} p={self.padding}")


class Dense(Layer):
    kind = "dense"

    def __init__(self, in_features, out_features):
        self.in_features, self.out_features = int(in_features), int(out_features)

    def output_shape(self, shape):
        if tuple(shape) != (self.in_features,):
            raise ShapeError(f"expected ({self.in_features},) features, got {tuple(shape)}")
        return (self.out_features,)

    def param_shapes(self):
        return {"weight": (self.out_features, self.in_features), "bias": (self.out_features,)}

    def fan_in(self):
        return self.in_features

    def forward(self, params, x):
        return x @ params["weight"].T + params["bias"], x

    def backward(self, params, cache, grad, need_params=True):
        pgrads = {}
        if need_params:
            pgrads["weight"] = grad.T @ cache
            pgrads["bias"] = grad.sum(axis=0)
        return [grad @ params["weight"]], pgrads

    def describe(self):
        return f"in={self.in_features} out={self.out_features}"


class ReLU(Layer):
    kind = "relu"

    def output_shape(self, shape):
        return tuple(shape)

    def forward(self, params, x):
        return np.maximum(x, 0), x > 0

    def backward(self, params, cache, grad, need_params=True):
        return [grad * cache], {}


class MaxPool2d(Layer):
    """Max pooling without padding; ties resolve to the first window element."""

    kind = "max-pool2d"

    def __init__(self, kernel=2, stride=None):
        self.kernel = int(kernel)
        self.stride = int(stride if stride is not None else kernel)

    def output_shape(self, shape):
        if len(shape) != 3:
            raise ShapeError(f"expected (C, H, W), got {tuple(shape)}")
        c, h, w = shape
        ho = (h - self.kernel) // self.stride + 1
        wo = (w - self.kernel) // self.stride + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"spatial size {h}x{w} too small for pool {self.kernel}")
        return (c, ho, wo)

    def _offsets(self):
        return [(i, j) for i in range(self.kernel) for j in range(self.kernel)]

    def _slice(self, x, i, j, ho, wo):
        s = self.stride
        return x[:, i:i + s * ho:s, j:j + s * wo:s]

    def forward(self, params, x):
        _, h, w, _ = x.shape
        ho = (h - self.kernel) // self.stride + 1
        wo = (w - self.kernel) // self.stride + 1
        out = None
        for i, j in self._offsets():
            part = self._slice(x, i, j, ho, wo)
            out = part.copy() if out is None else np.maximum(out, part, out=out)
        return out, (x, out)

    def backward(self, params, cache, grad, need_params=True):
        x, out = cache
        ho, wo = out.shape[1], out.shape[2]
        dx = np.zeros(x.shape, dtype=grad.dtype)
        taken = np.zeros(out.shape, dtype=bool)
        for i, j in self._offsets():
            hit = (self._slice(x, i, j, ho, wo) == out) & ~taken
            taken |= hit
            self._slice(dx, i, j, ho, wo)[...] += grad * hit
        return [dx], {}

    def describe(self):
        return f"k={self.kernel} s={self.stride}"


class GlobalAvgPool(Layer):
    kind = "global-avg-pool"

    def output_shape(self, shape):
        if len(shape) != 3:
            raise ShapeError(f"expected (C, H, W), got {tuple(shape)}")
        return (shape[0],)

    def forward(self, params, x):
        return x.mean(axis=(1, 2), dtype=x.dtype), x.shape

    def backward(self, params, cache, grad, need_params=True):
        b, h, w, c = cache
        dx = np.empty(cache, dtype=grad.dtype)
        dx[...] = (grad / (h * w))[:, None, None, :]
        return [dx], {}


class Flatten(Layer):
    """Flattens in (C, H, W) order regardless of the internal layout."""

    kind = "flatten"

    def output_shape(self, shape):
        return (int(np.prod(shape)),)

    def forward(self, params, x):
        if x.ndim == 4:
            return x.transpose(0, 3, 1, 2).reshape(x.shape[0], -1), x.shape
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, params, cache, grad, need_params=True):
        if len(cache) == 4:
            b, h, w, c = cache
            return [np.ascontiguousarray(grad.reshape(b, c, h, w).transpose(0, 2, 3, 1))], {}
        return [grad.reshape(cache)], {}


class AddSkip(Layer):
    kind = "add-skip"
    arity = 2

    def output_shape(self, a, b):
        if tuple(a) != tuple(b):
            raise ShapeError(f"add-skip operands differ: {tuple(a)} vs {tuple(b)}")
        return tuple(a)

    def forward(self, params, a, b):
        return a + b, None

    def backward(self, params, cache, grad, need_params=True):
        return [grad, grad], {}


class ConcatBranch(Layer):
    """Channel concatenation of two or more branches."""

    kind = "concat-branch"
    arity = -1

    def output_shape(self, *shapes):
        if len(shapes) < 2:
            raise ShapeError("concat-branch needs at least two inputs")
        rest = {tuple(s[1:]) for s in shapes}
        if len(rest) != 1:
            raise ShapeError(f"concat-branch non-channel dims differ: {[tuple(s) for s in shapes]}")
        return (sum(s[0] for s in shapes),) + tuple(shapes[0][1:])

    def forward(self, params, *xs):
        return np.concatenate(xs, axis=-1), [x.shape[-1] for x in xs]

    def backward(self, params, cache, grad, need_params=True):
        cuts = np.cumsum(cache)[:-1]
        return [np.ascontiguousarray(g) for g in np.split(grad, cuts, axis=-1)], {}


LAYER_KINDS = {
    cls.kind: cls
    for cls in (Conv2d, Dense, ReLU, MaxPool2d, GlobalAvgPool, Flatten, AddSkip, ConcatBranch)
}


def layer_from_text(kind, text):
    """Rebuild a layer from ``kind`` and its :meth:`Layer.describe` output."""
    cls = LAYER_KINDS[kind]
    kw = dict(item.split("=") for item in text.split()) if text else {}
    if cls is Conv2d:
        return Conv2d(kw["in"], kw["out"], kw["k"], kw["s"], kw["p"])
    if cls is Dense:
        return Dense(kw["in"], kw["out"])
    if cls is MaxPool2d:
        return MaxPool2d(kw["k"], kw["s"])
    return cls()
