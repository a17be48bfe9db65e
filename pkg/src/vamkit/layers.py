"""Differentiable building blocks with explicit forward and backward passes.

Activations travel as float32 NCHW arrays (float64 inputs are preserved so a
verification probe can run the same path at full precision); matrix products
and reductions accumulate in float64 before casting back. Parameters are kept
rank-4 so they round-trip through the checkpoint blob format unchanged:

    conv2d   w: (c_out, c_in, k, k)    b: (1, c_out, 1, 1)
    dense    w: (1, out, 1, in)        b: (1, out, 1, 1)

Forward returns ``(y, cache)``; backward consumes exactly that cache once and
returns ``(dx, grads)`` where ``grads`` maps parameter names to arrays shaped
like the parameters. Everything here is deterministic; stochastic behaviour
lives in the gating module.
"""

from __future__ import annotations

import numpy as np

from .tensor import check_finite, check_nchw

L2NORM_EPS = 1e-12


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = float(np.sqrt(6.0 / (fan_in + fan_out)))
    return rng.uniform(-limit, limit, size=shape).astype(np.float32)


class Layer:
    """Base class: stateless apart from (optional) parameters."""

    kind = "layer"

    def params(self) -> dict[str, np.ndarray]:
        return {}

    def set_param(self, name: str, value: np.ndarray) -> None:
        current = self.params()
        if name not in current:
            raise ValueError(f"{self.kind} has no parameter {name!r}")
        if current[name].shape != value.shape:
            raise ValueError(
                f"{self.kind} parameter {name!r}: shape {value.shape} != {current[name].shape}"
            )
        current[name][...] = value

    def out_shape(self, in_shape: tuple[int, int, int, int]) -> tuple[int, int, int, int]:
        raise NotImplementedError

    def forward(self, x: np.ndarray):
        raise NotImplementedError

    def backward(self, cache, dy: np.ndarray):
        raise NotImplementedError


class Conv2d(Layer):
    """Cross-correlation with zero padding (no kernel flip), square kernel."""

    kind = "conv2d"

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3,
                 padding: int = 0, stride: int = 1, rng: np.random.Generator | None = None):
        if in_channels < 1 or out_channels < 1 or kernel_size < 1 or stride < 1 or padding < 0:
            raise ValueError("invalid conv2d hyperparameters")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.padding = padding
        self.stride = stride
        fan_in = in_channels * kernel_size * kernel_size
        fan_out = out_channels * kernel_size * kernel_size
        if rng is not None:
            self.w = glorot_uniform(rng, (out_channels, in_channels, kernel_size, kernel_size),
                                    fan_in, fan_out)
        else:
            self.w = np.zeros((out_channels, in_channels, kernel_size, kernel_size), np.float32)
        self.b = np.zeros((1, out_channels, 1, 1), np.float32)

    def params(self):
        return {"w": self.w, "b": self.b}

    def out_shape(self, in_shape):
        n, c, h, w = in_shape
        if c != self.in_channels:
            raise ValueError(f"conv2d expects {self.in_channels} input channels, got {c}")
        k, s, p = self.kernel_size, self.stride, self.padding
        ho = (h + 2 * p - k) // s + 1
        wo = (w + 2 * p - k) // s + 1
        if ho < 1 or wo < 1 or (h + 2 * p - k) % s or (w + 2 * p - k) % s:
            raise ValueError(f"conv2d kernel {k}/stride {s}/pad {p} does not tile input {h}x{w}")
        return (n, self.out_channels, ho, wo)

    def _im2col(self, xp: np.ndarray, ho: int, wo: int) -> np.ndarray:
        n, c, _, _ = xp.shape
        k, s = self.kernel_size, self.stride
        cols = np.empty((n, c, k, k, ho, wo), dtype=xp.dtype)
        for ki in range(k):
            for kj in range(k):
                cols[:, :, ki, kj] = xp[:, :, ki:ki + s * ho:s, kj:kj + s * wo:s]
        return cols.reshape(n, c * k * k, ho * wo)

    def forward(self, x):
        x = check_nchw(x, "conv2d input")
        n, c, h, w = x.shape
        _, co, ho, wo = self.out_shape(x.shape)
        p = self.padding
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        cols = self._im2col(xp, ho, wo)
        wmat = self.w.reshape(co, -1).astype(np.float64)
        y = np.matmul(wmat, cols.astype(np.float64))
        y = y.astype(x.dtype).reshape(n, co, ho, wo) + self.b
        check_finite(y, "conv2d output")
        return y, {"cols": cols, "x_shape": x.shape, "out_hw": (ho, wo)}

    def backward(self, cache, dy):
        n, c, h, w = cache["x_shape"]
        ho, wo = cache["out_hw"]
        co = self.out_channels
        if dy.shape != (n, co, ho, wo):
            raise ValueError(f"conv2d backward: dy shape {dy.shape} != {(n, co, ho, wo)}")
        k, s, p = self.kernel_size, self.stride, self.padding
        cols64 = cache["cols"].astype(np.float64)
        dy64 = dy.reshape(n, co, ho * wo).astype(np.float64)

        dw = np.matmul(dy64, cols64.transpose(0, 2, 1)).sum(axis=0)
        dw = dw.astype(np.float32).reshape(self.w.shape)
        db = dy64.sum(axis=(0, 2)).astype(np.float32).reshape(self.b.shape)

        wmat64 = self.w.reshape(co, -1).astype(np.float64)
        dcols = np.matmul(wmat64.T, dy64).reshape(n, c, k, k, ho, wo)
        dxp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=np.float64)
        for ki in range(k):
            for kj in range(k):
                dxp[:, :, ki:ki + s * ho:s, kj:kj + s * wo:s] += dcols[:, :, ki, kj]
        dx = dxp[:, :, p:p + h, p:p + w].astype(dy.dtype)
        return dx, {"w": dw, "b": db}


class ReLU(Layer):
    kind = "relu"

    def out_shape(self, in_shape):
        return in_shape

    def forward(self, x):
        x = check_nchw(x, "relu input")
        return np.maximum(x, np.float32(0)), {"active": x > 0}

    def backward(self, cache, dy):
        active = cache["active"]
        if dy.shape != active.shape:
            raise ValueError(f"relu backward: dy shape {dy.shape} != {active.shape}")
        return (dy * active).astype(dy.dtype), {}


class MaxPool2(Layer):
    """2x2 max pooling with stride 2; ties go to the first index in row-major order."""

    kind = "maxpool2"

    def out_shape(self, in_shape):
        n, c, h, w = in_shape
        if h % 2 or w % 2 or h < 2 or w < 2:
            raise ValueError(f"maxpool2 requires even spatial extents, got {h}x{w}")
        return (n, c, h // 2, w // 2)

    def forward(self, x):
        x = check_nchw(x, "maxpool2 input")
        n, c, ho, wo = self.out_shape(x.shape)
        blocks = (x.reshape(n, c, ho, 2, wo, 2)
                   .transpose(0, 1, 2, 4, 3, 5)
                   .reshape(n, c, ho, wo, 4))
        idx = blocks.argmax(axis=-1)
        y = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
        return np.ascontiguousarray(y), {"idx": idx, "in_shape": x.shape}

    def backward(self, cache, dy):
        n, c, h, w = cache["in_shape"]
        idx = cache["idx"]
        if dy.shape != idx.shape:
            raise ValueError(f"maxpool2 backward: dy shape {dy.shape} != {idx.shape}")
        spread = np.zeros(idx.shape + (4,), dtype=dy.dtype)
        np.put_along_axis(spread, idx[..., None], dy[..., None], axis=-1)
        dx = (spread.reshape(n, c, h // 2, w // 2, 2, 2)
                    .transpose(0, 1, 2, 4, 3, 5)
                    .reshape(n, c, h, w))
        return np.ascontiguousarray(dx), {}


class Dense(Layer):
    """Fully connected map over the flattened per-sample features."""

    kind = "dense"

    def __init__(self, in_features: int, out_features: int,
                 rng: np.random.Generator | None = None):
        if in_features < 1 or out_features < 1:
            raise ValueError("dense needs positive feature counts")
        self.in_features = in_features
        self.out_features = out_features
        if rng is not None:
            self.w = glorot_uniform(rng, (1, out_features, 1, in_features),
                                    in_features, out_features)
        else:
            self.w = np.zeros((1, out_features, 1, in_features), np.float32)
        self.b = np.zeros((1, out_features, 1, 1), np.float32)

    def params(self):
        return {"w": self.w, "b": self.b}

    def out_shape(self, in_shape):
        n, c, h, w = in_shape
        if c * h * w != self.in_features:
            raise ValueError(f"dense expects {self.in_features} features, got {c * h * w}")
        return (n, self.out_features, 1, 1)

    def forward(self, x):
        x = check_nchw(x, "dense input")
        self.out_shape(x.shape)
        n = x.shape[0]
        xf = x.reshape(n, self.in_features)
        wmat = self.w.reshape(self.out_features, self.in_features)
        y = np.matmul(xf.astype(np.float64), wmat.astype(np.float64).T)
        y = y.astype(x.dtype).reshape(n, self.out_features, 1, 1) + self.b
        check_finite(y, "dense output")
        return y, {"xf": xf, "in_shape": x.shape}

    def backward(self, cache, dy):
        n = cache["xf"].shape[0]
        if dy.shape != (n, self.out_features, 1, 1):
            raise ValueError(f"dense backward: dy shape {dy.shape} != {(n, self.out_features, 1, 1)}")
        dyf = dy.reshape(n, self.out_features).astype(np.float64)
        xf64 = cache["xf"].astype(np.float64)
        wmat64 = self.w.reshape(self.out_features, self.in_features).astype(np.float64)
        dw = np.matmul(dyf.T, xf64).astype(np.float32).reshape(self.w.shape)
        db = dyf.sum(axis=0).astype(np.float32).reshape(self.b.shape)
        dx = np.matmul(dyf, wmat64).astype(dy.dtype).reshape(cache["in_shape"])
        return dx, {"w": dw, "b": db}


class Sigmoid(Layer):
    kind = "sigmoid"

    def out_shape(self, in_shape):
        return in_shape

    def forward(self, x):
        x = check_nchw(x, "sigmoid input")
        # tanh form is overflow-free for any finite input
        y = (0.5 * (np.tanh(0.5 * x.astype(np.float64)) + 1.0)).astype(x.dtype)
        return y, {"y": y}

    def backward(self, cache, dy):
        y = cache["y"]
        if dy.shape != y.shape:
            raise ValueError(f"sigmoid backward: dy shape {dy.shape} != {y.shape}")
        return (dy * y * (np.float32(1) - y)).astype(dy.dtype), {}


class L2Norm(Layer):
    """Scale each sample's flattened vector to unit length (or by 1/eps below eps)."""

    kind = "l2norm"
    eps = L2NORM_EPS

    def out_shape(self, in_shape):
        return in_shape

    def forward(self, x):
        x = check_nchw(x, "l2norm input")
        n = x.shape[0]
        v = x.reshape(n, -1).astype(np.float64)
        norms = np.sqrt((v * v).sum(axis=1))
        scale = np.maximum(norms, self.eps)
        y64 = v / scale[:, None]
        y = y64.astype(x.dtype).reshape(x.shape)
        return y, {"y64": y64, "scale": scale, "active": norms > self.eps, "in_shape": x.shape}

    def backward(self, cache, dy):
        if dy.shape != cache["in_shape"]:
            raise ValueError(f"l2norm backward: dy shape {dy.shape} != {cache['in_shape']}")
        n = dy.shape[0]
        dyf = dy.reshape(n, -1).astype(np.float64)
        y64 = cache["y64"]
        scale = cache["scale"][:, None]
        dots = (y64 * dyf).sum(axis=1, keepdims=True)
        # below eps the denominator is the constant eps, so no projection term
        dxf = np.where(cache["active"][:, None], (dyf - y64 * dots) / scale, dyf / scale)
        return dxf.astype(dy.dtype).reshape(cache["in_shape"]), {}


LAYER_KINDS = {cls.kind: cls for cls in (Conv2d, ReLU, MaxPool2, Dense, Sigmoid, L2Norm)}


def run_stack(layers: list[Layer], x: np.ndarray):
    """Forward through a layer list, returning the output and per-layer caches."""
    caches = []
    for layer in layers:
        x, cache = layer.forward(x)
        caches.append(cache)
    return x, caches


def run_stack_backward(layers: list[Layer], caches: list, dy: np.ndarray):
    """Backward through a layer list; returns (dx, [per-layer grads dict])."""
    grads: list[dict[str, np.ndarray]] = [{} for _ in layers]
    for i in range(len(layers) - 1, -1, -1):
        dy, g = layers[i].backward(caches[i], dy)
        grads[i] = g
    return dy, grads
