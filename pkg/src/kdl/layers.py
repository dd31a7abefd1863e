"""Layers with explicit forward/backward passes.

Each layer keeps named parameter arrays in ``params`` (and non-trainable state
in ``buffers``). ``forward(x, training=True)`` stores whatever ``backward``
needs in ``cache``; an inference forward clears it, so backward after an
inference pass is a ``StateError``.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .core import RngStream, check_finite, col2im, conv_output_size, im2col
from .errors import DimensionError, NumericOverflowError, ParameterError, StateError
from .kernels import KernelSpec, kernel_matrix, kernel_matrix_backward


@dataclass
class GradBundle:
    d_input: np.ndarray
    d_params: dict = field(default_factory=dict)


class Layer:
    kind = "layer"
    # parameters that receive weight decay / are projected onto b >= 0
    decayed: tuple = ()
    nonneg: tuple = ()

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.cache = None
        self.mode = "inference"

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        out, cache = self._forward(x, training)
        check_finite(out, f"{self.kind} output")
        self.mode = "training" if training else "inference"
        self.cache = cache if training else None
        return out

    def backward(self, d_out: np.ndarray) -> GradBundle:
        if self.cache is None:
            raise StateError(f"{self.kind}.backward called without a training-mode forward")
        d_in, d_params = self._backward(d_out, self.cache)
        check_finite(d_in, f"{self.kind} input gradient")
        for name, g in d_params.items():
            check_finite(g, f"{self.kind} gradient of {name}")
        return GradBundle(d_in, d_params)

    def _forward(self, x, training):
        raise NotImplementedError

    def _backward(self, d_out, cache):
        raise NotImplementedError

    def __repr__(self):
        shapes = ", ".join(f"{k}={v.shape}" for k, v in self.params.items())
        return f"{type(self).__name__}({shapes})"


class Dense(Layer):
    kind = "dense"
    decayed = ("W",)

    def __init__(self, W, b, activation=False):
        super().__init__()
        self.params = {"W": W, "b": b}
        self.activation = activation

    def _forward(self, x, training):
        W, b = self.params["W"], self.params["b"]
        if x.ndim != 2 or x.shape[1] != W.shape[1]:
            raise DimensionError(f"dense layer expects input (B, {W.shape[1]}), got {x.shape}")
        s = x @ W.T + b
        out = np.maximum(s, 0) if self.activation else s
        return out, (x, s)

    def _backward(self, d_out, cache):
        x, s = cache
        g = np.where(s > 0, d_out, 0) if self.activation else d_out
        W = self.params["W"]
        return g @ W, {"W": g.T @ x, "b": g.sum(axis=0)}


class KernelDense(Layer):
    """Kernelized dense layer: unit u outputs K(x, W[u], b[u]).

    ReLU is only allowed on degree-1 kernels; higher-degree and exponential
    kernels are already non-linear.
    """

    kind = "kdl"
    decayed = ("W",)
    nonneg = ("b",)

    def __init__(self, spec: KernelSpec, W, b, activation=False):
        super().__init__()
        if activation and spec.degree != 1:
            raise ParameterError(f"no activation may follow a {spec} kernel layer")
        if spec.uses_bias and np.any(b < 0):
            raise ParameterError("kernel layer biases must be >= 0")
        self.spec = spec
        self.params = {"W": W, "b": b}
        self.activation = activation

    def _forward(self, x, training):
        W, b = self.params["W"], self.params["b"]
        K, aux = kernel_matrix(self.spec, x, W, b)
        out = np.maximum(K, 0) if self.activation else K
        return out, (x, K, aux)

    def _backward(self, d_out, cache):
        x, K, aux = cache
        g = np.where(K > 0, d_out, 0) if self.activation else d_out
        dx, dW, db = kernel_matrix_backward(self.spec, x, self.params["W"], K, aux, g)
        return dx, {"W": dW, "b": db}

    def __repr__(self):
        return f"KernelDense({self.spec}, W={self.params['W'].shape}, relu={self.activation})"


class Conv2D(Layer):
    kind = "conv2d"

    def __init__(self, W, b, stride=1, pad=0):
        super().__init__()
        self.params = {"W": W, "b": b}
        self.stride = stride
        self.pad = pad

    def _forward(self, x, training):
        W, b = self.params["W"], self.params["b"]
        o, c, kh, kw = W.shape
        if x.ndim != 4 or x.shape[1] != c:
            raise DimensionError(f"conv2d expects input (B, {c}, H, W), got {x.shape}")
        B, _, h, w = x.shape
        oh = conv_output_size(h, kh, self.stride, self.pad)
        ow = conv_output_size(w, kw, self.stride, self.pad)
        cols = im2col(x, (kh, kw), self.stride, self.pad)
        out = W.reshape(o, -1) @ cols + b[:, None]
        out = out.reshape(o, B, oh, ow).transpose(1, 0, 2, 3)
        return np.ascontiguousarray(out), (x.shape, cols)

    def _backward(self, d_out, cache):
        x_shape, cols = cache
        W = self.params["W"]
        o, _, kh, kw = W.shape
        g = d_out.transpose(1, 0, 2, 3).reshape(o, -1)
        dW = (g @ cols.T).reshape(W.shape)
        dcols = W.reshape(o, -1).T @ g
        dx = col2im(dcols, x_shape, (kh, kw), self.stride, self.pad)
        return dx, {"W": dW, "b": g.sum(axis=1)}


class BatchNorm(Layer):
    """Per-channel batch normalization over (B,) or (B, H, W)."""

    kind = "batchnorm"

    def __init__(self, channels, dtype=np.float32, momentum=0.9, eps=1e-5):
        super().__init__()
        self.params = {"gamma": np.ones(channels, dtype), "beta": np.zeros(channels, dtype)}
        self.buffers = {
            "running_mean": np.zeros(channels, dtype),
            "running_var": np.ones(channels, dtype),
        }
        self.momentum = momentum
        self.eps = eps

    def _axes(self, x):
        c = self.params["gamma"].shape[0]
        if x.ndim not in (2, 4) or x.shape[1] != c:
            raise DimensionError(f"batchnorm expects (B, {c}[, H, W]) input, got {x.shape}")
        axes = (0,) if x.ndim == 2 else (0, 2, 3)
        shape = (1, c) if x.ndim == 2 else (1, c, 1, 1)
        return axes, shape

    def _forward(self, x, training):
        axes, shape = self._axes(x)
        gamma = self.params["gamma"].reshape(shape)
        beta = self.params["beta"].reshape(shape)
        if not training:
            mean = self.buffers["running_mean"].reshape(shape)
            var = self.buffers["running_var"].reshape(shape)
            return (x - mean) / np.sqrt(var + self.eps) * gamma + beta, None
        mean = x.mean(axis=axes, keepdims=True)
        var = x.var(axis=axes, keepdims=True)
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean) * inv
        m = self.momentum
        rm, rv = self.buffers["running_mean"], self.buffers["running_var"]
        rm[...] = m * rm + (1 - m) * mean.reshape(-1)
        rv[...] = m * rv + (1 - m) * var.reshape(-1)
        return xhat * gamma + beta, (xhat, inv, axes, shape)

    def _backward(self, d_out, cache):
        xhat, inv, axes, shape = cache
        count = xhat.size // xhat.shape[1]
        dxhat = d_out * self.params["gamma"].reshape(shape)
        dx = inv / count * (
            count * dxhat
            - dxhat.sum(axis=axes, keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)
        )
        return dx, {"gamma": (d_out * xhat).sum(axis=axes), "beta": d_out.sum(axis=axes)}


class ReLU(Layer):
    kind = "relu"

    def _forward(self, x, training):
        return np.maximum(x, 0), x > 0

    def _backward(self, d_out, mask):
        return np.where(mask, d_out, 0), {}


class MaxPool(Layer):
    """Non-overlapping max pooling (stride == size); odd edges are dropped."""

    kind = "maxpool"

    def __init__(self, size=2):
        super().__init__()
        if size < 1:
            raise ParameterError(f"pool size must be >= 1, got {size}")
        self.size = size

    def _forward(self, x, training):
        if x.ndim != 4:
            raise DimensionError(f"maxpool expects (B, C, H, W), got {x.shape}")
        k = self.size
        B, C, h, w = x.shape
        oh, ow = h // k, w // k
        if oh < 1 or ow < 1:
            raise DimensionError(f"maxpool {k}x{k} does not fit input {h}x{w}")
        win = x[:, :, :oh * k, :ow * k].reshape(B, C, oh, k, ow, k)
        win = win.transpose(0, 1, 2, 4, 3, 5).reshape(B, C, oh, ow, k * k)
        arg = win.argmax(axis=-1)
        out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
        return out, (x.shape, arg)

    def _backward(self, d_out, cache):
        (B, C, h, w), arg = cache
        k = self.size
        oh, ow = arg.shape[2:]
        dwin = np.zeros((B, C, oh, ow, k * k), dtype=d_out.dtype)
        np.put_along_axis(dwin, arg[..., None], d_out[..., None], axis=-1)
        dwin = dwin.reshape(B, C, oh, ow, k, k).transpose(0, 1, 2, 4, 3, 5)
        dx = np.zeros((B, C, h, w), dtype=d_out.dtype)
        dx[:, :, :oh * k, :ow * k] = dwin.reshape(B, C, oh * k, ow * k)
        return dx, {}


class Dropout(Layer):
    kind = "dropout"

    def __init__(self, p=0.25, rng: RngStream | None = None):
        super().__init__()
        if not 0 <= p < 1:
            raise ParameterError(f"dropout rate must be in [0, 1), got {p}")
        self.p = p
        self.rng = rng if rng is not None else RngStream(0)

    def _forward(self, x, training):
        if not training or self.p == 0:
            return x, np.ones((), dtype=x.dtype)
        keep = self.rng.random(x.shape) >= self.p
        mask = keep.astype(x.dtype) / x.dtype.type(1 - self.p)
        return x * mask, mask

    def _backward(self, d_out, mask):
        return d_out * mask, {}


class Softmax(Layer):
    kind = "softmax"

    def _forward(self, x, training):
        if x.ndim != 2:
            raise DimensionError(f"softmax expects (B, C), got {x.shape}")
        e = np.exp(x - x.max(axis=1, keepdims=True))
        p = e / e.sum(axis=1, keepdims=True)
        return p, p

    def _backward(self, d_out, p):
        return p * (d_out - (d_out * p).sum(axis=1, keepdims=True)), {}


class Flatten(Layer):
    kind = "flatten"

    def _forward(self, x, training):
        return x.reshape(x.shape[0], -1), x.shape

    def _backward(self, d_out, shape):
        return d_out.reshape(shape), {}


@dataclass
class CheckReport:
    """Max errors per gradient ("input" plus each parameter name)."""

    max_rel: dict
    max_abs: dict
    rtol: float = 1e-5
    atol: float = 1e-8
    passed: bool = True

    def lines(self):
        for name in self.max_rel:
            ok = self.max_rel[name] <= self.rtol
            yield f"{name:>8s}  rel={self.max_rel[name]:.3e}  abs={self.max_abs[name]:.3e}  {'ok' if ok else 'FAIL'}"


def _numeric_grad(f, arr, eps):
    g = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        gf[i] = (fp - fm) / (2 * eps)
    return g


def _compare(analytic, numeric, atol):
    err = np.abs(analytic - numeric)
    bad = err > atol
    if not bad.any():
        return 0.0, float(err.max(initial=0.0))
    rel = err[bad] / np.maximum(np.abs(numeric[bad]), 1e-300)
    return float(rel.max()), float(err.max())


def grad_check(layer: Layer, x: np.ndarray, eps: float = 1e-5, seed: int = 0,
               rtol: float = 1e-5, atol: float = 1e-8, fault: dict | None = None) -> CheckReport:
    """Compare analytic gradients against central differences.

    The scalar loss is ``sum(out * R)`` with a fixed random ``R``; a plain sum
    would make softmax and batchnorm gradients vanish identically. ``fault``
    maps a parameter name to a factor applied to its analytic gradient
    (for testing the checker itself).
    """
    if not 1e-7 <= eps <= 1e-4:
        raise ParameterError(f"eps must lie in [1e-7, 1e-4], got {eps}")
    if x.dtype != np.float64 or any(p.dtype != np.float64 for p in layer.params.values()):
        raise ParameterError("grad_check needs float64 inputs and parameters")
    base = copy.deepcopy(layer)
    probe = copy.deepcopy(base)
    out = probe.forward(x, training=True)
    R = RngStream(seed).gen.standard_normal(out.shape)
    bundle = probe.backward(R)

    analytic = {"input": bundle.d_input}
    for name, g in bundle.d_params.items():
        analytic[name] = g * (fault or {}).get(name, 1.0)

    xw = x.copy()

    def loss_input():
        return float(np.sum(copy.deepcopy(base).forward(xw, training=True) * R))

    numeric = {"input": _numeric_grad(loss_input, xw, eps)}
    for name in base.params:
        trial = copy.deepcopy(base)
        target = trial.params[name]

        def loss_param(trial=trial):
            saved = copy.deepcopy(trial.buffers), copy.deepcopy(getattr(trial, "rng", None))
            val = float(np.sum(trial.forward(x, training=True) * R))
            trial.buffers = saved[0]
            if saved[1] is not None:
                trial.rng = saved[1]
            return val

        numeric[name] = _numeric_grad(loss_param, target, eps)

    report = CheckReport({}, {}, rtol, atol)
    for name, a in analytic.items():
        if a.shape != numeric[name].shape:
            raise NumericOverflowError(f"gradient shape mismatch for {name}")
        report.max_rel[name], report.max_abs[name] = _compare(a, numeric[name], atol)
    report.passed = all(v <= rtol for v in report.max_rel.values())
    return report
