"""Kernel functions K(x, w) for kernelized dense layers, with analytic gradients.

Two entry points per direction: ``kernel_eval``/``kernel_grad`` work on a
single pair of vectors, ``kernel_matrix``/``kernel_matrix_backward`` work on
a batch of inputs against every unit's weight row at once.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from .errors import DimensionError, KernelOverflowError, NumericOverflowError, ParameterError

KINDS = ("linear", "polynomial", "gaussian", "laplacian", "abel")
BIASED = ("linear", "polynomial")


@dataclass(frozen=True)
class KernelSpec:
    kind: str = "linear"
    n: Optional[int] = None
    sigma: Optional[float] = None
    alpha: Optional[float] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ParameterError(f"unknown kernel kind {self.kind!r}; expected one of {KINDS}")
        if self.kind == "polynomial":
            if self.n is None or int(self.n) != self.n or self.n < 1:
                raise ParameterError(f"polynomial kernel needs integer degree n >= 1, got {self.n}")
        if self.kind == "gaussian" and not (self.sigma is not None and self.sigma > 0):
            raise ParameterError(f"gaussian kernel needs sigma > 0, got {self.sigma}")
        if self.kind in ("laplacian", "abel") and not (self.alpha is not None and self.alpha > 0):
            raise ParameterError(f"{self.kind} kernel needs alpha > 0, got {self.alpha}")

    @property
    def degree(self) -> Optional[int]:
        """Polynomial degree, 1 for linear, None for the exponential kernels."""
        if self.kind == "linear":
            return 1
        if self.kind == "polynomial":
            return int(self.n)
        return None

    @property
    def uses_bias(self) -> bool:
        return self.kind in BIASED

    def to_json(self) -> dict:
        out = {"kind": self.kind}
        if self.kind == "polynomial":
            out["n"] = int(self.n)
        if self.kind == "gaussian":
            out["sigma"] = float(self.sigma)
        if self.kind in ("laplacian", "abel"):
            out["alpha"] = float(self.alpha)
        return out

    @classmethod
    def from_json(cls, d: dict) -> "KernelSpec":
        if not isinstance(d, dict) or "kind" not in d:
            raise ParameterError(f"kernel spec must be an object with a 'kind', got {d!r}")
        extra = set(d) - {"kind", "n", "sigma", "alpha"}
        if extra:
            raise ParameterError(f"unknown kernel spec keys {sorted(extra)}")
        return cls(kind=d["kind"], n=d.get("n"), sigma=d.get("sigma"), alpha=d.get("alpha"))

    def __str__(self):
        if self.kind == "polynomial":
            return f"polynomial(n={self.n})"
        if self.kind == "gaussian":
            return f"gaussian(sigma={self.sigma})"
        if self.kind in ("laplacian", "abel"):
            return f"{self.kind}(alpha={self.alpha})"
        return "linear"


def polynomial(n: int) -> KernelSpec:
    return KernelSpec("polynomial", n=n)


class KernelGrad(NamedTuple):
    d_x: np.ndarray
    d_w: np.ndarray
    d_b: float


def _check_pair(spec: KernelSpec, x, w, b):
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if x.ndim != 1 or x.shape != w.shape or x.size < 1:
        raise DimensionError(f"kernel inputs must be equal-length vectors, got {x.shape} and {w.shape}")
    if spec.uses_bias and b < 0:
        raise ParameterError(f"{spec.kind} kernel needs bias b >= 0, got {b}")
    return x, w


def _power_limit(n: int, dtype) -> float:
    return float(np.finfo(dtype).max) ** (1.0 / n)


def _check_power(spec: KernelSpec, s, dtype):
    n = spec.degree
    mag = np.abs(s)
    worst = float(np.max(mag)) if np.size(mag) else 0.0
    if not np.isfinite(worst) or worst >= _power_limit(n, dtype):
        idx = np.unravel_index(int(np.argmax(mag)), np.shape(mag)) if np.ndim(mag) == 2 else (None, None)
        raise KernelOverflowError(spec.kind, n, worst, *idx)


def kernel_eval(spec: KernelSpec, x, w, b: float = 0.0) -> float:
    x, w = _check_pair(spec, x, w, b)
    if spec.uses_bias:
        s = float(np.dot(x, w) + b)
        _check_power(spec, s, np.float64)
        return s ** spec.degree
    d = x - w
    if spec.kind == "gaussian":
        return float(np.exp(-np.dot(d, d) / (2.0 * spec.sigma**2)))
    if spec.kind == "laplacian":
        return float(np.exp(-spec.alpha * np.sqrt(np.dot(d, d))))
    return float(np.exp(-spec.alpha * np.sum(np.abs(d))))


def kernel_grad(spec: KernelSpec, x, w, b: float = 0.0) -> KernelGrad:
    """Gradient of K(x, w) in x, w and b. Norm kinks take subgradient 0."""
    x, w = _check_pair(spec, x, w, b)
    if spec.uses_bias:
        n = spec.degree
        s = float(np.dot(x, w) + b)
        _check_power(spec, s, np.float64)
        c = n * s ** (n - 1)
        return KernelGrad(c * w, c * x, c)
    d = x - w
    k = kernel_eval(spec, x, w, b)
    if spec.kind == "gaussian":
        gx = -d / spec.sigma**2 * k
    elif spec.kind == "laplacian":
        r = np.sqrt(np.dot(d, d))
        gx = np.zeros_like(d) if r == 0 else -spec.alpha * k * d / r
    else:
        gx = -spec.alpha * k * np.sign(d)
    return KernelGrad(gx, -gx, 0.0)


def kernel_matrix(spec: KernelSpec, X: np.ndarray, W: np.ndarray, b: np.ndarray):
    """Evaluate K(X[i], W[u], b[u]) for every row pair.

    Returns ``(K, aux)``; ``aux`` is the pre-power ``s`` matrix for the
    polynomial family and the pairwise differences/distances otherwise.
    """
    if X.ndim != 2 or W.ndim != 2 or X.shape[1] != W.shape[1]:
        raise DimensionError(f"kernel layer expects input (B, {W.shape[1]}), got {X.shape}")
    if spec.uses_bias:
        S = X @ W.T + b
        _check_power(spec, S, X.dtype)
        n = spec.degree
        return (S if n == 1 else S**n), S
    diff = X[:, None, :] - W[None, :, :]
    if spec.kind == "gaussian":
        sq = np.einsum("bud,bud->bu", diff, diff)
        K = np.exp(-sq / (2.0 * spec.sigma**2))
        return K, diff
    if spec.kind == "laplacian":
        r = np.sqrt(np.einsum("bud,bud->bu", diff, diff))
        return np.exp(-spec.alpha * r), (diff, r)
    return np.exp(-spec.alpha * np.abs(diff).sum(axis=2)), diff


def kernel_matrix_backward(spec, X, W, K, aux, G):
    """Backpropagate ``G = dL/dK`` to (dX, dW, db)."""
    if spec.uses_bias:
        n = spec.degree
        S = aux
        coef = G if n == 1 else G * (n * S ** (n - 1))
        if not np.isfinite(coef).all():
            raise NumericOverflowError(f"{spec} backward produced non-finite values")
        return coef @ W, coef.T @ X, coef.sum(axis=0)
    if spec.kind == "abel":
        c = spec.alpha * G * K
        sgn = np.sign(aux)
        dX = -np.einsum("bu,bud->bd", c, sgn)
        dW = np.einsum("bu,bud->ud", c, sgn)
    else:
        if spec.kind == "gaussian":
            c = G * K / spec.sigma**2
        else:
            r = aux[1]
            safe = np.where(r > 0, r, 1.0)
            c = np.where(r > 0, spec.alpha * G * K / safe, 0.0)
        # sum_u c[b,u] (x_b - w_u) == c.sum(1) x_b - c @ W
        dX = -(c.sum(axis=1)[:, None] * X - c @ W)
        dW = c.T @ X - c.sum(axis=0)[:, None] * W
    return dX, dW, np.zeros(W.shape[0], dtype=X.dtype)
