import numpy as np
import pytest

from kdl.kernels import KernelSpec, polynomial
from kdl.model import HeadConfig, ModelConfig


def triple_loop_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    c = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for t in range(k):
                acc += a[i, t] * b[t, j]
            c[i, j] = acc
    return c


def direct_conv(x, W, b, stride, pad):
    B, C, H, Wd = x.shape
    O, _, kh, kw = W.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = (H + 2 * pad - kh) // stride + 1
    ow = (Wd + 2 * pad - kw) // stride + 1
    out = np.zeros((B, O, oh, ow))
    for n in range(B):
        for o in range(O):
            for i in range(oh):
                for j in range(ow):
                    acc = b[o]
                    for c in range(C):
                        for p in range(kh):
                            for q in range(kw):
                                acc += xp[n, c, i * stride + p, j * stride + q] * W[o, c, p, q]
                    out[n, o, i, j] = acc
    return out


def central_diff(f, x, eps=1e-6):
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp.flat[i] += eps
        xm.flat[i] -= eps
        g.flat[i] = (f(xp) - f(xm)) / (2 * eps)
    return g


def head_config(head_type="kdl", n=1, classes=3, hidden=128, seed=0):
    kernel = KernelSpec("linear") if head_type == "fc" else polynomial(n)
    return ModelConfig(input_shape=(2, 1, 1), conv_channels=(), dropout_rates=(),
                       head=HeadConfig(head_type, kernel, hidden, classes), seed=seed)


def small_cnn_config(head_type="kdl", n=3, classes=7, seed=0, dropout=0.25):
    kernel = KernelSpec("linear") if head_type == "fc" else polynomial(n)
    return ModelConfig(input_shape=(1, 32, 32), conv_channels=(4, 4, 8, 8, 8),
                       dropout_rates=(dropout,) * 5,
                       head=HeadConfig(head_type, kernel, 16, classes), seed=seed)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split('] ')[1].split('.')[0])):
            terminalreporter.write_line(line)
