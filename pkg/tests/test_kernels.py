import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import central_diff
from kdl.errors import DimensionError, KernelOverflowError, ParameterError
from kdl.kernels import KernelSpec, kernel_eval, kernel_grad, kernel_matrix, polynomial

ALL_SPECS = [
    KernelSpec("linear"),
    polynomial(1),
    polynomial(2),
    polynomial(3),
    KernelSpec("gaussian", sigma=1.3),
    KernelSpec("laplacian", alpha=0.7),
    KernelSpec("abel", alpha=0.4),
]


def loop_dot(x, w):
    acc = 0.0
    for a, b in zip(x, w):
        acc += a * b
    return acc


def test_eval_examples():
    x, w = [1.0, 2, 3], [1.0, 0, -1]
    assert kernel_eval(KernelSpec("linear"), x, w, 0.5) == loop_dot(x, w) + 0.5 == -1.5
    assert kernel_eval(polynomial(2), [0.0, 0.0], [3.0, -1.0], 0.0) == 0
    assert kernel_eval(polynomial(3), [1.0, 1.0], [1.0, 1.0], 0.0) == 8
    v = [0.3, -2.0, 5.0]
    assert kernel_eval(KernelSpec("gaussian", sigma=0.2), v, v) == 1
    assert kernel_eval(KernelSpec("laplacian", alpha=1.0), v, v) == 1


def test_spec_validation():
    with pytest.raises(ParameterError):
        polynomial(0)
    with pytest.raises(ParameterError):
        KernelSpec("gaussian", sigma=0)
    with pytest.raises(ParameterError):
        KernelSpec("abel", alpha=-1)
    with pytest.raises(ParameterError):
        KernelSpec("rbf")


def test_eval_errors():
    with pytest.raises(DimensionError):
        kernel_eval(KernelSpec("linear"), [1.0, 2.0], [1.0])
    with pytest.raises(ParameterError):
        kernel_eval(polynomial(2), [1.0], [1.0], -0.1)
    # negative bias is irrelevant for kernels that ignore it
    assert kernel_eval(KernelSpec("abel", alpha=1.0), [1.0], [1.0], -3.0) == 1


def test_overflow_reports_kind_degree_and_magnitude():
    with pytest.raises(KernelOverflowError) as info:
        kernel_eval(polynomial(3), [1e110], [1e110], 0.0)
    assert info.value.kind == "polynomial" and info.value.degree == 3
    assert info.value.magnitude == pytest.approx(1e220)


def test_grad_examples():
    g = kernel_grad(polynomial(2), [1.0, 0.0], [2.0, 1.0], 1.0)
    assert np.allclose(g.d_w, [6, 0]) and np.allclose(g.d_x, [12, 6]) and g.d_b == 6
    # independent check of the same numbers by central differences
    f = lambda w: kernel_eval(polynomial(2), [1.0, 0.0], w, 1.0)
    assert np.allclose(central_diff(f, [2.0, 1.0]), [6, 0], atol=1e-6)
    x, w = np.array([0.5, -1.0]), np.array([2.0, 3.0])
    lin = kernel_grad(KernelSpec("linear"), x, w, 0.2)
    assert np.array_equal(lin.d_x, w) and np.array_equal(lin.d_w, x) and lin.d_b == 1
    same = kernel_grad(KernelSpec("gaussian", sigma=1.0), x, x)
    assert not same.d_x.any()


@pytest.mark.parametrize("spec", ALL_SPECS, ids=str)
def test_grad_matches_finite_differences(spec):
    rng = np.random.default_rng(7)
    for _ in range(20):
        d = int(rng.integers(1, 6))
        x, w = rng.normal(0, 0.7, d), rng.normal(0, 0.7, d)
        b = float(rng.uniform(0, 1))
        g = kernel_grad(spec, x, w, b)
        num_x = central_diff(lambda v: kernel_eval(spec, v, w, b), x)
        num_w = central_diff(lambda v: kernel_eval(spec, x, v, b), w)
        num_b = central_diff(lambda v: kernel_eval(spec, x, w, float(v[0])), [b])[0] if spec.uses_bias else 0.0
        for a, n in ((g.d_x, num_x), (g.d_w, num_w), (np.array([g.d_b]), np.array([num_b]))):
            err = np.abs(a - n)
            assert np.all((err <= 1e-8) | (err <= 1e-5 * np.abs(n)))


@pytest.mark.parametrize("kind", ["laplacian", "abel"])
def test_kink_subgradient_is_zero(kind):
    spec = KernelSpec(kind, alpha=1.0)
    g = kernel_grad(spec, [1.0, 2.0], [1.0, 2.0])
    assert not g.d_x.any() and not g.d_w.any()


vec = st.lists(st.floats(-3, 3), min_size=1, max_size=6)


@settings(max_examples=200, deadline=None)
@given(vec, st.data(), st.floats(0, 2))
def test_symmetry_and_range(x, data, b):
    w = data.draw(st.lists(st.floats(-3, 3), min_size=len(x), max_size=len(x)))
    for spec in ALL_SPECS:
        k1, k2 = kernel_eval(spec, x, w, b), kernel_eval(spec, w, x, b)
        assert k1 == pytest.approx(k2, rel=1e-12, abs=1e-12)
        if not spec.uses_bias:
            assert 0 < k1 <= 1


@settings(max_examples=200, deadline=None)
@given(vec, st.data(), st.floats(0, 2))
def test_degree_one_equals_linear(x, data, b):
    w = data.draw(st.lists(st.floats(-3, 3), min_size=len(x), max_size=len(x)))
    assert kernel_eval(polynomial(1), x, w, b) == kernel_eval(KernelSpec("linear"), x, w, b)


@pytest.mark.parametrize("spec", ALL_SPECS, ids=str)
def test_batched_matches_pairwise(spec):
    rng = np.random.default_rng(3)
    X, W, b = rng.normal(size=(4, 5)), rng.normal(size=(3, 5)), rng.uniform(0, 1, 3)
    K, _ = kernel_matrix(spec, X, W, b)
    for i in range(4):
        for u in range(3):
            assert K[i, u] == pytest.approx(kernel_eval(spec, X[i], W[u], b[u]), rel=1e-12)


def test_json_round_trip():
    for spec in ALL_SPECS:
        assert KernelSpec.from_json(spec.to_json()) == spec
    assert polynomial(3).to_json() == {"kind": "polynomial", "n": 3}
