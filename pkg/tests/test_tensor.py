import math

import numpy as np
import pytest

from maskspec import tensor as T
from maskspec.tensor import NonFiniteError, Parameter, ShapeError, Tensor

from conftest import central_difference, relative_error


def leaf(a):
    return Tensor(np.array(a, dtype=np.float64), requires_grad=True)


class TestMatmul:
    def test_identity(self, rng):
        b = rng.standard_normal((2, 2))
        np.testing.assert_array_equal(T.matmul(np.eye(2), b).data, b)

    def test_hand_example(self):
        out = T.matmul(np.array([[1.0, 2], [3, 4]]), np.array([[5.0, 6], [7, 8]]))
        np.testing.assert_array_equal(out.data, [[19, 22], [43, 50]])

    def test_against_triple_loop(self, rng):
        a, b = rng.standard_normal((4, 5)), rng.standard_normal((5, 3))
        ref = np.zeros((4, 3))
        for i in range(4):
            for j in range(3):
                for k in range(5):
                    ref[i, j] += a[i, k] * b[k, j]
        np.testing.assert_allclose(T.matmul(a, b).data, ref, rtol=0, atol=1e-12)

    def test_shape_error(self):
        with pytest.raises(ShapeError):
            T.matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_grad_formula(self, rng):
        a, b, up = rng.standard_normal((3, 3)), rng.standard_normal((3, 3)), rng.standard_normal((3, 3))
        ta, tb = leaf(a), leaf(b)
        T.backward(T.sum(T.matmul(ta, tb) * up))
        np.testing.assert_allclose(ta.grad, up @ b.T, atol=1e-10)
        np.testing.assert_allclose(tb.grad, a.T @ up, atol=1e-10)

    def test_batched_with_shared_weight(self, rng):
        x, w = rng.standard_normal((2, 4, 3)), rng.standard_normal((3, 5))
        np.testing.assert_allclose(T.matmul(x, w).data, np.einsum("bnk,kd->bnd", x, w), atol=1e-12)


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(T.softmax(np.zeros(2)).data, [0.5, 0.5])

    def test_single_element(self):
        np.testing.assert_array_equal(T.softmax(np.array([[3.7]]), axis=-1).data, [[1.0]])

    def test_shift_invariance(self, rng):
        x = rng.standard_normal((4, 6))
        np.testing.assert_allclose(T.softmax(x + 17.3).data, T.softmax(x).data, atol=1e-12)

    def test_rows_sum_to_one_and_nonnegative(self, rng):
        for axis in (0, 1, -1):
            y = T.softmax(rng.standard_normal((5, 7)) * 30, axis=axis).data
            assert (y >= 0).all()
            np.testing.assert_allclose(y.sum(axis=axis), 1.0, atol=1e-9)

    def test_large_inputs_stay_finite(self):
        y = T.softmax(np.array([1000.0, 1001.0, 999.0])).data
        assert np.isfinite(y).all()


class TestLayerNorm:
    def test_constant_row_gives_zeros(self):
        y = T.layer_norm(np.full((1, 8), 3.0), np.ones(8), np.zeros(8))
        np.testing.assert_array_equal(y.data, np.zeros((1, 8)))

    def test_moments(self, rng):
        y = T.layer_norm(rng.standard_normal((1, 64)) * 5 + 2, np.ones(64), np.zeros(64)).data
        assert abs(y.mean()) < 1e-9
        assert abs(y.var() - 1) < 1e-6

    def test_zero_gain_gives_beta(self, rng):
        y = T.layer_norm(rng.standard_normal((3, 4)), np.zeros(4), np.full(4, 5.0)).data
        np.testing.assert_array_equal(y, np.full((3, 4), 5.0))

    def test_shift_invariance(self, rng):
        x = rng.standard_normal((6, 10))
        g, b = rng.standard_normal(10), rng.standard_normal(10)
        shifted = x + rng.standard_normal((6, 1)) * 10
        np.testing.assert_allclose(T.layer_norm(shifted, g, b).data, T.layer_norm(x, g, b).data, atol=1e-6)

    def test_gamma_shape_checked(self):
        with pytest.raises(ShapeError):
            T.layer_norm(np.ones((2, 3)), np.ones(4), np.zeros(4))


class TestGelu:
    def test_values(self):
        assert T.gelu(np.array(0.0)).item() == 0.0
        assert abs(T.gelu(np.array(10.0)).item() - 10.0) < 1e-6
        # 1 * Phi(1) via the error function
        phi1 = 0.5 * (1 + math.erf(1 / math.sqrt(2)))
        assert abs(T.gelu(np.array(1.0)).item() - phi1) < 1e-12
        assert abs(T.gelu(np.array(1.0)).item() - 0.841345) < 1e-5


class TestBackward:
    def test_square(self):
        x = leaf(3.0)
        T.backward(x * x)
        assert x.grad == 6.0

    def test_non_scalar_rejected(self):
        with pytest.raises(ValueError):
            T.backward(leaf([1.0, 2.0]) * 2.0)

    def test_accumulates_until_zeroed(self):
        p = Parameter(np.array([2.0]), "w")
        for _ in range(2):
            T.backward(T.sum(p * p))
        np.testing.assert_array_equal(p.grad, [8.0])
        p.zero_grad()
        np.testing.assert_array_equal(p.grad, [0.0])

    def test_shared_subexpression(self):
        x = leaf(2.0)
        y = x * x
        T.backward(y * y + y)  # x^4 + x^2
        assert x.grad == pytest.approx(4 * 8 + 2 * 2)

    def test_retain_grad_on_intermediate(self):
        x = leaf([1.0, 2.0])
        y = (x * 3.0).retain_grad()
        T.backward(T.sum(y * y))
        np.testing.assert_allclose(y.grad, [6.0, 12.0])
        np.testing.assert_allclose(x.grad, [18.0, 36.0])

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_is_error(self):
        with pytest.raises(NonFiniteError):
            T.mul(np.array([1e300]), np.array([1e300]))

    def test_deterministic(self, rng):
        x = rng.standard_normal((4, 8))
        g, b = rng.standard_normal(8), rng.standard_normal(8)
        a1 = T.gelu(T.layer_norm(x, g, b)).data
        a2 = T.gelu(T.layer_norm(x, g, b)).data
        assert a1.tobytes() == a2.tobytes()


def test_take_and_scatter_rows():
    x = np.arange(12.0).reshape(1, 4, 3)
    got = T.take_rows(x, np.array([[3, 1]])).data
    np.testing.assert_array_equal(got, x[:, [3, 1]])
    full = T.scatter_rows(got, np.zeros(3), np.array([[3, 1]]), 4).data
    np.testing.assert_array_equal(full[0, [0, 2]], 0)
    np.testing.assert_array_equal(full[0, [3, 1]], x[0, [3, 1]])


# --- randomized finite-difference checks, one case per differentiable op ----

TRIALS = 100


def _case(name, rng):
    """Returns (inputs, fn) where fn maps leaf Tensors to a Tensor output."""
    s = lambda *shape: rng.standard_normal(shape)  # noqa: E731
    m, k, n = rng.integers(1, 5, size=3)
    if name == "add":
        return [s(m, n), s(1, n)], lambda a, b: a + b
    if name == "sub":
        return [s(m, n), s(m, 1)], lambda a, b: a - b
    if name == "mul":
        return [s(m, n), s(n)], lambda a, b: a * b
    if name == "matmul":
        return [s(m, k), s(k, n)], T.matmul
    if name == "batched_matmul":
        return [s(2, m, k), s(k, n)], T.matmul
    if name == "batched_matmul_3d":
        return [s(2, m, k), s(2, k, n)], T.matmul
    if name == "reshape_transpose":
        return [s(m, k, n)], lambda a: T.transpose(T.reshape(a, (k, m, n)), (2, 0, 1))
    if name == "getitem":
        return [s(3, m, n)], lambda a: a[1] * a[2]
    if name == "sum":
        return [s(m, n)], lambda a: T.sum(a * a, axis=0)
    if name == "mean":
        return [s(m, n)], lambda a: T.mean(a * a, axis=-1, keepdims=True)
    if name == "softmax":
        return [s(m, n) * 2], lambda a: T.softmax(a, axis=-1)
    if name == "layer_norm":
        return [s(m, n + 1), s(n + 1), s(n + 1)], lambda x, g, b: T.layer_norm(x, g, b)
    if name == "gelu":
        return [s(m, n) * 2], T.gelu
    if name == "take_rows":
        total = int(m) + 2
        idx = np.stack([rng.permutation(total)[: int(m)] for _ in range(2)])
        return [s(2, total, n)], lambda a: T.take_rows(a, idx)
    if name == "scatter_rows":
        total = int(m) + 2
        idx = np.stack([np.sort(rng.permutation(total)[: int(m)]) for _ in range(2)])
        return [s(2, int(m), n), s(n)], lambda r, f: T.scatter_rows(r, f, idx, total)
    if name == "cross_entropy":
        t = rng.dirichlet(np.ones(int(n) + 1), size=int(m))
        return [s(m, n + 1)], lambda z: T.cross_entropy(z, t)
    if name == "bce":
        t = rng.random((int(m), int(n)))
        return [s(m, n) * 3], lambda z: T.binary_cross_entropy_with_logits(z, t)
    raise KeyError(name)


OPS = [
    "add", "sub", "mul", "matmul", "batched_matmul", "batched_matmul_3d", "reshape_transpose",
    "getitem", "sum", "mean", "softmax", "layer_norm", "gelu", "take_rows", "scatter_rows",
    "cross_entropy", "bce",
]


def gradcheck_op(name, trials=TRIALS, seed=0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        arrays, fn = _case(name, rng)
        out_shape = fn(*[Tensor(a) for a in arrays]).shape
        proj = rng.standard_normal(out_shape)

        def scalar():
            return float((fn(*[Tensor(a) for a in arrays]).data * proj).sum())

        leaves = [leaf(a) for a in arrays]
        T.backward(T.sum(fn(*leaves) * proj))
        numeric = central_difference(scalar, arrays)
        for lf, num in zip(leaves, numeric):
            worst = max(worst, relative_error(lf.grad, num))
    return worst


@pytest.mark.parametrize("name", OPS)
def test_gradcheck(name):
    assert gradcheck_op(name) < 1e-4
