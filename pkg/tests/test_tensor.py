"""Primitive-level autodiff behavior: values, adjoints, tape semantics."""

import numpy as np
import pytest

import voxeldiff.tensor as T
from voxeldiff import conv
from voxeldiff.autodiff import finite_difference
from voxeldiff.errors import NumericalError, ValidationError
from voxeldiff.tensor import Tensor


class TestForwardValues:
    def test_add_scalars(self):
        out = T.add(Tensor(2.0), 3.0)
        assert out.item() == 5.0

    def test_sigmoid_symmetry_at_zero(self):
        assert T.sigmoid(Tensor(0.0)).item() == 0.5

    def test_no_implicit_broadcasting(self):
        a = Tensor(np.zeros((2, 3)))
        b = Tensor(np.zeros((2, 1)))
        with pytest.raises(ValidationError):
            T.add(a, b)
        with pytest.raises(ValidationError):
            T.mul(a, b)

    def test_matmul_requires_2d(self):
        with pytest.raises(ValidationError):
            T.matmul(Tensor(np.zeros(3)), Tensor(np.zeros((3, 2))))

    def test_forward_deterministic_bitwise(self):
        rng = np.random.default_rng(0)
        a = rng.standard_normal((5, 5))
        b = rng.standard_normal((5, 5))

        def run():
            x = T.matmul(Tensor(a), Tensor(b))
            return T.tensor_sum(T.sigmoid(x)).item()

        assert run() == run()


class TestBackward:
    def test_linear_map(self):
        x = Tensor(2.0, requires_grad=True)
        y = T.mul(x, 3.0)
        y.backward()
        assert x.grad == pytest.approx(3.0, abs=0)

    def test_sum_of_squares(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        y = T.tensor_sum(T.mul(x, x))
        y.backward()
        np.testing.assert_allclose(x.grad, [2.0, 4.0])

    def test_seed_shape_mismatch(self):
        x = Tensor(np.zeros(3), requires_grad=True)
        y = T.mul(x, 2.0)
        with pytest.raises(ValidationError):
            y.backward(np.zeros(4))

    def test_nonscalar_needs_seed(self):
        x = Tensor(np.zeros(3), requires_grad=True)
        with pytest.raises(ValidationError):
            T.mul(x, 2.0).backward()

    def test_backward_visits_shared_node_once(self):
        # y = (x*x) + (x*x) reuses one node; gradient must be 4x, not 8x
        x = Tensor(np.array([3.0]), requires_grad=True)
        sq = T.mul(x, x)
        y = T.tensor_sum(T.add(sq, sq))
        y.backward()
        np.testing.assert_allclose(x.grad, [12.0])

    def test_adjoint_linearity(self):
        # backward of a sum of graphs equals the sum of separate backwards
        rng = np.random.default_rng(1)
        a = rng.standard_normal((4, 4))

        def g1(x):
            return T.tensor_sum(T.sigmoid(x))

        def g2(x):
            return T.tensor_sum(T.mul(x, x))

        x = Tensor(a.copy(), requires_grad=True)
        T.add(g1(x), g2(x)).backward()
        combined = x.grad.copy()

        x1 = Tensor(a.copy(), requires_grad=True)
        g1(x1).backward()
        x2 = Tensor(a.copy(), requires_grad=True)
        g2(x2).backward()
        np.testing.assert_allclose(combined, x1.grad + x2.grad, atol=1e-14)

    def test_grad_accumulates_across_backwards(self):
        x = Tensor(np.array([1.0]), requires_grad=True)
        T.tensor_sum(T.mul(x, 2.0)).backward()
        T.tensor_sum(T.mul(x, 2.0)).backward()
        np.testing.assert_allclose(x.grad, [4.0])
        x.zero_grad()
        assert x.grad is None


class TestFiniteDifferenceSweep:
    """Analytic gradients match central differences on random inputs in [-2, 2]."""

    def _fd_check(self, build, x, tol=1e-6):
        def scalar_of(arr):
            t = Tensor(arr, requires_grad=True)
            return build(t).item()

        t = Tensor(x.copy(), requires_grad=True)
        build(t).backward()
        analytic = t.grad
        fd = finite_difference(scalar_of, x.copy(), step=1e-5)
        rel = np.abs(analytic - fd) / np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(fd)))
        assert rel.max() <= tol

    @pytest.mark.parametrize(
        "name,build",
        [
            ("sigmoid", lambda t: T.tensor_sum(T.sigmoid(t))),
            ("softplus", lambda t: T.tensor_sum(T.softplus(t))),
            ("exp", lambda t: T.tensor_sum(T.exp(t))),
            ("cumsum", lambda t: T.tensor_sum(T.mul(T.cumsum(t, 1), T.cumsum(t, 1)))),
            ("mean", lambda t: T.mul(T.mean(t), 3.0)),
            ("narrow", lambda t: T.tensor_sum(T.mul(T.narrow(t, 0, 1, 2), 2.0))),
            ("reshape", lambda t: T.tensor_sum(T.mul(T.reshape(t, (8, 2)), T.reshape(t, (8, 2))))),
        ],
    )
    def test_elementwise_ops(self, name, build):
        rng = np.random.default_rng(hash(name) % 2**31)
        self._fd_check(build, rng.uniform(-2, 2, size=(4, 4)))

    def test_relu_away_from_kink(self):
        rng = np.random.default_rng(7)
        x = rng.uniform(-2, 2, size=(4, 4))
        x = np.where(np.abs(x) < 0.05, 0.1, x)
        self._fd_check(lambda t: T.tensor_sum(T.mul(T.relu(t), T.relu(t))), x)

    def test_conv3d_input_and_weights(self):
        rng = np.random.default_rng(11)
        x = rng.uniform(-1, 1, size=(2, 4, 4, 4))
        w = rng.uniform(-1, 1, size=(2, 2, 3, 3, 3))

        def loss(xt, wt):
            return T.tensor_sum(T.mul(conv.conv3d(xt, wt), 0.25))

        xt = Tensor(x.copy(), requires_grad=True)
        wt = Tensor(w.copy(), requires_grad=True)
        loss(xt, wt).backward()
        fd_x = finite_difference(lambda a: loss(Tensor(a), Tensor(w)).item(), x.copy())
        fd_w = finite_difference(lambda a: loss(Tensor(x), Tensor(a)).item(), w.copy())
        np.testing.assert_allclose(xt.grad, fd_x, atol=1e-7)
        np.testing.assert_allclose(wt.grad, fd_w, atol=1e-7)


class TestGatherPrimitive:
    def test_weighted_gather_matches_manual_sum(self):
        rng = np.random.default_rng(3)
        values = rng.standard_normal((3, 10))
        idx = rng.integers(0, 10, size=(6, 4))
        w = rng.random((6, 4))
        out = T.weighted_gather(Tensor(values), idx, w)
        ref = np.zeros((6, 3))
        for p in range(6):
            for k in range(4):
                ref[p] += w[p, k] * values[:, idx[p, k]]
        np.testing.assert_allclose(out.data, ref, atol=1e-14)

    def test_weighted_gather_backward_is_scatter(self):
        rng = np.random.default_rng(4)
        values = Tensor(rng.standard_normal((2, 8)), requires_grad=True)
        idx = rng.integers(0, 8, size=(5, 4))
        w = rng.random((5, 4))
        proj = rng.standard_normal((5, 2))
        out = T.weighted_gather(values, idx, w)
        T.tensor_sum(T.mul(out, Tensor(proj))).backward()
        ref = np.zeros((2, 8))
        for p in range(5):
            for k in range(4):
                ref[:, idx[p, k]] += w[p, k] * proj[p]
        np.testing.assert_allclose(values.grad, ref, atol=1e-13)


class TestDebugChecks:
    def test_nonfinite_raises_when_enabled(self):
        T.set_debug_checks(True)
        try:
            x = Tensor(np.array([1.0, 2.0]))
            with pytest.raises(NumericalError):
                Tensor(np.array([np.nan]))
            with np.errstate(over="ignore"), pytest.raises(NumericalError):
                T.exp(T.mul(x, 1000.0))
        finally:
            T.set_debug_checks(False)

    def test_no_grad_drops_tape(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with T.no_grad():
            y = T.mul(x, 2.0)
        assert not y.requires_grad and y._parents == ()
