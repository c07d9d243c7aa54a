"""The tape must reproduce central finite differences on every op it owns."""

import numpy as np
import pytest

from opstrack import autodiff as ad
from opstrack.autodiff import Tensor, no_grad
from opstrack.errors import InvalidArgumentError
from opstrack.nn import grad_check


def fd_check(build_loss, params, tol=1e-6, eps=1e-6):
    report = grad_check(build_loss, params, eps=eps, tol=tol)
    assert report.passed, str(report)


class TestElementwiseOps:
    @pytest.mark.parametrize("op", [
        lambda x: (x * x).sum(),
        lambda x: (x + 2.5 * x).sum(),
        lambda x: (x - x * 0.3).sum(),
        lambda x: (x / 3.0).sum(),
        lambda x: (-x).sum(),
        lambda x: (x ** 3.0).sum(),
        lambda x: ad.exp(x).sum(),
        lambda x: ad.sigmoid(x).sum(),
        lambda x: ad.relu(x).sum(),
        lambda x: ad.absolute(x).sum(),
        lambda x: ad.softmax(x, axis=-1).reshape(-1)[3] * 5.0,
    ])
    def test_gradients_match_fd(self, rng, op):
        x = Tensor(rng.normal(size=(3, 4)) + 0.1, requires_grad=True)
        fd_check(lambda: op(x), {"x": x})

    def test_log_sqrt_on_positive_input(self, rng):
        x = Tensor(rng.uniform(0.5, 2.0, size=(3, 4)), requires_grad=True)
        fd_check(lambda: ad.log(x).sum(), {"x": x})
        fd_check(lambda: ad.sqrt(x).sum(), {"x": x})

    def test_clip_blocks_gradient_outside_range(self):
        x = Tensor(np.array([-2.0, 0.5, 2.0]), requires_grad=True)
        ad.clip(x, 0.0, 1.0).sum().backward()
        np.testing.assert_array_equal(x.grad, [0.0, 1.0, 0.0])


class TestBroadcasting:
    def test_add_broadcast_fd(self, rng):
        a = Tensor(rng.normal(size=(4, 1, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
        fd_check(lambda: (a + b).sum(), {"a": a, "b": b})

    def test_mul_broadcast_fd(self, rng):
        a = Tensor(rng.normal(size=(2, 1, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
        fd_check(lambda: ((a * b) ** 2.0).sum(), {"a": a, "b": b})

    def test_scalar_constants_fold_in(self, rng):
        x = Tensor(rng.normal(size=(3,)), requires_grad=True)
        loss = (2.0 * x + 1.0).sum()
        loss.backward()
        np.testing.assert_allclose(x.grad, 2.0)


class TestMatmulAndShapes:
    def test_matmul_fd(self, rng):
        a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
        fd_check(lambda: (ad.matmul(a, b) ** 2.0).sum(), {"a": a, "b": b})

    def test_matmul_rejects_bad_shapes(self):
        with pytest.raises(InvalidArgumentError):
            ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))

    def test_reshape_transpose_fd(self, rng):
        x = Tensor(rng.normal(size=(2, 6)), requires_grad=True)
        fd_check(lambda: (x.reshape(3, 4).T ** 2.0).sum(), {"x": x})

    def test_concat_fd(self, rng):
        a = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        fd_check(lambda: (ad.concat([a, b], axis=0) ** 2.0).sum(), {"a": a, "b": b})

    def test_getitem_gather_accumulates_duplicates(self):
        x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
        idx = np.array([0, 0, 2])
        x[idx].sum().backward()
        np.testing.assert_array_equal(x.grad, [2.0, 0.0, 1.0])

    def test_getitem_fancy_fd(self, rng):
        x = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
        idx = np.array([[0, 1], [4, 1]])
        fd_check(lambda: (x[idx] ** 2.0).sum(), {"x": x})


class TestReductions:
    @pytest.mark.parametrize("red", [
        lambda x: x.sum(),
        lambda x: x.sum(axis=0).sum(),
        lambda x: x.sum(axis=1, keepdims=True).sum(),
        lambda x: x.mean(axis=0).sum(),
        lambda x: x.mean(),
    ])
    def test_sum_mean_fd(self, rng, red):
        x = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
        fd_check(lambda: red(x), {"x": x})

    def test_max_routes_gradient_to_argmax(self):
        x = Tensor(np.array([[1.0, 5.0, 2.0], [4.0, 0.0, 6.0]]), requires_grad=True)
        x.max(axis=1).sum().backward()
        np.testing.assert_array_equal(x.grad, [[0, 1, 0], [0, 0, 1]])

    def test_max_fd_away_from_ties(self, rng):
        x = Tensor(rng.normal(size=(4, 6)), requires_grad=True)
        fd_check(lambda: (x.max(axis=0) ** 2.0).sum(), {"x": x})

    def test_softmax_rows_sum_to_one(self, rng):
        s = ad.softmax(Tensor(rng.normal(size=(7, 9)) * 3), axis=-1)
        np.testing.assert_allclose(s.data.sum(axis=-1), 1.0, atol=1e-6)


class TestEngine:
    def test_branching_graph_accumulates(self):
        x = Tensor(np.array(2.0), requires_grad=True)
        y = x * x + x * 3.0  # dy/dx = 2x + 3 = 7
        y.backward()
        np.testing.assert_allclose(x.grad, 7.0)

    def test_backward_seed_scales(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        x.sum().backward(seed=0.5)
        np.testing.assert_allclose(x.grad, [0.5, 0.5])

    def test_no_grad_builds_no_tape(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with no_grad():
            y = (x * 2.0).sum()
        assert not y.requires_grad
        with pytest.raises(InvalidArgumentError):
            y.backward()

    def test_grad_shape_matches_values(self, rng):
        x = Tensor(rng.normal(size=(3, 4, 2)), requires_grad=True)
        (x * 2.0).sum().backward()
        assert x.grad.shape == x.data.shape

    def test_dtype_preserved_through_ops(self):
        x = Tensor(np.ones((2, 2), dtype=np.float32), requires_grad=True)
        y = ad.sigmoid(x @ Tensor(np.eye(2, dtype=np.float32)))
        assert y.dtype == np.float32
        y.sum().backward()
        assert x.grad.dtype == np.float32

    def test_scatter_mean_averages_and_distributes(self):
        v = Tensor(np.array([[2.0], [4.0], [10.0]]), requires_grad=True)
        means, counts = ad.scatter_mean(v, np.array([0, 0, 3]), 4)
        np.testing.assert_allclose(means.data[:, 0], [3.0, 0.0, 0.0, 10.0])
        np.testing.assert_array_equal(counts, [2, 0, 0, 1])
        means.sum().backward()
        np.testing.assert_allclose(v.grad[:, 0], [0.5, 0.5, 1.0])
