"""Hessian-vector products: closed-form quadratic oracle, zero-curvature
case, and agreement between the exact and finite-difference modes."""

import numpy as np
import pytest

from metamtl.errors import ParameterError, ShapeError
from metamtl.tensor import Tensor, dense, hvp, matmul, relu, softmax_cross_entropy


def _quadratic(a_matrix):
    a = Tensor(a_matrix)

    def loss(params):
        th = params[0].reshape((1, len(a_matrix)))
        return (matmul(matmul(th, a), th.T)).sum() * 0.5

    return loss


class TestQuadraticOracle:
    def test_exact_matches_analytic(self):
        rng = np.random.default_rng(0)
        m = rng.standard_normal((5, 5))
        a = m + m.T
        th = Tensor(rng.standard_normal(5), requires_grad=True)
        v = rng.standard_normal(5)
        hv = hvp(_quadratic(a), [th], [v], mode="exact")[0]
        assert np.abs(hv - a @ v).max() < 1e-12

    def test_fd_matches_analytic(self):
        rng = np.random.default_rng(1)
        m = rng.standard_normal((4, 4))
        a = m + m.T
        th = Tensor(rng.standard_normal(4), requires_grad=True)
        v = rng.standard_normal(4)
        hv = hvp(_quadratic(a), [th], [v], mode="fd")[0]
        assert np.abs(hv - a @ v).max() < 1e-8

    def test_linear_loss_zero_hessian(self):
        c = Tensor(np.arange(1.0, 5.0))
        th = Tensor(np.random.default_rng(2).standard_normal(4), requires_grad=True)
        for mode in ("exact", "fd"):
            hv = hvp(lambda p: (p[0] * c).sum(), [th],
                     [np.ones(4)], mode=mode)[0]
            assert np.abs(hv).max() < 1e-10


class TestCrossMode:
    def test_small_mlp_agreement(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((6, 4))
        labels = rng.integers(0, 3, 6)
        w1 = Tensor(rng.standard_normal((4, 8)) * 0.5, requires_grad=True)
        b1 = Tensor(np.zeros(8), requires_grad=True)
        w2 = Tensor(rng.standard_normal((8, 3)) * 0.5, requires_grad=True)
        b2 = Tensor(np.zeros(3), requires_grad=True)
        params = [w1, b1, w2, b2]

        def loss(p):
            h = relu(dense(Tensor(x), p[0], p[1]))
            return softmax_cross_entropy(dense(h, p[2], p[3]), labels)

        vector = [rng.standard_normal(p.shape) for p in params]
        exact = hvp(loss, params, vector, mode="exact")
        approx = hvp(loss, params, vector, mode="fd", eps=1e-4)
        for e, f in zip(exact, approx):
            scale = max(np.abs(e).max(), 1e-9)
            assert np.abs(e - f).max() / scale < 1e-3

    def test_symmetry(self):
        # <u, H v> == <v, H u> for any twice-differentiable loss
        rng = np.random.default_rng(4)
        a = rng.standard_normal((3, 6))
        th = Tensor(rng.standard_normal(6), requires_grad=True)

        def loss(p):
            z = matmul(p[0].reshape((1, 6)), Tensor(a.T))
            return (z.exp() + z * z).sum()

        u = rng.standard_normal(6)
        v = rng.standard_normal(6)
        hu = hvp(loss, [th], [u])[0]
        hv = hvp(loss, [th], [v])[0]
        assert float(u @ hv) == pytest.approx(float(v @ hu), rel=1e-9)


class TestValidation:
    def test_shape_mismatch(self):
        th = Tensor(np.zeros(3), requires_grad=True)
        with pytest.raises(ShapeError):
            hvp(lambda p: (p[0] * p[0]).sum(), [th], [np.zeros(4)])

    def test_block_count_mismatch(self):
        th = Tensor(np.zeros(3), requires_grad=True)
        with pytest.raises(ShapeError):
            hvp(lambda p: (p[0] * p[0]).sum(), [th], [np.zeros(3), np.zeros(3)])

    def test_unknown_mode(self):
        th = Tensor(np.zeros(3), requires_grad=True)
        with pytest.raises(ParameterError):
            hvp(lambda p: (p[0] * p[0]).sum(), [th], [np.zeros(3)], mode="nope")
