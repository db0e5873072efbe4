import numpy as np
import pytest

from mlbpgd.errors import ArgError, DomainError, ShapeError, SingularError, UnsupportedError
from mlbpgd.linops import Conv2DOperator, DenseOperator, gaussian_psf, identity_operator
from mlbpgd.harness.selftest import smoothness_margins, smoothness_pairings
from mlbpgd.objectives import (CoarseModel, DDesign, KLAxb, KLbAx, LeastSquares, build_coarse_model, eval_grad,
                               smoothness_constant)


def _finite_difference(obj, x, h=1e-6):
    return np.array([(obj.value(x + h * e) - obj.value(x - h * e)) / (2 * h) for e in np.eye(obj.size)])


class TestKullbackLeibler:
    def test_minimum_at_data(self):
        b = np.array([0.5, 1.0, 2.0])
        value, grad = KLbAx(identity_operator(3), b).eval_grad(b)
        assert value == pytest.approx(0.0, abs=1e-15)
        np.testing.assert_allclose(grad, 0.0, atol=1e-15)

    def test_reverse_minimum_at_data(self):
        b = np.array([0.5, 1.0, 2.0])
        value, grad = KLAxb(identity_operator(3), b).eval_grad(b)
        assert value == pytest.approx(0.0, abs=1e-15)
        np.testing.assert_allclose(grad, 0.0, atol=1e-15)

    def test_smoothness_constants(self):
        assert smoothness_constant(KLbAx(identity_operator(3), [1.0, 2.0, 3.0])) == pytest.approx(6.0)
        assert smoothness_constant(KLAxb(identity_operator(3), [1.0, 2.0, 3.0])) == pytest.approx(1.0)
        A = DenseOperator([[1.0, 0.5], [2.0, 0.5]])
        assert KLAxb(A, [1.0, 1.0]).smoothness_constant() == pytest.approx(3.0)

    @pytest.mark.parametrize("cls", [KLbAx, KLAxb])
    def test_gradient(self, cls):
        rng = np.random.default_rng(4)
        A = Conv2DOperator(gaussian_psf(3, 1.0), 4)
        obj = cls(A, rng.uniform(0.5, 1.5, 16))
        x = rng.uniform(0.5, 1.5, 16)
        np.testing.assert_allclose(obj.eval_grad(x)[1], _finite_difference(obj, x), rtol=1e-6, atol=1e-7)

    def test_nonpositive_forward_value(self):
        obj = KLbAx(identity_operator(2), [1.0, 1.0])
        with pytest.raises(DomainError):
            obj.eval_grad(np.array([1.0, 0.0]))

    def test_invalid_data(self):
        with pytest.raises(ArgError):
            KLbAx(identity_operator(2), [1.0, 0.0])
        with pytest.raises(ShapeError):
            KLbAx(identity_operator(2), [1.0, 1.0, 1.0])


class TestDDesign:
    def test_identity_design(self):
        x = np.array([0.2, 0.5, 0.3])
        value, grad = DDesign(np.eye(3)).eval_grad(x)
        assert value == pytest.approx(-np.sum(np.log(x)), rel=1e-12)
        np.testing.assert_allclose(grad, -1.0 / x, rtol=1e-12)

    def test_trace_identity_and_gradient(self):
        rng = np.random.default_rng(8)
        obj = DDesign(rng.normal(size=(4, 12)))
        x = rng.uniform(0.2, 1.0, 12)
        _, grad = obj.eval_grad(x)
        assert float(x @ -grad) == pytest.approx(4.0, rel=1e-10)
        np.testing.assert_allclose(grad, _finite_difference(obj, x), rtol=1e-6, atol=1e-7)
        assert obj.smoothness_constant() == 1.0

    def test_rank_deficient(self):
        H = np.array([[1.0, 1.0], [1.0, 1.0]])
        with pytest.raises((DomainError, SingularError)):
            DDesign(H).eval_grad(np.array([0.5, 0.5]))

    def test_nonpositive_weights(self):
        with pytest.raises(DomainError):
            DDesign(np.eye(2)).eval_grad(np.array([1.0, 0.0]))


class TestLeastSquares:
    def test_no_relative_smoothness_constant(self):
        obj = LeastSquares(identity_operator(2), [1.0, 2.0])
        with pytest.raises(UnsupportedError):
            obj.smoothness_constant()

    def test_lipschitz_bound_dominates_spectral_norm(self):
        rng = np.random.default_rng(2)
        M = rng.normal(size=(6, 4))
        obj = LeastSquares(DenseOperator(M), np.zeros(6))
        assert obj.lipschitz_bound() >= np.linalg.norm(M, 2) ** 2


class TestCoarseModel:
    def test_zero_shift(self):
        rng = np.random.default_rng(6)
        base = KLbAx(identity_operator(4), rng.uniform(0.5, 1.5, 4))
        model = CoarseModel(base, np.zeros(4), np.ones(4))
        x = rng.uniform(0.5, 1.5, 4)
        assert model.value(x) == base.value(x)
        np.testing.assert_array_equal(model.eval_grad(x)[1], base.eval_grad(x)[1])

    def test_first_order_coherence(self):
        rng = np.random.default_rng(7)
        f_coarse = KLbAx(Conv2DOperator(gaussian_psf(3, 1.0), 3), rng.uniform(0.5, 1.5, 9))
        anchor = rng.uniform(0.5, 1.5, 9)
        target = rng.normal(size=9)
        model = build_coarse_model(f_coarse, target, anchor)
        scale = max(1.0, np.max(np.abs(target)))
        assert np.max(np.abs(model.eval_grad(anchor)[1] - target)) <= 1e-12 * scale

    def test_matching_gradient_gives_zero_shift(self):
        f_coarse = KLbAx(identity_operator(3), [1.0, 2.0, 3.0])
        anchor = np.array([0.5, 1.0, 1.5])
        model = build_coarse_model(f_coarse, f_coarse.eval_grad(anchor)[1], anchor)
        np.testing.assert_array_equal(model.v, 0.0)
        assert model.smoothness_constant() == pytest.approx(6.0)


class TestRelativeSmoothness:
    @pytest.mark.parametrize("index", [0, 1, 2])
    def test_bregman_upper_bound_and_convexity(self, index):
        name, obj, geom, pairs = smoothness_pairings(np.random.default_rng(11), 500)[index]
        smooth, convex = smoothness_margins(obj, geom, pairs)
        assert smooth.min() >= 0.0, name
        assert convex.min() >= 0.0, name

    def test_module_functions_dispatch(self):
        obj = KLbAx(identity_operator(3), [1.0, 2.0, 3.0])
        x = np.array([0.5, 1.0, 1.5])
        value, grad = eval_grad(obj, x)
        assert value == pytest.approx(obj.value(x), rel=1e-14)
        np.testing.assert_array_equal(grad, obj.eval_grad(x)[1])
