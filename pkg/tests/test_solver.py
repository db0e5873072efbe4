import numpy as np
import pytest

from mlbpgd.errors import DescentError, InvariantError
from mlbpgd.geometry import Box, GeometryKind, GeometrySpec, TranslatedSimplex, bpgd_update
from mlbpgd.hierarchy import TriggerParams, assemble_levels
from mlbpgd.linops import Conv2DOperator, DenseOperator, TransferPair, gaussian_psf, identity_operator
from mlbpgd import solver
from mlbpgd.objectives import DDesign, KLbAx, LeastSquares, build_coarse_model
from mlbpgd.solver import ArmijoParams, SolverTrace, armijo, bpgd_run, ml_bpgd_run, sublinear_diagnostic


@pytest.fixture
def deconv_problem():
    """15×15 → 7×7 のぼかし除去（ノイズなし）"""
    rng = np.random.default_rng(0)
    side = 15
    A = Conv2DOperator(gaussian_psf(5, 1.5), side)
    clean = rng.uniform(0.2, 1.0, side * side)
    b = A.apply(clean)
    T = TransferPair(7, dim=2)
    objectives = [KLbAx(A, b), KLbAx(Conv2DOperator(gaussian_psf(5, 1.5), 7), T.restrict(b))]
    region = Box(lower=0.0)
    levels = assemble_levels(objectives, GeometryKind.SHIFTED_LOG_BARRIER, region, [T], [1, 5], lower_floor=0.0)
    return levels, region, np.full(side * side, 0.5)


class TestArmijo:
    def _quadratic(self):
        return LeastSquares(DenseOperator([[1.0]]), [0.0])

    def test_full_step_on_quadratic(self):
        alpha, x_new = armijo(self._quadratic(), np.array([1.0]), np.array([-1.0]), Box())
        assert alpha == 1.0
        np.testing.assert_allclose(x_new, [0.0])

    def test_backtracks_for_interiority(self):
        alpha, x_new = armijo(self._quadratic(), np.array([1.0]), np.array([-2.0]), Box(lower=0.0))
        assert alpha == 0.25
        assert x_new[0] > 0.0

    def test_not_a_descent_direction(self):
        with pytest.raises(DescentError):
            armijo(self._quadratic(), np.array([1.0]), np.array([1.0]), Box())


class TestBpgdRun:
    def test_single_iteration_is_one_update(self):
        rng = np.random.default_rng(1)
        obj = KLbAx(identity_operator(5), rng.uniform(0.5, 1.5, 5))
        geom = GeometrySpec(GeometryKind.SHIFTED_LOG_BARRIER, lower=0.0)
        x0 = rng.uniform(0.5, 1.5, 5)
        tau = 1.0 / obj.smoothness_constant()
        x1, trace = bpgd_run(obj, geom, Box(lower=0.0), x0, tau, 1)
        np.testing.assert_array_equal(x1, bpgd_update(geom, Box(lower=0.0), x0, obj.eval_grad(x0)[1], tau))
        assert [r.iter for r in trace.records] == [0, 1]

    def test_fixed_point(self):
        target = np.random.default_rng(2).uniform(0.5, 1.5, 9)
        obj = KLbAx(identity_operator(9), target)
        x_end, trace = bpgd_run(obj, GeometrySpec(GeometryKind.SHIFTED_LOG_BARRIER, lower=0.0), Box(lower=0.0),
                                target, 1.0 / obj.smoothness_constant(), 10)
        np.testing.assert_allclose(x_end, target, atol=1e-8)
        assert trace.total_violations == 0

    def test_monotone_on_deconvolution(self, deconv_problem):
        levels, region, x0 = deconv_problem
        geom = levels[0].make_geometry(region)
        _, trace = bpgd_run(levels[0].objective, geom, region, x0, levels[0].tau, 20)
        assert np.all(np.diff(trace.fvals) <= 1e-10 * np.maximum(1.0, np.abs(trace.fvals[:-1])))
        assert trace.total_violations == 0

    def test_d_optimal_design_on_simplex(self):
        rng = np.random.default_rng(3)
        obj = DDesign(rng.normal(size=(3, 10)))
        region = TranslatedSimplex(total=1.0)
        x_end, trace = bpgd_run(obj, GeometrySpec(GeometryKind.LOG_BARRIER), region, np.full(10, 0.1), 1.0, 30)
        assert region.is_interior(x_end)
        assert trace.fvals[-1] < trace.fvals[0]
        assert trace.total_violations == 0

    def test_callback_sees_every_iterate(self):
        obj = KLbAx(identity_operator(2), [1.0, 2.0])
        seen = []
        bpgd_run(obj, GeometrySpec(GeometryKind.LOG_BARRIER), Box(lower=0.0), np.ones(2), 1.0 / 3.0, 4,
                 callback=lambda k, x: seen.append(k))
        assert seen == [1, 2, 3, 4]

    def test_sublinear_rate(self, deconv_problem):
        levels, region, x0 = deconv_problem
        geom = levels[0].make_geometry(region)
        result = sublinear_diagnostic(levels[0].objective, geom, region, x0, levels[0].tau, 20, 200)
        assert result["passed"], result


class TestMlBpgdRun:
    def test_single_level_matches_bpgd(self, deconv_problem):
        levels, region, x0 = deconv_problem
        single = assemble_levels([levels[0].objective], GeometryKind.SHIFTED_LOG_BARRIER, region, [], [1])
        x_ml, _ = ml_bpgd_run(single, TriggerParams(), ArmijoParams(), x0, 8)
        x_sl, _ = bpgd_run(levels[0].objective, levels[0].make_geometry(region), region, x0, levels[0].tau, 8)
        np.testing.assert_array_equal(x_ml, x_sl)

    def test_two_levels_monotone_without_violations(self, deconv_problem):
        levels, _, x0 = deconv_problem
        x, trace = ml_bpgd_run(levels, TriggerParams(kappa=0.3), ArmijoParams(), x0, 15, debug=True)
        assert len(trace) == 16
        assert np.all(np.diff(trace.fvals) <= 1e-10 * np.maximum(1.0, np.abs(trace.fvals[:-1])))
        assert trace.total_violations == 0
        assert np.all(x > 0)

    def test_coarse_correction_is_used(self, deconv_problem):
        levels, _, x0 = deconv_problem
        _, trace = ml_bpgd_run(levels, TriggerParams(kappa=0.3), ArmijoParams(), x0, 5)
        assert trace.records[1].triggered == (True,)
        assert trace.records[1].deepest_level == 1
        assert trace.records[1].coherence_error <= 1e-10

    def test_three_levels_reach_coarsest(self):
        rng = np.random.default_rng(5)
        sides = [31, 15, 7]
        ops = [Conv2DOperator(gaussian_psf(5, 1.5), s) for s in sides]
        transfers = [TransferPair(15, dim=2), TransferPair(7, dim=2)]
        data = [ops[0].apply(rng.uniform(0.2, 1.0, 31 * 31))]
        for T in transfers:
            data.append(T.restrict(data[-1]))
        objectives = [KLbAx(A, b) for A, b in zip(ops, data)]
        levels = assemble_levels(objectives, GeometryKind.SHIFTED_LOG_BARRIER, Box(lower=0.0), transfers,
                                 [1, 5, 5], lower_floor=0.0)
        x, trace = ml_bpgd_run(levels, TriggerParams(kappa=0.3), ArmijoParams(), np.full(31 * 31, 0.5), 10,
                               debug=True)
        assert any(r.deepest_level == 2 for r in trace.records)
        assert any(np.isfinite(r.alphas[1]) for r in trace.records)
        assert np.all(np.diff(trace.fvals) <= 1e-10 * np.maximum(1.0, np.abs(trace.fvals[:-1])))
        assert trace.total_violations == 0
        assert np.all(x > 0)

    def test_wrong_coarse_gradient_is_flagged(self, deconv_problem, monkeypatch):
        levels, _, x0 = deconv_problem
        monkeypatch.setattr(solver, "build_coarse_model",
                            lambda f, grad, anchor: build_coarse_model(f, -grad, anchor))
        _, trace = ml_bpgd_run(levels, TriggerParams(kappa=0.3), ArmijoParams(), x0, 2)
        assert trace.violations["coherence"] >= 1
        assert trace.violations["descent_direction"] >= 1

    def test_fixed_point(self):
        target = np.random.default_rng(4).uniform(0.5, 1.5, 49)
        T = TransferPair(3, dim=2)
        objectives = [KLbAx(Conv2DOperator(np.ones((1, 1)), 7), target),
                      KLbAx(Conv2DOperator(np.ones((1, 1)), 3), T.restrict(target))]
        levels = assemble_levels(objectives, GeometryKind.SHIFTED_LOG_BARRIER, Box(lower=0.0), [T], [1, 3],
                                 lower_floor=0.0)
        x_end, _ = ml_bpgd_run(levels, TriggerParams(), ArmijoParams(), target, 3)
        np.testing.assert_allclose(x_end, target, atol=1e-8)


class TestSolverTrace:
    def test_debug_mode_raises(self):
        trace = SolverTrace(label="t", debug=True)
        with pytest.raises(InvariantError):
            trace.flag("monotone", "増加")

    def test_counts_without_debug(self):
        trace = SolverTrace(label="t")
        trace.flag("coherence", "誤差")
        trace.flag("coherence", "誤差")
        assert trace.violations["coherence"] == 2 and trace.total_violations == 2
