"""不変条件のセルフテスト（小さい問題で全モジュールの性質を確かめる）"""
import logging
from dataclasses import dataclass, field

import numpy as np

from ..errors import MLBPGDError
from ..geometry import (Box, GeometryKind, GeometrySpec, TranslatedSimplex, bpgd_update, divergence,
                        divergence_terms, ref_eval, simplex_dual_root)
from ..hierarchy import TriggerParams, adapt_region, assemble_levels, prolongation_slack, trigger
from ..linops import Conv2DOperator, DenseOperator, TransferPair, equidistant_angles, gaussian_psf, parallel_beam
from ..objectives import DDesign, KLAxb, KLbAx, LeastSquares, eval_grad, smoothness_constant
from ..solver import ArmijoParams, armijo, bpgd_run, ml_bpgd_run

logger = logging.getLogger(__name__)

GRID_STEP = 1e-4


@dataclass
class SelftestReport:
    results: list = field(default_factory=list)

    def add(self, name, ok, detail=""):
        self.results.append((name, bool(ok), detail))
        logger.log(logging.INFO if ok else logging.ERROR, "%s %s %s", "OK  " if ok else "FAIL", name, detail)

    @property
    def passed(self):
        return all(ok for _, ok, _ in self.results)

    @property
    def failures(self):
        return [name for name, ok, _ in self.results if not ok]


# --- 部分問題の総当たり（格子探索） ---
def _coordinate_divergence(geom, i, n, values, center):
    """座標 i だけの Bregman 距離（格子上の各点について）"""
    if geom.kind == GeometryKind.LOG_BARRIER:
        single = geom
    else:
        lo, hi = geom.bounds(n)
        single = GeometrySpec(geom.kind,
                              lower=lo[i] if np.isfinite(lo[i]) else None,
                              upper=hi[i] if np.isfinite(hi[i]) else None)
    return divergence_terms(single, values, np.full_like(values, center))


def _open_grid(a, b):
    grid = np.arange(a, b, GRID_STEP)[1:]
    return grid[grid < b]


def grid_search_subproblem(geom, region, x, g, tau, hint=None):
    """BPGD 部分問題 τ<g, u-x> + D_φ(u, x) の格子探索による解（n ≤ 2）

    箱型領域では座標ごとに可分なので 1 次元の格子で解く。探索窓は x と hint を
    1 だけ広げた区間（凸なので真の解が窓の外なら端が選ばれ、hint と食い違う）。
    """
    n = x.size
    hint = x if hint is None else hint
    if isinstance(region, TranslatedSimplex):
        lo = np.broadcast_to(region.lower, (n,)).astype(float)
        if n == 1:
            return np.array([region.total])
        first = _open_grid(lo[0], region.total - lo[1])
        cand = np.column_stack([first, region.total - first])
        vals = tau * ((cand - x) @ g)
        for j in range(n):
            vals += _coordinate_divergence(geom, j, n, cand[:, j], x[j])
        return cand[int(np.argmin(vals))]

    lo, hi = region.bounds(n)
    out = np.empty_like(x)
    for i in range(n):
        grid = _open_grid(max(min(x[i], hint[i]) - 1.0, lo[i]), min(max(x[i], hint[i]) + 1.0, hi[i]))
        vals = tau * g[i] * (grid - x[i]) + _coordinate_divergence(geom, i, n, grid, x[i])
        out[i] = grid[int(np.argmin(vals))]
    return out


def oracle_cases(rng, n):
    """(幾何, 領域, x, g, τ) のランダムな組。すべての組み合わせを含む"""
    l = rng.uniform(-1.0, 1.0, n)
    u = l + rng.uniform(0.5, 2.0, n)
    x_box = l + rng.uniform(0.2, 0.8, n) * (u - l)
    g = rng.normal(0.0, 1.0, n)
    tau = rng.uniform(0.05, 0.5)
    cases = [
        (GeometrySpec(GeometryKind.QUADRATIC), Box(), rng.normal(0, 1, n)),
        (GeometrySpec(GeometryKind.LOG_BARRIER), Box(lower=0.0), rng.uniform(0.3, 2.0, n)),
        (GeometrySpec(GeometryKind.SHIFTED_LOG_BARRIER, lower=l), Box(lower=l), l + rng.uniform(0.3, 2.0, n)),
        (GeometrySpec(GeometryKind.UPPER_LOG_BARRIER, upper=u), Box(upper=u), u - rng.uniform(0.3, 2.0, n)),
        (GeometrySpec(GeometryKind.DOUBLE_LOG_BARRIER, lower=l, upper=u), Box(lower=l, upper=u), x_box),
        (GeometrySpec(GeometryKind.NEG_ENTROPY), Box(lower=0.0), rng.uniform(0.3, 2.0, n)),
        (GeometrySpec(GeometryKind.NEG_ENTROPY, lower=l), Box(lower=l), l + rng.uniform(0.3, 2.0, n)),
        (GeometrySpec(GeometryKind.FERMI_DIRAC, lower=l, upper=u), Box(lower=l, upper=u), x_box),
    ]
    if n == 2:
        w = rng.dirichlet(np.ones(2))
        cases.append((GeometrySpec(GeometryKind.LOG_BARRIER), TranslatedSimplex(total=1.0), w))
        ls = np.array([-0.3, 0.1])
        cases.append((GeometrySpec(GeometryKind.SHIFTED_LOG_BARRIER, lower=ls),
                      TranslatedSimplex(lower=ls, total=1.0), ls + (1.0 - ls.sum()) * w))
    return [(geom, region, x, g, tau) for geom, region, x in cases]


def check_oracle(report, rng, instances=200):
    worst = 0.0
    for n in (1, 2):
        for _ in range(instances):
            for geom, region, x, g, tau in oracle_cases(rng, n):
                try:
                    got = bpgd_update(geom, region, x, g, tau)
                except MLBPGDError:
                    # 非有界な部分問題（ステップが大きすぎる）は比較対象外
                    continue
                want = grid_search_subproblem(geom, region, x, g, tau, hint=got)
                worst = max(worst, float(np.max(np.abs(got - want))))
    report.add("部分問題の厳密解と格子探索の一致", worst <= 1e-3, f"最大誤差 {worst:.2e}")


def check_transfer(report, rng):
    ok = True
    for T in (TransferPair(3, dim=1), TransferPair(3, dim=2), TransferPair(3, dim=1, repeats=4)):
        w = rng.normal(size=T.n_coarse)
        x = rng.normal(size=T.n_fine)
        lhs, rhs = float(T.prolong(w) @ x), float(w @ T.restrict(x))
        ok &= abs(lhs - rhs) <= 1e-12 * max(1.0, abs(lhs))
        ok &= np.array_equal(np.asarray(T.P.sum(axis=0)).ravel(), np.ones(T.n_coarse))
    report.add("転送作用素 R = Pᵀ と列和 1", ok)


def check_operators(report, rng):
    ok = True
    ops = [Conv2DOperator(gaussian_psf(5, 1.0), 7), parallel_beam(7, equidistant_angles(6), 7)]
    for op in ops:
        x, y = rng.normal(size=op.shape[1]), rng.normal(size=op.shape[0])
        lhs, rhs = float(op.apply(x) @ y), float(x @ op.apply_adjoint(y))
        ok &= abs(lhs - rhs) <= 1e-12 * max(1.0, abs(lhs))
    report.add("作用素の随伴性", ok)


def check_objectives(report, rng):
    A = Conv2DOperator(gaussian_psf(3, 1.0), 5)
    b = rng.uniform(0.5, 1.5, 25)
    H = rng.normal(size=(3, 8))
    objs = [KLbAx(A, b), KLAxb(A, b), DDesign(H), LeastSquares(A, b)]
    worst = 0.0
    for obj in objs:
        x = rng.uniform(0.5, 1.5, obj.size)
        _, grad = obj.eval_grad(x)
        h = 1e-6
        fd = np.array([(obj.value(x + h * e) - obj.value(x - h * e)) / (2 * h) for e in np.eye(obj.size)])
        worst = max(worst, float(np.max(np.abs(fd - grad)) / max(1.0, np.max(np.abs(grad)))))
    x = rng.uniform(0.5, 1.5, 8)
    identity = abs(float(x @ -objs[2].eval_grad(x)[1]) - 3.0) / 3.0
    report.add("目的関数の勾配（差分）", worst <= 1e-5, f"最大相対誤差 {worst:.2e}")
    report.add("D-最適計画のトレース恒等式", identity <= 1e-8, f"誤差 {identity:.2e}")


def check_feasibility(report, rng):
    T = TransferPair(3, dim=2)
    box = Box(lower=0.0, upper=1.0)
    x = rng.uniform(0.1, 0.9, T.n_fine)
    anchor = T.restrict(x)
    slack, _ = prolongation_slack(box, x, adapt_region(box, x, anchor, T), anchor, T, rng)
    T1 = TransferPair(3, dim=1, repeats=2)
    simplex = TranslatedSimplex(lower=0.0, total=1.0)
    w = rng.dirichlet(np.ones(T1.n_fine))
    anchor = T1.restrict(w)
    s_slack, s_err = prolongation_slack(simplex, w, adapt_region(simplex, w, anchor, T1, 0.0), anchor, T1, rng)
    report.add("粗い実行可能点の延長（箱型）", slack >= -1e-12, f"余裕 {slack:.2e}")
    report.add("粗い実行可能点の延長（単体）", s_slack >= -1e-12 and s_err <= 1e-10, f"余裕 {s_slack:.2e}, 和の誤差 {s_err:.2e}")


def check_divergence(report, rng):
    ok = True
    worst = 0.0
    for geom, region, x, g, tau in oracle_cases(rng, 3):
        ok &= divergence(geom, x, x) == 0.0
        _, grad = ref_eval(geom, x)
        h = 1e-6 * max(1.0, float(np.max(np.abs(x))))
        fd = np.array([(ref_eval(geom, x + h * e)[0] - ref_eval(geom, x - h * e)[0]) / (2 * h) for e in np.eye(x.size)])
        ok &= np.allclose(fd, grad, rtol=1e-5, atol=1e-6)
        # 異なる2点（1ステップ先の点）での非負性
        try:
            y = bpgd_update(geom, region, x, g, tau)
        except MLBPGDError:
            continue
        worst = min(worst, float(np.sum(divergence_terms(geom, x, y))), float(np.sum(divergence_terms(geom, y, x))))
    report.add("Bregman 距離と参照関数の勾配", ok)
    report.add("Bregman 距離の非負性", worst >= -1e-12, f"最小値 {worst:.2e}")


def smoothness_margins(obj, geom, pairs):
    """相対平滑性 D_f(x,y) <= L·D_φ(x,y) と凸性 D_f(x,y) >= 0 の余裕（どちらも負なら違反）"""
    L = smoothness_constant(obj)
    smooth, convex = [], []
    for x, y in pairs:
        f_y, g_y = eval_grad(obj, y)
        d_f = obj.value(x) - f_y - float(g_y @ (x - y))
        bound = L * divergence(geom, x, y)
        smooth.append(bound + 1e-10 * max(abs(bound), 1.0) - d_f)
        convex.append(d_f + 1e-10 * max(1.0, abs(f_y)))
    return np.array(smooth), np.array(convex)


def smoothness_pairings(rng, count):
    """相対平滑性を確かめる (名前, 目的関数, 幾何, 点の組) の一覧"""
    A = Conv2DOperator(gaussian_psf(3, 1.0), 5)
    b = rng.uniform(0.5, 1.5, A.shape[0])
    H = rng.normal(size=(3, 8))

    def box_pairs(lo, hi, n):
        return [(rng.uniform(lo, hi, n), rng.uniform(lo, hi, n)) for _ in range(count)]

    return [
        ("KL(b,Ax)", KLbAx(A, b), GeometrySpec(GeometryKind.SHIFTED_LOG_BARRIER, lower=0.0), box_pairs(0.05, 2.0, 25)),
        ("KL(Ax,b)", KLAxb(A, b), GeometrySpec(GeometryKind.FERMI_DIRAC, lower=0.0, upper=1.0),
         box_pairs(0.02, 0.98, 25)),
        ("D-最適計画", DDesign(H), GeometrySpec(GeometryKind.LOG_BARRIER),
         [(rng.dirichlet(np.ones(8)), rng.dirichlet(np.ones(8))) for _ in range(count)]),
    ]


def check_relative_smoothness(report, rng, count=200):
    for name, obj, geom, pairs in smoothness_pairings(rng, count):
        smooth, convex = smoothness_margins(obj, geom, pairs)
        report.add(f"相対平滑性 ({name})", smooth.min() >= 0.0, f"最小余裕 {smooth.min():.3e}")
        report.add(f"凸性 ({name})", convex.min() >= 0.0, f"最小 D_f {convex.min():.3e}")


def check_simplex(report, rng, instances=50):
    worst_root, worst_sum, interior = 0.0, 0.0, True
    for _ in range(instances):
        n = int(rng.integers(2, 9))
        c = rng.normal(0.0, 2.0, n)
        S = float(rng.uniform(0.2, 5.0))
        xi = simplex_dual_root(c, 0.0, S)
        interior &= bool(np.all(c + xi > 0))
        worst_root = max(worst_root, abs(float(np.sum(1.0 / (c + xi))) - S) / max(1.0, S))

        lo = rng.uniform(-0.5, 0.5, n)
        total = float(lo.sum() + rng.uniform(0.5, 3.0))
        g = rng.normal(0.0, 1.0, n)
        cases = (
            (GeometrySpec(GeometryKind.SHIFTED_LOG_BARRIER, lower=lo), TranslatedSimplex(lo, total),
             lo + (total - lo.sum()) * rng.dirichlet(np.ones(n))),
            (GeometrySpec(GeometryKind.LOG_BARRIER), TranslatedSimplex(total=1.0), rng.dirichlet(np.ones(n))),
        )
        for geom, region, x in cases:
            x_new = bpgd_update(geom, region, x, g, 0.5)
            interior &= region.is_interior(x_new)
            worst_sum = max(worst_sum, abs(float(x_new.sum()) - region.total) / max(1.0, region.total))
    report.add("単体の双対変数の根", worst_root <= 1e-10 and interior, f"相対残差 {worst_root:.2e}")
    report.add("単体上の更新の和", worst_sum <= 1e-10, f"相対誤差 {worst_sum:.2e}")


def check_trigger_and_armijo(report, rng):
    p = TriggerParams(kappa=0.5, epsilon=1e-3, epsilon_x=1e-2)
    g = np.array([3.0, 4.0])
    ok = (trigger(g, np.array([2.5]), 1.0, p)
          and not trigger(g, np.array([2.4]), 1.0, p)
          and not trigger(g, np.array([2.5]), 1e-3, p)
          and not trigger(np.array([1e-4]), np.array([1e-4]), 1.0, p))
    report.add("粗い補正の起動条件", ok)

    quadratic = LeastSquares(DenseOperator([[1.0]]), [0.0])
    alpha_full, _ = armijo(quadratic, np.array([1.0]), np.array([-1.0]), Box())
    alpha_inside, x_inside = armijo(quadratic, np.array([1.0]), np.array([-2.0]), Box(lower=0.0))
    report.add("Armijo 直線探索", alpha_full == 1.0 and alpha_inside == 0.25 and x_inside[0] > 0.0,
               f"α = {alpha_full}, {alpha_inside}")


def check_solvers(report, rng, iters=10):
    side = 15
    A_fine = Conv2DOperator(gaussian_psf(5, 1.5), side)
    clean = rng.uniform(0.2, 1.0, side * side)
    b = A_fine.apply(clean)
    T = TransferPair(7, dim=2)
    objectives = [KLbAx(A_fine, b), KLbAx(Conv2DOperator(gaussian_psf(5, 1.5), 7), T.restrict(b))]
    region = Box(lower=0.0)
    levels = assemble_levels(objectives, GeometryKind.SHIFTED_LOG_BARRIER, region, [T], [1, 5], lower_floor=0.0)
    x0 = np.full(side * side, 0.5)
    geom = levels[0].make_geometry(region)
    _, sl = bpgd_run(objectives[0], geom, region, x0, levels[0].tau, iters, label="SL")
    # 15 → 7 では ‖Rg‖/‖g‖ ≈ 0.47 なので κ = 0.3 で粗い補正を起動させる
    _, ml = ml_bpgd_run(levels, TriggerParams(kappa=0.3), ArmijoParams(), x0, iters, label="ML")
    corrections = sum(r.corrected for r in ml.records)
    report.add("SL-BPGD の不変条件", sl.total_violations == 0, str(sl.violations))
    report.add("ML-BPGD の不変条件", ml.total_violations == 0, str(ml.violations))
    report.add("ML-BPGD の粗い補正", corrections > 0, f"{corrections} 回")

    # 最小点（A = I なら x* = b）から動かない
    eye = Conv2DOperator(np.ones((1, 1)), 5)
    target = rng.uniform(0.5, 1.5, 25)
    fixed = KLbAx(eye, target)
    x_end, _ = bpgd_run(fixed, GeometrySpec(GeometryKind.SHIFTED_LOG_BARRIER, lower=0.0), region, target,
                        1.0 / fixed.smoothness_constant(), 5, label="fixed")
    report.add("BPGD の不動点", float(np.max(np.abs(x_end - target))) <= 1e-8)

    T3 = TransferPair(3, dim=2)
    target = rng.uniform(0.5, 1.5, T3.n_fine)
    fixed_levels = assemble_levels([KLbAx(Conv2DOperator(np.ones((1, 1)), 7), target),
                                    KLbAx(Conv2DOperator(np.ones((1, 1)), 3), T3.restrict(target))],
                                   GeometryKind.SHIFTED_LOG_BARRIER, region, [T3], [1, 3], lower_floor=0.0)
    x_ml, _ = ml_bpgd_run(fixed_levels, TriggerParams(), ArmijoParams(), target, 3, label="ML fixed")
    report.add("ML-BPGD の不動点", float(np.max(np.abs(x_ml - target))) <= 1e-8)


def run_selftest(cfg, seed=None):
    """すべてのチェックを実行する。例外はそのチェックの失敗として記録する"""
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    report = SelftestReport()
    checks = (check_oracle, check_divergence, check_simplex, check_transfer, check_operators,
              check_objectives, check_relative_smoothness, check_feasibility, check_trigger_and_armijo,
              check_solvers)
    for check in checks:
        try:
            check(report, rng)
        except MLBPGDError as exc:
            report.add(check.__name__, False, f"例外: {exc}")
    logger.info("セルフテスト: %d 件中 %d 件成功", len(report.results),
                sum(ok for _, ok, _ in report.results))
    return report
