"""単一レベル BPGD、Armijo 直線探索、多段階 BPGD（V サイクル）と実行トレース"""
import logging
import time
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .errors import (ArgError, DescentError, DomainError, GeometryError, InfeasibleError,
                     InvariantError, LineSearchError)
from .geometry import bpgd_update, divergence
from .hierarchy import adapt_region, trigger
from .objectives import build_coarse_model

logger = logging.getLogger(__name__)

# 不変条件の種類（違反回数を数える）
VIOLATION_KINDS = ("monotone", "sufficient_descent", "coherence", "descent_direction", "feasibility")

# 減少の判定の許容誤差は max(1, |f|) に対する相対値
DESCENT_RTOL = 1e-10
COHERENCE_RTOL = 1e-10


@dataclass(frozen=True)
class ArmijoParams:
    sigma: float = 1e-4
    beta: float = 0.5
    alpha_bar: float = 1.0
    max_backtracks: int = 60

    def __post_init__(self):
        if not 0.0 < self.sigma < 1.0:
            raise ArgError(f"Armijo: sigma={self.sigma} は (0,1) の範囲でなければなりません")
        if not 0.0 < self.beta < 1.0:
            raise ArgError(f"Armijo: beta={self.beta} は (0,1) の範囲でなければなりません")
        if not 0.0 < self.alpha_bar <= 1.0:
            raise ArgError(f"Armijo: alpha_bar={self.alpha_bar} は (0,1] の範囲でなければなりません")


@dataclass
class TraceRecord:
    iter: int
    fval: float
    cpu_seconds: float
    deepest_level: int = 0
    triggered: tuple = ()
    alphas: tuple = ()
    breg_step: float = 0.0
    slope: float = np.nan
    coherence_error: float = np.nan

    @property
    def alpha_finest(self):
        return self.alphas[0] if self.alphas else np.nan

    @property
    def corrected(self):
        """最も細かいレベルで粗い補正が適用されたか"""
        return bool(np.isfinite(self.alpha_finest))


@dataclass
class SolverTrace:
    label: str = ""
    records: list = field(default_factory=list)
    violations: dict = field(default_factory=lambda: dict.fromkeys(VIOLATION_KINDS, 0))
    debug: bool = False

    def __len__(self):
        return len(self.records)

    def append(self, record):
        self.records.append(record)

    @property
    def fvals(self):
        return np.array([r.fval for r in self.records])

    @property
    def total_violations(self):
        return int(sum(self.violations.values()))

    def flag(self, kind, message):
        """不変条件の違反を記録する。デバッグモードでは例外にする"""
        self.violations[kind] += 1
        if self.debug:
            raise InvariantError(f"[{self.label}] {message}")
        logger.warning("[%s] 不変条件違反 (%s): %s", self.label, kind, message)

    def to_frame(self):
        rows = [{
            "iter": r.iter,
            "fval": r.fval,
            "cpu_seconds": r.cpu_seconds,
            "deepest_level": r.deepest_level,
            "triggered": int(r.corrected),
            "alpha_finest": r.alpha_finest,
            "breg_step": r.breg_step,
            "slope": r.slope,
            "coherence_error": r.coherence_error,
        } for r in self.records]
        return pd.DataFrame(rows)


def armijo(model, x, d, region, p=None, f_x=None, g_x=None):
    """α = β^m ᾱ（最小の m）。Armijo 条件と x + αd の内点性の両方を満たすまで縮める"""
    p = p or ArmijoParams()
    if f_x is None or g_x is None:
        f_x, g_x = model.eval_grad(x)
    slope = float(np.dot(g_x, d))
    if not slope < 0:
        raise DescentError(f"d は降下方向ではありません (<g,d>={slope:.3e})")

    alpha = p.alpha_bar
    for _ in range(p.max_backtracks + 1):
        x_new = x + alpha * d
        if region.is_interior(x_new):
            try:
                f_new = model.value(x_new)
            except DomainError:
                f_new = np.inf
            if f_new <= f_x + p.sigma * alpha * slope:
                return alpha, x_new
        alpha *= p.beta
    raise LineSearchError(f"{p.max_backtracks} 回の縮小で Armijo 条件を満たしませんでした")


def _smooth(model, geom, region, x, f, g, tau, steps, trace, tolerate=False):
    """BPGD による平滑化。tolerate=True なら幾何の例外で打ち切り、最後の点を返す"""
    for _ in range(steps):
        try:
            x_new = bpgd_update(geom, region, x, g, tau)
            f_new, g_new = model.eval_grad(x_new)
        except GeometryError as exc:
            if not tolerate:
                raise
            logger.warning("[%s] 粗いレベルの平滑化を打ち切りました: %s", trace.label, exc)
            break
        step = divergence(geom, x, x_new)
        if f_new > f - step / tau + DESCENT_RTOL * max(1.0, abs(f)):
            trace.flag("sufficient_descent", f"f(x+)={f_new:.17g} > f(x)-D/τ={f - step / tau:.17g}")
        if not region.is_interior(x_new):
            trace.flag("feasibility", "平滑化の結果が内点ではありません")
        x, f, g = x_new, f_new, g_new
    return x, f, g


def bpgd_run(model, geometry, region, x0, tau, iters, callback=None, label="SL-BPGD", debug=False):
    """単一レベル BPGD を iters 回。trace の先頭は初期点（iter=0）"""
    if not (np.isfinite(tau) and tau > 0):
        raise ArgError(f"ステップ幅 τ={tau} は正でなければなりません")
    trace = SolverTrace(label=label, debug=debug)
    x = np.array(x0, dtype=float)
    if not region.is_interior(x):
        raise DomainError("初期点が実行可能領域の内点ではありません")
    f, g = model.eval_grad(x)
    trace.append(TraceRecord(iter=0, fval=f, cpu_seconds=0.0))

    elapsed = 0.0
    for k in range(1, iters + 1):
        start = time.perf_counter()
        x_prev, f_prev = x, f
        x, f, g = _smooth(model, geometry, region, x, f, g, tau, 1, trace)
        elapsed += time.perf_counter() - start
        if f > f_prev + DESCENT_RTOL * max(1.0, abs(f_prev)):
            trace.flag("monotone", f"反復 {k}: f が増加しました ({f_prev:.17g} -> {f:.17g})")
        trace.append(TraceRecord(iter=k, fval=f, cpu_seconds=elapsed,
                                 breg_step=divergence(geometry, x_prev, x)))
        if callback is not None:
            callback(k, x)
    logger.debug("[%s] %d 反復終了 f=%.10g", label, iters, f)
    return x, trace


def _bregman_distance(geom, stored, x):
    if stored is None:
        return np.inf
    try:
        return divergence(geom, stored, x)
    except DomainError:
        # 調整後の領域では前回の起動点が定義域外
        return np.inf


def ml_bpgd_run(levels, trigger_params, armijo_params, x0, iters, callback=None, label="ML-BPGD", debug=False):
    """多段階 BPGD。各外側反復で V サイクルを1回実行する

    下り: 起動条件が成り立つ限り、アンカー（制限した点）で粗いモデルを作り m_ℓ 回平滑化する。
    上り: d = P(x_{ℓ+1} - anchor) を Armijo で取り込み、1回（最も細かいレベルは m₀ 回）後平滑化する。
    """
    n_levels = len(levels)
    fine = levels[0]
    region0 = fine.region
    geom0 = fine.make_geometry(region0)
    trace = SolverTrace(label=label, debug=debug)

    x = np.array(x0, dtype=float)
    if not region0.is_interior(x):
        raise DomainError("初期点が実行可能領域の内点ではありません")
    f, g = fine.objective.eval_grad(x)
    trace.append(TraceRecord(iter=0, fval=f, cpu_seconds=0.0,
                             triggered=(False,) * (n_levels - 1), alphas=(np.nan,) * n_levels))
    last_trigger = [None] * (n_levels - 1)

    elapsed = 0.0
    for k in range(1, iters + 1):
        start = time.perf_counter()
        x_start, f_start = x, f
        xs, fs, gs = [x], [f], [g]
        models, regions, geoms, anchors = [fine.objective], [region0], [geom0], [None]
        f_anchors = [f]
        triggered = [False] * (n_levels - 1)
        coherence = np.nan

        # --- 下り ---
        ell = 0
        while ell < n_levels - 1:
            lvl, nxt = levels[ell], levels[ell + 1]
            T = lvl.transfer
            anchor = T.restrict(xs[ell])
            restricted_grad = T.restrict(gs[ell])
            try:
                region_c = adapt_region(regions[ell], xs[ell], anchor, T, nxt.lower_floor)
                geom_c = nxt.make_geometry(region_c)
                model_c = build_coarse_model(nxt.objective, restricted_grad, anchor)
                f_c, g_c = model_c.eval_grad(anchor)
            except (GeometryError, InfeasibleError) as exc:
                logger.warning("[%s] レベル %d の粗いモデルを作れませんでした: %s", label, ell + 1, exc)
                break

            scale = max(float(np.max(np.abs(gs[ell]))), np.finfo(float).tiny)
            err = float(np.max(np.abs(g_c - restricted_grad))) / scale
            coherence = err if np.isnan(coherence) else max(coherence, err)
            if err > COHERENCE_RTOL:
                trace.flag("coherence", f"レベル {ell + 1}: 一次の整合誤差 {err:.3e}")

            dist = _bregman_distance(geoms[ell], last_trigger[ell], xs[ell])
            if not trigger(gs[ell], g_c, dist, trigger_params):
                break
            last_trigger[ell] = xs[ell].copy()
            triggered[ell] = True

            f_anchors.append(f_c)
            x_c, f_c, g_c = _smooth(model_c, geom_c, region_c, anchor, f_c, g_c,
                                    nxt.tau, nxt.smoother_iters, trace, tolerate=True)
            xs.append(x_c)
            fs.append(f_c)
            gs.append(g_c)
            models.append(model_c)
            regions.append(region_c)
            geoms.append(geom_c)
            anchors.append(anchor)
            ell += 1
        deepest = ell

        # --- 上り ---
        alphas = [np.nan] * n_levels
        slope0 = np.nan
        for ell in reversed(range(deepest)):
            T = levels[ell].transfer
            d = T.prolong(xs[ell + 1] - anchors[ell + 1])
            slope = float(np.dot(gs[ell], d))
            if ell == 0:
                slope0 = slope
            # 凸性と一次の整合から <∇f, d> = <∇ψ(anchor), x_c - anchor> <= ψ(x_c) - ψ(anchor)
            decrease = fs[ell + 1] - f_anchors[ell + 1]
            if slope > decrease + DESCENT_RTOL * max(1.0, abs(f_anchors[ell + 1])):
                trace.flag("descent_direction",
                           f"反復 {k} レベル {ell}: <∇f, d>={slope:.3e} > 粗いモデルの減少量 {decrease:.3e}")
            if slope < 0:
                try:
                    alpha, x_new = armijo(models[ell], xs[ell], d, regions[ell], armijo_params, fs[ell], gs[ell])
                    fs[ell], gs[ell] = models[ell].eval_grad(x_new)
                    xs[ell] = x_new
                    alphas[ell] = alpha
                except LineSearchError as exc:
                    logger.debug("[%s] レベル %d の粗い補正を見送りました: %s", label, ell, exc)
            else:
                logger.debug("[%s] レベル %d: d が降下方向でないため補正なし (<g,d>=%.3e)", label, ell, slope)
            steps = fine.smoother_iters if ell == 0 else 1
            xs[ell], fs[ell], gs[ell] = _smooth(models[ell], geoms[ell], regions[ell], xs[ell], fs[ell], gs[ell],
                                                levels[ell].tau, steps, trace, tolerate=ell > 0)
        if deepest == 0:
            xs[0], fs[0], gs[0] = _smooth(fine.objective, geom0, region0, xs[0], fs[0], gs[0],
                                          fine.tau, fine.smoother_iters, trace)

        x, f, g = xs[0], fs[0], gs[0]
        elapsed += time.perf_counter() - start

        if f > f_start + DESCENT_RTOL * max(1.0, abs(f_start)):
            trace.flag("monotone", f"反復 {k}: f が増加しました ({f_start:.17g} -> {f:.17g})")
        if not region0.is_interior(x):
            trace.flag("feasibility", f"反復 {k}: 反復点が内点ではありません")
        trace.append(TraceRecord(
            iter=k, fval=f, cpu_seconds=elapsed, deepest_level=deepest,
            triggered=tuple(triggered), alphas=tuple(alphas),
            breg_step=divergence(geom0, x_start, x), slope=slope0, coherence_error=coherence,
        ))
        logger.debug("[%s] 反復 %d: f=%.10g 最深レベル=%d α=%s", label, k, f, deepest, alphas[0])
        if callback is not None:
            callback(k, x)
    return x, trace


def sublinear_diagnostic(model, geometry, region, x0, tau, iters, reference_iters):
    """k·(f(x^k) - f_ref) / (L·D_φ(x_ref, x⁰)) の最大値（L = 1/τ）。1.05 以下なら合格"""
    if reference_iters < iters:
        raise ArgError("参照実行の反復回数は診断する反復回数以上でなければなりません")
    x_ref, trace = bpgd_run(model, geometry, region, x0, tau, reference_iters, label="reference")
    fvals = trace.fvals
    f_ref = float(fvals.min())
    bound = divergence(geometry, x_ref, np.asarray(x0, dtype=float)) / tau
    k = np.arange(1, iters + 1)
    gaps = k * (fvals[1:iters + 1] - f_ref)
    ratio = float(gaps.max() / bound) if bound > 0 else 0.0
    return {"max_ratio": ratio, "f_ref": f_ref, "bound": bound, "passed": ratio <= 1.05}
