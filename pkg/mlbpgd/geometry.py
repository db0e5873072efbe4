"""Bregman参照関数（幾何）と BPGD 部分問題の厳密解

各参照関数は可分なスカラー関数 φ の和 Σ φ(x_i) で、シフト l, u を持つ。
bpgd_update は τ<g, u-x> + D_φ(u, x) を実行可能領域上で最小化する。
"""
import logging
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.optimize import brentq
from scipy.special import expit, rel_entr, xlogy

from .errors import ArgError, DomainError, InfeasibleError, RootError, ShapeError, StepError

logger = logging.getLogger(__name__)

ROOT_MAX_ITER = 200
BISECT_TOL = 1e-12


class GeometryKind(str, Enum):
    QUADRATIC = "quadratic"
    LOG_BARRIER = "log_barrier"
    SHIFTED_LOG_BARRIER = "shifted_log_barrier"
    UPPER_LOG_BARRIER = "upper_log_barrier"
    DOUBLE_LOG_BARRIER = "double_log_barrier"
    NEG_ENTROPY = "neg_entropy"
    FERMI_DIRAC = "fermi_dirac"


# 0 ln 0 = 0 の規約で境界まで値を持つ種類
_CLOSED_KINDS = {GeometryKind.NEG_ENTROPY, GeometryKind.FERMI_DIRAC}


def _frozen(values, default):
    arr = np.array(default if values is None else values, dtype=float)
    arr.setflags(write=False)
    return arr


def _broadcast(bound, n):
    if bound.ndim == 0:
        return np.full(n, float(bound))
    if bound.shape != (n,):
        raise ShapeError(f"境界ベクトルの長さ {bound.shape} が変数の次元 {n} と一致しません")
    return bound


# --- 実行可能領域 ---
@dataclass(frozen=True, eq=False)
class Box:
    """箱型制約 [lower, upper]（±∞ 可）"""
    lower: np.ndarray = None
    upper: np.ndarray = None

    def __post_init__(self):
        object.__setattr__(self, "lower", _frozen(self.lower, -np.inf))
        object.__setattr__(self, "upper", _frozen(self.upper, np.inf))
        if np.any(self.lower > self.upper):
            raise ArgError("Box: lower <= upper を満たしていません")

    def bounds(self, n):
        return _broadcast(self.lower, n), _broadcast(self.upper, n)

    def is_interior(self, x):
        x = np.asarray(x, dtype=float)
        lo, hi = self.bounds(x.size)
        return bool(np.all(x > lo) and np.all(x < hi))


@dataclass(frozen=True, eq=False)
class TranslatedSimplex:
    """平行移動・拡大した単体 Δ(l, S) = {x : <1,x> = S, x >= l}"""
    lower: np.ndarray = None
    total: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "lower", _frozen(self.lower, 0.0))
        object.__setattr__(self, "total", float(self.total))
        if not np.all(np.isfinite(self.lower)):
            raise ArgError("TranslatedSimplex: 下限は有限値でなければなりません")
        if self.lower.ndim == 0:
            # 次元が未定なのでここでは S > 0 だけを確認する
            if not self.total > 0:
                raise InfeasibleError("TranslatedSimplex: S > 0 が必要です")
        elif not self.total > float(np.sum(self.lower)):
            raise InfeasibleError(
                f"TranslatedSimplex: S={self.total} が <1,l>={float(np.sum(self.lower))} 以下で相対内部が空です")

    def sum_tolerance(self):
        return 1e-10 * max(1.0, abs(self.total))

    def is_interior(self, x):
        x = np.asarray(x, dtype=float)
        lo = _broadcast(self.lower, x.size)
        return bool(np.all(x > lo) and abs(float(np.sum(x)) - self.total) <= self.sum_tolerance())


# --- 参照関数の記述子 ---
@dataclass(frozen=True, eq=False)
class GeometrySpec:
    kind: GeometryKind
    lower: np.ndarray = None
    upper: np.ndarray = None

    def __post_init__(self):
        kind = GeometryKind(self.kind)
        object.__setattr__(self, "kind", kind)
        default_lower = 0.0 if kind in (GeometryKind.LOG_BARRIER, GeometryKind.NEG_ENTROPY) else -np.inf
        lower = _frozen(self.lower, default_lower)
        upper = _frozen(self.upper, np.inf)
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)

        lo_finite, hi_finite = np.isfinite(lower), np.isfinite(upper)
        if kind == GeometryKind.QUADRATIC:
            ok = not lo_finite.any() and not hi_finite.any()
        elif kind == GeometryKind.LOG_BARRIER:
            ok = np.all(lower == 0.0) and not hi_finite.any()
        elif kind in (GeometryKind.SHIFTED_LOG_BARRIER, GeometryKind.NEG_ENTROPY):
            ok = lo_finite.all() and not hi_finite.any()
        elif kind == GeometryKind.UPPER_LOG_BARRIER:
            ok = hi_finite.all() and not lo_finite.any()
        else:
            ok = lo_finite.all() and hi_finite.all()
        if not ok:
            raise ArgError(f"{kind.value}: 境界の組み合わせが不正です")
        if np.any(lower >= upper):
            raise ArgError(f"{kind.value}: lower < upper を満たしていません")

    def bounds(self, n):
        return _broadcast(self.lower, n), _broadcast(self.upper, n)


def geometry_for(kind, region):
    """実行可能領域に合わせた参照関数を作る（LevelSpec の幾何ファクトリ）"""
    kind = GeometryKind(kind)
    if isinstance(region, TranslatedSimplex):
        if kind == GeometryKind.SHIFTED_LOG_BARRIER:
            return GeometrySpec(kind, lower=region.lower)
        return GeometrySpec(kind)
    if kind == GeometryKind.LOG_BARRIER:
        return GeometrySpec(kind)
    if kind in (GeometryKind.SHIFTED_LOG_BARRIER, GeometryKind.NEG_ENTROPY):
        return GeometrySpec(kind, lower=region.lower)
    if kind == GeometryKind.UPPER_LOG_BARRIER:
        return GeometrySpec(kind, upper=region.upper)
    if kind == GeometryKind.QUADRATIC:
        return GeometrySpec(kind)
    return GeometrySpec(kind, lower=region.lower, upper=region.upper)


def check_pairing(geom, region, n):
    """(幾何, 領域) の組が対応しているか確認する。暗黙の置き換えはしない"""
    kind = geom.kind
    if isinstance(region, TranslatedSimplex):
        lo = _broadcast(region.lower, n)
        if kind == GeometryKind.LOG_BARRIER and np.all(lo <= 0.0):
            return
        if kind == GeometryKind.SHIFTED_LOG_BARRIER and np.array_equal(geom.bounds(n)[0], lo):
            return
        raise ArgError(f"{kind.value} は単体制約 Δ(l,S) と組み合わせられません")

    g_lo, g_hi = geom.bounds(n)
    r_lo, r_hi = region.bounds(n)
    if not (np.array_equal(g_lo, r_lo) and np.array_equal(g_hi, r_hi)):
        raise ArgError(f"{kind.value} の定義域が箱型制約と一致しません")


def _require_domain(geom, x, closed=False):
    lo, hi = geom.bounds(x.size)
    if not np.all(np.isfinite(x)):
        raise DomainError("変数に有限でない成分があります")
    if closed:
        inside = np.all(x >= lo) and np.all(x <= hi)
    else:
        inside = np.all(x > lo) and np.all(x < hi)
    if not inside:
        raise DomainError(f"{geom.kind.value}: 定義域の内点ではありません")
    return x - lo, hi - x


def ref_eval(geom, x):
    """参照関数の値と勾配"""
    x = np.asarray(x, dtype=float)
    t, s = _require_domain(geom, x)
    kind = geom.kind
    if kind == GeometryKind.QUADRATIC:
        return 0.5 * float(x @ x), x.copy()
    if kind in (GeometryKind.LOG_BARRIER, GeometryKind.SHIFTED_LOG_BARRIER):
        return -float(np.sum(np.log(t))), -1.0 / t
    if kind == GeometryKind.UPPER_LOG_BARRIER:
        return -float(np.sum(np.log(s))), 1.0 / s
    if kind == GeometryKind.DOUBLE_LOG_BARRIER:
        return -float(np.sum(np.log(t) + np.log(s))), -1.0 / t + 1.0 / s
    if kind == GeometryKind.NEG_ENTROPY:
        return float(np.sum(xlogy(t, t) - t)), np.log(t)
    # FERMI_DIRAC
    return float(np.sum(xlogy(t, t) + xlogy(s, s))), np.log(t) - np.log(s)


def divergence_terms(geom, x, y):
    """成分ごとの Bregman 距離 φ(x_i) - φ(y_i) - φ'(y_i)(x_i - y_i)"""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape:
        raise ShapeError(f"x {x.shape} と y {y.shape} の形が違います")
    ty, sy = _require_domain(geom, y)
    tx, sx = _require_domain(geom, x, closed=geom.kind in _CLOSED_KINDS)
    kind = geom.kind

    if kind == GeometryKind.QUADRATIC:
        return 0.5 * (x - y) ** 2
    if kind in (GeometryKind.LOG_BARRIER, GeometryKind.SHIFTED_LOG_BARRIER):
        r = tx / ty
        return r - np.log(r) - 1.0
    if kind == GeometryKind.UPPER_LOG_BARRIER:
        r = sx / sy
        return r - np.log(r) - 1.0
    if kind == GeometryKind.DOUBLE_LOG_BARRIER:
        r1, r2 = tx / ty, sx / sy
        return r1 - np.log(r1) - 1.0 + r2 - np.log(r2) - 1.0
    if kind == GeometryKind.NEG_ENTROPY:
        return rel_entr(tx, ty) - tx + ty
    return rel_entr(tx, ty) - tx + ty + rel_entr(sx, sy) - sx + sy


def divergence(geom, x, y):
    """D_φ(x, y) = φ(x) - φ(y) - <∇φ(y), x - y>（丸めで負になった値は 0）"""
    return max(float(np.sum(divergence_terms(geom, x, y))), 0.0)


# --- 部分問題の解 ---
def simplex_dual_root(c, l, S):
    """d(ξ) = Σ 1/(c_i + ξ) - S の根（単体上の log-barrier 部分問題の双対変数）"""
    c = np.asarray(c, dtype=float).ravel()
    lo_bound = _broadcast(np.asarray(l, dtype=float), c.size)
    S = float(S)
    if not S > 0:
        raise RootError(f"S={S} は正でなければなりません")
    tol = 1e-10 * max(1.0, S)

    def residual(xi):
        with np.errstate(divide="ignore"):
            return float(np.sum(1.0 / (c + xi))) - S

    a = -float(c.min())
    scale = max(1.0, abs(a))
    delta = 1e-12 * scale
    lo = a + delta
    for _ in range(ROOT_MAX_ITER):
        if lo > a and residual(lo) > 0:
            break
        delta *= 0.5
        lo = a + delta
    else:
        raise RootError("根の下側ブラケットが見つかりません")

    step = max(c.size / S, 1e-12 * scale)
    hi = a + step
    for _ in range(ROOT_MAX_ITER):
        if residual(hi) <= 0:
            break
        step *= 2.0
        hi = a + step
    else:
        raise RootError("符号変化が見つかりません（実行不可能な部分問題）")

    # ブラケットが丸め誤差の幅に縮むまで詰める（Brent 法）
    try:
        xi = brentq(residual, lo, hi, xtol=4.0 * np.finfo(float).eps * scale, rtol=4.0 * np.finfo(float).eps,
                    maxiter=ROOT_MAX_ITER)
    except RuntimeError as exc:
        raise RootError(f"{ROOT_MAX_ITER} 回で根が収束しませんでした: {exc}") from exc
    if abs(residual(xi)) > tol:
        raise RootError(f"根の残差 {residual(xi):.3e} が許容誤差 {tol:.1e} を超えています")

    if not np.all(1.0 / (c + xi) > lo_bound):
        raise RootError("根から得た点が下限 l を満たしません")
    return xi


def _solve_double_log_barrier(lo, hi, x, target):
    """φ'(t) = target を (lo, hi) 上で解く。a = t - lo に関する二次方程式"""
    w = hi - lo
    c = target
    b = 2.0 - c * w
    disc = np.sqrt(b * b + 4.0 * c * w)
    q = -0.5 * (b + np.copysign(disc, b))
    with np.errstate(divide="ignore", invalid="ignore"):
        a1 = q / c
        a2 = -w / q
    a = np.where(c == 0.0, 0.5 * w, np.where((a1 > 0) & (a1 < w), a1, a2))
    bad = ~((a > 0) & (a < w))
    if bad.any():
        logger.debug("二次方程式の根が区間外: %d 成分を二分法で解きます", int(bad.sum()))
        a[bad] = _bisect_double_log_barrier(w[bad], c[bad])
    return lo + a


def _bisect_double_log_barrier(w, c):
    eps = 1e-14 * w
    left, right = eps.copy(), w - eps
    for _ in range(ROOT_MAX_ITER):
        mid = 0.5 * (left + right)
        h = -1.0 / mid + 1.0 / (w - mid) - c
        left = np.where(h < 0, mid, left)
        right = np.where(h < 0, right, mid)
        if np.all(right - left <= BISECT_TOL * np.maximum(1.0, w)):
            return 0.5 * (left + right)
    raise RootError("二重対数バリアの二分法が収束しませんでした")


def _keep_inside(x_new, lo, hi):
    floor = np.nextafter(lo, np.inf)
    ceil = np.nextafter(hi, -np.inf)
    clipped = np.clip(x_new, floor, ceil)
    n_moved = int(np.count_nonzero(clipped != x_new))
    if n_moved:
        logger.debug("境界に丸められた %d 成分を内点へ戻しました", n_moved)
    return clipped


def _unbounded_check(den):
    if np.any(den <= 0.0) or not np.all(np.isfinite(den)):
        raise StepError("ステップ幅が大きすぎて部分問題が有界ではありません")


def bpgd_update(geom, region, x, g, tau):
    """BPGD の1ステップ: argmin_u τ<g, u-x> + D_φ(u, x) over region"""
    if not (np.isfinite(tau) and tau > 0):
        raise StepError(f"ステップ幅 τ={tau} は正でなければなりません")
    x = np.asarray(x, dtype=float)
    g = np.asarray(g, dtype=float)
    if x.shape != g.shape:
        raise ShapeError(f"x {x.shape} と勾配 {g.shape} の形が違います")
    n = x.size
    check_pairing(geom, region, n)
    if not region.is_interior(x):
        raise DomainError("BPGD: 現在の点が実行可能領域の内点ではありません")
    t, s = _require_domain(geom, x)
    lo, hi = geom.bounds(n)
    kind = geom.kind
    tg = tau * g

    if isinstance(region, TranslatedSimplex):
        # 一次の条件 1/x⁺ = 1/x + τg + ξ（g = 0 なら ξ = 0 で x⁺ = x）
        r_lo = _broadcast(region.lower, n)
        if kind == GeometryKind.LOG_BARRIER:
            c = tg + 1.0 / x
            xi = simplex_dual_root(c, r_lo, region.total)
            return 1.0 / (c + xi)
        c = tg + 1.0 / t
        xi = simplex_dual_root(c, 0.0, region.total - float(np.sum(r_lo)))
        return r_lo + 1.0 / (c + xi)

    if kind == GeometryKind.QUADRATIC:
        return x - tg
    if kind in (GeometryKind.LOG_BARRIER, GeometryKind.SHIFTED_LOG_BARRIER):
        den = 1.0 / t + tg
        _unbounded_check(den)
        x_new = lo + 1.0 / den
    elif kind == GeometryKind.UPPER_LOG_BARRIER:
        den = 1.0 / s - tg
        _unbounded_check(den)
        x_new = hi - 1.0 / den
    elif kind == GeometryKind.NEG_ENTROPY:
        x_new = lo + t * np.exp(-tg)
    elif kind == GeometryKind.FERMI_DIRAC:
        # ミラー写像 ∇φ(x) = ln(x-l) - ln(u-x) の逆写像はロジスティック関数
        x_new = lo + (hi - lo) * expit(np.log(t) - np.log(s) - tg)
    else:
        target = -1.0 / t + 1.0 / s - tg
        x_new = _solve_double_log_barrier(lo, hi, x, target)
    if not np.all(np.isfinite(x_new)):
        raise StepError("BPGD の更新が有限値になりませんでした")
    return _keep_inside(x_new, lo, hi)
