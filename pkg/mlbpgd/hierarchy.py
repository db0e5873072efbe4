"""多段階の構成: 粗いレベルの制約の再帰的な調整、LevelSpec の組み立て、粗い補正の起動条件"""
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ArgError, DomainError, ShapeError, UnsupportedError
from .geometry import Box, GeometryKind, TranslatedSimplex, geometry_for
from .linops import TransferPair

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TriggerParams:
    kappa: float = 0.49
    epsilon: float = 1e-3
    epsilon_x: float = 1e-2

    def __post_init__(self):
        if not 0.0 < self.kappa < 1.0:
            raise ArgError(f"kappa={self.kappa} は (0,1) の範囲でなければなりません")
        if not 0.0 < self.epsilon < 1.0:
            raise ArgError(f"epsilon={self.epsilon} は (0,1) の範囲でなければなりません")
        if not self.epsilon_x > 0.0:
            raise ArgError(f"epsilon_x={self.epsilon_x} は正でなければなりません")


@dataclass(frozen=True, eq=False)
class LevelSpec:
    """レベル ℓ の構成一式。transfer はレベル ℓ+1 への転送（最も粗いレベルでは None）"""
    index: int
    objective: object
    geometry_kind: GeometryKind
    region: object
    tau: float
    smoother_iters: int
    transfer: Optional[TransferPair] = None
    lower_floor: Optional[float] = None

    @property
    def size(self):
        return self.objective.size

    def make_geometry(self, region):
        return geometry_for(self.geometry_kind, region)


# --- 制約の調整 ---
def _vector(v, n, name):
    v = np.asarray(v, dtype=float)
    if v.ndim == 0:
        return np.full(n, float(v))
    if v.shape != (n,):
        raise ShapeError(f"{name} の長さ {v.shape} が {n} と一致しません")
    return v


def _keep_anchor_inside(bound, anchor, lower):
    bad = bound >= anchor if lower else bound <= anchor
    if bad.any():
        logger.debug("粗い境界がアンカーと一致したため %d 成分をずらしました", int(bad.sum()))
        bound = bound.copy()
        bound[bad] = np.nextafter(anchor[bad], -np.inf if lower else np.inf)
    return bound


def adapt_box_bounds(l_prev, u_prev, x_prev, x_coarse, T):
    """ℓ∞ 型の再帰的な箱型境界

    l_j = x_c,j + max_{t: P_tj>0} (l_prev - x_prev)_t / ‖P‖∞ （u は min で対称）。
    粗い点 w ∈ [l, u] の延長 x_prev + P(w - x_c) は [l_prev, u_prev] に入る。
    """
    n_f, n_c = T.n_fine, T.n_coarse
    x_prev = _vector(x_prev, n_f, "x_prev")
    x_coarse = _vector(x_coarse, n_c, "x_coarse")
    l_prev = _vector(l_prev, n_f, "l_prev")
    u_prev = _vector(u_prev, n_f, "u_prev")
    if not (np.all(x_prev > l_prev) and np.all(x_prev < u_prev)):
        raise DomainError("adapt_box_bounds: x_prev が [l, u] の内点ではありません")

    P = T.P_csc
    starts = P.indptr[:-1]
    with np.errstate(invalid="ignore"):
        lower_gap = np.maximum.reduceat((l_prev - x_prev)[P.indices], starts)
        upper_gap = np.minimum.reduceat((u_prev - x_prev)[P.indices], starts)
    l = x_coarse + lower_gap / T.inf_norm
    u = x_coarse + upper_gap / T.inf_norm
    return _keep_anchor_inside(l, x_coarse, True), _keep_anchor_inside(u, x_coarse, False)


def adapt_simplex(l_prev, x_prev, x_coarse, T, lower_floor=None):
    """平行移動した単体 Δ(l, S)。l は下限の再帰、S = <1, x_coarse>"""
    l, _ = adapt_box_bounds(l_prev, np.inf, x_prev, x_coarse, T)
    if lower_floor is not None:
        l = np.maximum(l, lower_floor)
    return TranslatedSimplex(lower=l, total=float(np.sum(x_coarse)))


def adapt_region(region_prev, x_prev, x_coarse, T, lower_floor=None):
    """親レベルの領域の種類に合わせて粗いレベルの領域を作る

    lower_floor を与えると下限を max(l, floor) に置き換える（目的関数の定義域との共通部分）。
    """
    if isinstance(region_prev, TranslatedSimplex):
        return adapt_simplex(region_prev.lower, x_prev, x_coarse, T, lower_floor)
    l, u = adapt_box_bounds(region_prev.lower, region_prev.upper, x_prev, x_coarse, T)
    if lower_floor is not None:
        l = np.maximum(l, lower_floor)
    return Box(lower=l, upper=u)


def trigger(grad_parent, grad_coarse_at_anchor, breg_dist_to_last_trigger, p):
    """粗い補正を行うかどうか（勾配ノルムの代理条件と前回の起動点からの Bregman 距離）"""
    norm_parent = float(np.linalg.norm(grad_parent))
    norm_coarse = float(np.linalg.norm(grad_coarse_at_anchor))
    return (norm_coarse >= p.kappa * norm_parent
            and norm_parent >= p.epsilon
            and breg_dist_to_last_trigger >= p.epsilon_x)


# --- 実行可能性の検査（モンテカルロ） ---
def sample_region(region, anchor, rng, count):
    """領域からの一様サンプル。無限の境界はアンカーの周りの有限区間で代用する"""
    n = anchor.size
    if isinstance(region, TranslatedSimplex):
        lo = _vector(region.lower, n, "lower")
        weights = rng.dirichlet(np.ones(n), size=count)
        return lo + (region.total - lo.sum()) * weights
    lo, hi = region.bounds(n)
    spread = 1.0 + np.abs(anchor)
    lo = np.where(np.isfinite(lo), lo, anchor - spread)
    hi = np.where(np.isfinite(hi), hi, anchor + spread)
    return rng.uniform(lo, hi, size=(count, n))


def prolongation_slack(region_prev, x_prev, region_coarse, x_coarse, T, rng, count=1000):
    """粗い実行可能点を延長したときの最小余裕と和の最大誤差を返す（余裕 ≥ 0 なら包含）"""
    samples = sample_region(region_coarse, x_coarse, rng, count)
    fine = x_prev + (T.P @ (samples - x_coarse).T).T
    n = x_prev.size
    if isinstance(region_prev, TranslatedSimplex):
        lo = _vector(region_prev.lower, n, "lower")
        slack = float(np.min(fine - lo))
        sum_error = float(np.max(np.abs(fine.sum(axis=1) - region_prev.total)))
        return slack, sum_error
    lo, hi = region_prev.bounds(n)
    gaps = []
    if np.isfinite(lo).any():
        gaps.append(np.min((fine - lo)[:, np.isfinite(lo)]))
    if np.isfinite(hi).any():
        gaps.append(np.min((hi - fine)[:, np.isfinite(hi)]))
    return (float(min(gaps)) if gaps else np.inf), 0.0


# --- レベルの組み立て ---
def assemble_levels(objectives, geometry_kinds, region, transfers, smoother_iters, taus=None, lower_floor=None):
    """細かい順に LevelSpec のリストを作る

    geometry_kinds は1つの種類か、レベルごとのリスト。taus を省略すると 1/L_ℓ。
    region は最も細かいレベルの実行可能領域（粗いレベルでは実行時に調整される）。
    """
    n_levels = len(objectives)
    if n_levels < 1:
        raise ArgError("レベルが1つもありません")
    if isinstance(geometry_kinds, (str, GeometryKind)):
        geometry_kinds = [geometry_kinds] * n_levels
    if len(geometry_kinds) != n_levels or len(smoother_iters) != n_levels or len(transfers) != n_levels - 1:
        raise ArgError("レベル数と各設定の長さが一致しません")

    levels = []
    for ell, obj in enumerate(objectives):
        transfer = transfers[ell] if ell < n_levels - 1 else None
        if transfer is not None:
            if transfer.n_fine != obj.size or transfer.n_coarse != objectives[ell + 1].size:
                raise ShapeError(f"レベル {ell} の転送作用素の大きさが目的関数と一致しません")
        try:
            limit = 1.0 / obj.smoothness_constant()
        except UnsupportedError:
            limit = np.inf
            if taus is None:
                raise ArgError(f"レベル {ell}: 相対平滑性定数がないためステップ幅の指定が必要です")
        tau = limit if taus is None else float(taus[ell])
        if not 0.0 < tau <= limit * (1.0 + 1e-12):
            raise ArgError(f"レベル {ell}: ステップ幅 τ={tau} が (0, 1/L] にありません")
        if smoother_iters[ell] < 0:
            raise ArgError(f"レベル {ell}: 平滑化回数が負です")
        levels.append(LevelSpec(
            index=ell,
            objective=obj,
            geometry_kind=GeometryKind(geometry_kinds[ell]),
            region=region if ell == 0 else None,
            tau=tau,
            smoother_iters=int(smoother_iters[ell]),
            transfer=transfer,
            lower_floor=None if ell == 0 else lower_floor,
        ))
    return levels
