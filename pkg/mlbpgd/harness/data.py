"""合成ファントムと Poisson ノイズによる劣化"""
import logging

import numpy as np

from ..errors import ArgError, ConfigError
from .imageio import load_pgm

logger = logging.getLogger(__name__)


def _grid(side):
    c = (np.arange(side) + 0.5) / side * 2.0 - 1.0
    return np.meshgrid(c, c, indexing="ij")


def crater_phantom(side):
    """クレーター状の放射状の起伏（ぼかし除去用）。値は (0, 1]"""
    y, x = _grid(side)
    img = np.full((side, side), 0.05)
    for cy, cx, radius, depth in ((0.0, 0.0, 0.55, 0.8), (-0.45, 0.4, 0.25, 0.6),
                                  (0.5, -0.35, 0.3, 0.5), (0.35, 0.55, 0.15, 0.9)):
        r = np.hypot(y - cy, x - cx) / radius
        rim = np.exp(-((r - 1.0) ** 2) / 0.02)
        bowl = np.where(r < 1.0, 0.4 * (1.0 - r ** 2), 0.0)
        img += depth * (0.6 * rim + bowl)
    return np.clip(img / img.max(), 0.05, 1.0)


def disc_phantom(side):
    """入れ子の円板（断層再構成用）。背景 0.02、最大 0.9"""
    y, x = _grid(side)
    img = np.full((side, side), 0.02)
    img[x ** 2 / 0.8 + y ** 2 / 0.6 < 1.0] = 0.5
    img[(x + 0.25) ** 2 + (y - 0.1) ** 2 < 0.08] = 0.9
    img[(x - 0.3) ** 2 + (y + 0.15) ** 2 < 0.05] = 0.25
    img[(x - 0.1) ** 2 + (y - 0.45) ** 2 < 0.015] = 0.75
    return img


def sprite_phantom(side):
    """ブロック状のスプライト（D-最適計画の比較用）"""
    img = np.full((side, side), 0.1)
    q = max(side // 5, 1)
    img[q:side - q, q:side - q] = 0.4
    img[q:2 * q + 1, q:2 * q + 1] = 0.9
    img[side - 2 * q - 1:side - q, side - 2 * q - 1:side - q] = 0.9
    img[side // 2, :] = 0.7
    img[:, side // 3] = 0.6
    return img


def load_or_generate(cfg, phantom):
    """設定に入力画像があれば読み込み、なければ合成ファントムを作る（平坦ベクトルで返す）"""
    side = cfg.fine_side
    if not cfg.input_image:
        return phantom(side).ravel()
    try:
        img = load_pgm(cfg.input_image)
    except OSError as exc:
        raise ConfigError(f"入力画像 '{cfg.input_image}' を読めません: {exc}") from exc
    if img.shape != (side, side):
        raise ConfigError(f"入力画像の大きさ {img.shape} が {side}×{side} ではありません")
    logger.info("入力画像 %s を読み込みました", cfg.input_image)
    # 対数バリア・エントロピーの定義域のため正の値に持ち上げる
    return np.clip(img, 1e-3, 1.0).ravel()


def poisson_degrade(clean, A, lam, seed):
    """b = Poi(λ·A·clean) / λ。ゼロになった成分は 1e-8·mean(b) で下から抑える

    乱数はカウンタ方式の Philox 生成器。Poisson 標本は numpy の Generator.poisson で、
    平均 10 未満は乗算法 (Knuth)、10 以上は変換棄却法 (PTRS) で生成される。
    """
    if not lam > 0:
        raise ArgError(f"λ={lam} は正でなければなりません")
    mean = A.apply(np.asarray(clean, dtype=float))
    if np.any(mean < 0):
        raise ArgError("A·clean に負の成分があります")
    rng = np.random.Generator(np.random.Philox(seed))
    b = rng.poisson(lam * mean).astype(float) / lam
    zeros = b <= 0
    if zeros.any():
        floor = 1e-8 * max(float(b.mean()), np.finfo(float).tiny)
        b[zeros] = floor
        logger.info("Poisson 標本のゼロ %d 個を %.3e に置き換えました", int(zeros.sum()), floor)
    return b
