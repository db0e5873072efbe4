"""順作用素（密・疎・ぼかし・平行ビーム投影）と格子間の転送作用素

画像は行優先の平坦ベクトルとして扱う（画素 (iy, ix) の添字は iy * side + ix）。
"""
import logging

import numpy as np
import scipy.sparse as sp
from scipy.signal import convolve2d, correlate2d

from .errors import ArgError, ShapeError

logger = logging.getLogger(__name__)


class LinearOperator:
    """apply / apply_adjoint を持つ線形作用素の共通部分"""

    shape = (0, 0)

    def _check(self, v, n, what):
        v = np.asarray(v, dtype=float)
        if v.ndim != 1 or v.size != n:
            raise ShapeError(f"{type(self).__name__}.{what}: 長さ {n} のベクトルが必要です（受け取った形 {v.shape}）")
        return v

    def apply(self, x):
        raise NotImplementedError

    def apply_adjoint(self, y):
        raise NotImplementedError

    def abs_column_sums(self):
        raise NotImplementedError

    def abs_row_sums(self):
        raise NotImplementedError


class DenseOperator(LinearOperator):
    def __init__(self, matrix):
        matrix = np.array(matrix, dtype=float)
        if matrix.ndim != 2:
            raise ShapeError("DenseOperator には2次元配列が必要です")
        matrix.setflags(write=False)
        self.matrix = matrix
        self.shape = matrix.shape

    def apply(self, x):
        return self.matrix @ self._check(x, self.shape[1], "apply")

    def apply_adjoint(self, y):
        return self.matrix.T @ self._check(y, self.shape[0], "apply_adjoint")

    def abs_column_sums(self):
        return np.abs(self.matrix).sum(axis=0)

    def abs_row_sums(self):
        return np.abs(self.matrix).sum(axis=1)

    def to_dense(self):
        return np.array(self.matrix)


class SparseOperator(LinearOperator):
    """CSR 行列で持つ作用素"""

    def __init__(self, matrix):
        matrix = sp.csr_matrix(matrix, dtype=float)
        matrix.sum_duplicates()
        matrix.eliminate_zeros()
        self.matrix = matrix
        self.shape = matrix.shape

    def apply(self, x):
        return self.matrix @ self._check(x, self.shape[1], "apply")

    def apply_adjoint(self, y):
        return self.matrix.T @ self._check(y, self.shape[0], "apply_adjoint")

    def abs_column_sums(self):
        return np.asarray(abs(self.matrix).sum(axis=0)).ravel()

    def abs_row_sums(self):
        return np.asarray(abs(self.matrix).sum(axis=1)).ravel()

    def to_dense(self):
        return self.matrix.toarray()

    def without_zero_rows(self):
        """ゼロ行（画像に当たらない光線）を除いた作用素と、残した行のマスク"""
        keep = np.diff(self.matrix.indptr) > 0
        return SparseOperator(self.matrix[keep]), keep


class Conv2DOperator(LinearOperator):
    """side×side 画像へのゼロ埋め 2D 畳み込み（出力は入力と同じ大きさ）"""

    def __init__(self, kernel, side):
        kernel = np.array(kernel, dtype=float)
        if kernel.ndim != 2 or kernel.shape[0] % 2 == 0 or kernel.shape[1] % 2 == 0:
            raise ArgError("畳み込みカーネルは奇数×奇数の2次元配列でなければなりません")
        if side < 1:
            raise ArgError(f"画像サイズ side={side} が不正です")
        kernel.setflags(write=False)
        self.kernel = kernel
        self.side = int(side)
        n = self.side * self.side
        self.shape = (n, n)

    def _image(self, v, what):
        return self._check(v, self.shape[1], what).reshape(self.side, self.side)

    def apply(self, x):
        img = self._image(x, "apply")
        return convolve2d(img, self.kernel, mode="same", boundary="fill").ravel()

    def apply_adjoint(self, y):
        # 奇数サイズのカーネルでは 'same' の畳み込みと相関が互いに随伴
        img = self._image(y, "apply_adjoint")
        return correlate2d(img, self.kernel, mode="same", boundary="fill").ravel()

    def abs_column_sums(self):
        ones = np.ones((self.side, self.side))
        return correlate2d(ones, np.abs(self.kernel), mode="same", boundary="fill").ravel()

    def abs_row_sums(self):
        ones = np.ones((self.side, self.side))
        return convolve2d(ones, np.abs(self.kernel), mode="same", boundary="fill").ravel()


def identity_operator(n):
    return SparseOperator(sp.identity(n, format="csr"))


def gaussian_psf(dim, sigma):
    """中心化したガウス PSF（和は 1 に正規化）"""
    if dim < 1 or dim % 2 == 0:
        raise ArgError(f"PSF のサイズ dim={dim} は正の奇数でなければなりません")
    if not sigma > 0:
        raise ArgError(f"PSF の σ={sigma} は正でなければなりません")
    half = dim // 2
    r = np.arange(-half, half + 1, dtype=float)
    kernel = np.exp(-(r[:, None] ** 2 + r[None, :] ** 2) / (2.0 * sigma * sigma))
    return kernel / kernel.sum()


def equidistant_angles(count):
    """[0, π) 上の等間隔な投影角度"""
    if count < 1:
        raise ArgError(f"角度数 {count} は1以上でなければなりません")
    return np.pi * np.arange(count) / count


def _ray_segments(side, origin, direction):
    """光線と画素格子の交差（Siddon 法）。(画素添字, 交差長) を返す"""
    t_lo, t_hi = -np.inf, np.inf
    crossings = []
    for axis in range(2):
        o, d = origin[axis], direction[axis]
        if abs(d) < 1e-15:
            if not 0.0 < o < side:
                return np.empty(0, dtype=np.int64), np.empty(0)
            continue
        t0, t1 = (0.0 - o) / d, (side - o) / d
        t_lo = max(t_lo, min(t0, t1))
        t_hi = min(t_hi, max(t0, t1))
        crossings.append((np.arange(side + 1) - o) / d)
    if not t_hi > t_lo:
        return np.empty(0, dtype=np.int64), np.empty(0)

    t = np.concatenate(crossings + [np.array([t_lo, t_hi])])
    t = np.unique(t[(t >= t_lo) & (t <= t_hi)])
    lengths = np.diff(t)
    mid = 0.5 * (t[:-1] + t[1:])
    keep = lengths > 1e-12
    mid, lengths = mid[keep], lengths[keep]
    px = np.floor(origin[0] + mid * direction[0]).astype(np.int64)
    py = np.floor(origin[1] + mid * direction[1]).astype(np.int64)
    inside = (px >= 0) & (px < side) & (py >= 0) & (py < side)
    return py[inside] * side + px[inside], lengths[inside]


def parallel_beam(grid_side, angles, detectors):
    """平行ビーム投影の疎行列 (detectors·|angles|) × grid_side²

    画素は [0, grid_side]² 上の単位正方形、検出器ビンは画像幅を等分し、
    光線は各ビンの中心を通る。行の並びは (角度, 検出器) の行優先。
    """
    angles = np.atleast_1d(np.asarray(angles, dtype=float))
    if grid_side < 1 or detectors < 1 or angles.size == 0:
        raise ArgError("parallel_beam: grid_side, detectors は1以上、angles は空でないこと")
    n = int(grid_side)
    center = np.array([n / 2.0, n / 2.0])
    offsets = (np.arange(detectors) + 0.5) * n / detectors - n / 2.0

    rows, cols, vals = [], [], []
    for a, theta in enumerate(angles):
        direction = np.array([-np.sin(theta), np.cos(theta)])
        normal = np.array([np.cos(theta), np.sin(theta)])
        for k, s in enumerate(offsets):
            pix, length = _ray_segments(n, center + s * normal, direction)
            rows.append(np.full(pix.size, a * detectors + k, dtype=np.int64))
            cols.append(pix)
            vals.append(length)
    matrix = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(angles.size * detectors, n * n),
    )
    logger.debug("投影行列: %d 光線 × %d 画素, 非零 %d", matrix.shape[0], matrix.shape[1], matrix.nnz)
    return SparseOperator(matrix)


# --- 転送作用素 ---
def _is_grid_side(n):
    return n >= 1 and (n + 1) & n == 0


def _prolongation_1d(coarse_side):
    nc = coarse_side
    j = np.arange(nc)
    rows = np.concatenate([2 * j, 2 * j + 1, 2 * j + 2])
    cols = np.concatenate([j, j, j])
    vals = np.concatenate([np.full(nc, 0.25), np.full(nc, 0.5), np.full(nc, 0.25)])
    return sp.csr_matrix((vals, (rows, cols)), shape=(2 * nc + 1, nc))


class TransferPair:
    """粗い格子 (coarse_side) と細かい格子 (2·coarse_side + 1) の間の P と R = Pᵀ

    dim=2 は 1D ステンシルのテンソル積、repeats>1 は 1D ステンシルを
    行ごとに独立に並べたもの（I_repeats ⊗ P）。
    """

    def __init__(self, coarse_side, dim=2, repeats=1):
        if not _is_grid_side(coarse_side):
            raise ArgError(f"粗い格子のサイズ {coarse_side} は 2^j - 1 の形でなければなりません")
        if dim not in (1, 2):
            raise ArgError(f"次元 dim={dim} は 1 か 2 です")
        if repeats < 1:
            raise ArgError(f"repeats={repeats} は1以上でなければなりません")
        self.coarse_side = int(coarse_side)
        self.fine_side = 2 * self.coarse_side + 1
        self.dim = dim
        self.repeats = int(repeats)

        p1 = _prolongation_1d(self.coarse_side)
        p = sp.kron(p1, p1) if dim == 2 else p1
        if self.repeats > 1:
            p = sp.kron(sp.identity(self.repeats), p)
        self.P = sp.csr_matrix(p)
        self.P.eliminate_zeros()
        self.R = sp.csr_matrix(self.P.T)
        self.P_csc = sp.csc_matrix(self.P)
        self.P_csc.sort_indices()
        self.n_fine, self.n_coarse = self.P.shape
        self.inf_norm = float(np.asarray(abs(self.P).sum(axis=1)).max())

    def __repr__(self):
        return (f"TransferPair(coarse_side={self.coarse_side}, fine_side={self.fine_side}, "
                f"dim={self.dim}, repeats={self.repeats})")

    def prolong(self, w):
        w = np.asarray(w, dtype=float)
        if w.shape != (self.n_coarse,):
            raise ShapeError(f"prolong: 長さ {self.n_coarse} が必要です（{w.shape}）")
        return self.P @ w

    def restrict(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape != (self.n_fine,):
            raise ShapeError(f"restrict: 長さ {self.n_fine} が必要です（{x.shape}）")
        return self.R @ x


def prolong(T, w):
    return T.prolong(w)


def restrict(T, x):
    return T.restrict(x)
