"""目的関数（KL 2種、D-最適計画、最小二乗）と粗いモデル ψ"""
import logging

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.special import rel_entr

from .errors import ArgError, DomainError, ShapeError, SingularError, UnsupportedError
from .linops import DenseOperator

logger = logging.getLogger(__name__)


class Objective:
    """eval_grad / value / smoothness_constant を持つ目的関数の共通部分"""

    size = 0

    def _check(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape != (self.size,):
            raise ShapeError(f"{type(self).__name__}: 長さ {self.size} のベクトルが必要です（{x.shape}）")
        return x

    def eval_grad(self, x):
        raise NotImplementedError

    def value(self, x):
        return self.eval_grad(x)[0]

    def smoothness_constant(self):
        raise UnsupportedError(f"{type(self).__name__} には相対平滑性定数がありません")


def _positive_data(A, b):
    b = np.array(b, dtype=float)
    if b.shape != (A.shape[0],):
        raise ShapeError(f"データ b の長さ {b.shape} が作用素の行数 {A.shape[0]} と一致しません")
    if not np.all(b > 0):
        raise ArgError("データ b は正の値でなければなりません")
    if not np.all(A.apply(np.ones(A.shape[1])) > 0):
        raise ArgError("作用素にゼロ行（または負の行）があります")
    b.setflags(write=False)
    return b


def _forward(A, x):
    ax = A.apply(x)
    if not np.all(ax > 0):
        raise DomainError("Ax に正でない成分があります")
    return ax


class KLbAx(Objective):
    """f(x) = KL(b, Ax)。対数バリアに対して ‖b‖₁-相対平滑"""

    def __init__(self, A, b):
        self.A = A
        self.b = _positive_data(A, b)
        self.size = A.shape[1]

    def value(self, x):
        ax = _forward(self.A, self._check(x))
        return float(np.sum(rel_entr(self.b, ax) - self.b + ax))

    def eval_grad(self, x):
        ax = _forward(self.A, self._check(x))
        value = float(np.sum(rel_entr(self.b, ax) - self.b + ax))
        return value, self.A.apply_adjoint(1.0 - self.b / ax)

    def smoothness_constant(self):
        return float(np.sum(self.b))


class KLAxb(Objective):
    """f(x) = KL(Ax, b)。負エントロピーに対して ‖A‖₁-相対平滑（最大列和）"""

    def __init__(self, A, b):
        self.A = A
        self.b = _positive_data(A, b)
        self.size = A.shape[1]

    def value(self, x):
        ax = _forward(self.A, self._check(x))
        return float(np.sum(rel_entr(ax, self.b) - ax + self.b))

    def eval_grad(self, x):
        ax = _forward(self.A, self._check(x))
        value = float(np.sum(rel_entr(ax, self.b) - ax + self.b))
        return value, self.A.apply_adjoint(np.log(ax / self.b))

    def smoothness_constant(self):
        return float(np.max(self.A.abs_column_sums()))


class DDesign(Objective):
    """f(x) = -ln det(H Diag(x) Hᵀ)。H は m×n の密行列、対数バリアに対して 1-相対平滑"""

    def __init__(self, H):
        if isinstance(H, DenseOperator):
            H = H.matrix
        H = np.array(H, dtype=float)
        if H.ndim != 2:
            raise ShapeError("DDesign には2次元の H が必要です")
        H.setflags(write=False)
        self.H = H
        self.m, self.size = H.shape

    def _factor(self, x):
        x = self._check(x)
        if not np.all(x > 0):
            raise DomainError("DDesign: 重みは正でなければなりません")
        M = (self.H * x) @ self.H.T
        try:
            factor = cho_factor(M, lower=True, check_finite=True)
        except LinAlgError as exc:
            raise DomainError(f"M(x) が正定値ではありません: {exc}") from exc
        except ValueError as exc:
            raise SingularError(f"M(x) の分解に失敗しました: {exc}") from exc
        diag = np.diag(factor[0])
        if diag.min() <= 1e-150 * max(diag.max(), 1.0):
            raise SingularError("M(x) がほぼ特異です")
        return factor, diag

    def value(self, x):
        _, diag = self._factor(x)
        return -2.0 * float(np.sum(np.log(diag)))

    def eval_grad(self, x):
        factor, diag = self._factor(x)
        Z = cho_solve(factor, self.H, check_finite=False)
        grad = -np.einsum("ki,ki->i", self.H, Z)
        return -2.0 * float(np.sum(np.log(diag))), grad

    def smoothness_constant(self):
        return 1.0


class LeastSquares(Objective):
    """f(x) = ½‖Ax - b‖²。ステップ幅は呼び出し側が与える"""

    def __init__(self, A, b):
        b = np.array(b, dtype=float)
        if b.shape != (A.shape[0],):
            raise ShapeError(f"データ b の長さ {b.shape} が作用素の行数 {A.shape[0]} と一致しません")
        b.setflags(write=False)
        self.A = A
        self.b = b
        self.size = A.shape[1]

    def eval_grad(self, x):
        r = self.A.apply(self._check(x)) - self.b
        return 0.5 * float(r @ r), self.A.apply_adjoint(r)

    def lipschitz_bound(self):
        # ‖A‖₂² ≤ ‖A‖₁‖A‖∞
        return float(np.max(self.A.abs_column_sums()) * np.max(self.A.abs_row_sums()))


class CoarseModel(Objective):
    """ψ(x) = f_H(x) + <v, x - anchor>"""

    def __init__(self, base, v, anchor):
        self.base = base
        self.size = base.size
        self.v = self._check(v).copy()
        self.anchor = self._check(anchor).copy()

    def value(self, x):
        x = self._check(x)
        return self.base.value(x) + float(self.v @ (x - self.anchor))

    def eval_grad(self, x):
        x = self._check(x)
        value, grad = self.base.eval_grad(x)
        return value + float(self.v @ (x - self.anchor)), grad + self.v

    def smoothness_constant(self):
        return self.base.smoothness_constant()


def eval_grad(obj, x):
    return obj.eval_grad(x)


def smoothness_constant(obj):
    return obj.smoothness_constant()


def build_coarse_model(f_coarse, parent_grad_restricted, anchor):
    """一次の整合条件 ∇ψ(anchor) = R∇f(x) を満たす粗いモデルを作る"""
    _, grad_anchor = f_coarse.eval_grad(anchor)
    v = np.asarray(parent_grad_restricted, dtype=float) - grad_anchor
    return CoarseModel(f_coarse, v, anchor)
