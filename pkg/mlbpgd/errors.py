"""ML-BPGD ツールキットの例外クラス群"""


class MLBPGDError(Exception):
    """このパッケージが送出する例外の基底クラス"""


class GeometryError(MLBPGDError):
    """Bregman幾何（部分問題）まわりの例外の基底クラス"""


class DomainError(GeometryError):
    pass


class StepError(GeometryError):
    pass


class RootError(GeometryError):
    pass


class ShapeError(MLBPGDError):
    pass


class ArgError(MLBPGDError):
    pass


class SingularError(MLBPGDError):
    pass


class UnsupportedError(MLBPGDError):
    pass


class InfeasibleError(MLBPGDError):
    pass


class DescentError(MLBPGDError):
    pass


class LineSearchError(MLBPGDError):
    pass


class RankError(MLBPGDError):
    pass


class ConfigError(MLBPGDError):
    pass


class InvariantError(MLBPGDError):
    """デバッグモードの不変条件チェック・セルフテストの失敗"""


class FormatError(MLBPGDError):
    """画像ファイルの形式エラー。offset は問題のあったバイト位置"""

    def __init__(self, message, offset=0):
        super().__init__(f"{message} (offset={offset})")
        self.offset = offset
