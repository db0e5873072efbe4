"""PGM (P2/P5) 画像の読み書き

読み込みは [0,1] の実数へ正規化し、保存は [0,1] にクリップして 8 ビットに量子化する。
量子化は np.rint（偶数丸め）なので 0.5 は 128/255 になる。
"""
import logging
from pathlib import Path

import numpy as np

from ..errors import FormatError

logger = logging.getLogger(__name__)

_WHITESPACE = b" \t\r\n\x0b\x0c"


class _HeaderReader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def _skip(self):
        while self.pos < len(self.data):
            ch = self.data[self.pos:self.pos + 1]
            if ch == b"#":
                end = self.data.find(b"\n", self.pos)
                self.pos = len(self.data) if end < 0 else end + 1
            elif ch in _WHITESPACE:
                self.pos += 1
            else:
                return

    def integer(self, what):
        self._skip()
        start = self.pos
        while self.pos < len(self.data) and self.data[self.pos:self.pos + 1].isdigit():
            self.pos += 1
        if start == self.pos:
            raise FormatError(f"PGM: {what} の数値がありません", start)
        return int(self.data[start:self.pos]), start


def parse_pgm(data):
    """PGM のバイト列を (rows, cols) の [0,1] 配列にする"""
    magic = data[:2]
    if magic not in (b"P2", b"P5"):
        raise FormatError(f"PGM のマジックナンバーではありません: {magic!r}", 0)
    reader = _HeaderReader(data)
    reader.pos = 2
    cols, _ = reader.integer("幅")
    rows, _ = reader.integer("高さ")
    maxval, offset = reader.integer("最大値")
    if cols < 1 or rows < 1:
        raise FormatError("PGM: 画像の大きさが不正です", offset)
    if not 1 <= maxval <= 65535:
        raise FormatError(f"PGM: 最大値 {maxval} が範囲外です", offset)
    count = rows * cols

    if magic == b"P5":
        start = reader.pos
        if start >= len(data) or data[start:start + 1] not in _WHITESPACE:
            raise FormatError("PGM: ヘッダーの後に空白がありません", start)
        start += 1
        dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
        need = count * dtype.itemsize
        if len(data) - start < need:
            raise FormatError(f"PGM: 画素データが足りません（{need} バイト必要）", len(data))
        values = np.frombuffer(data, dtype=dtype, count=count, offset=start).astype(float)
    else:
        values = np.empty(count)
        for i in range(count):
            values[i], _ = reader.integer(f"画素 {i}")
    if values.max(initial=0) > maxval:
        raise FormatError("PGM: 最大値を超える画素があります", reader.pos)
    return (values / maxval).reshape(rows, cols)


def load_pgm(path):
    return parse_pgm(Path(path).read_bytes())


def save_pgm(image, path, side=None):
    """2次元配列、または正方形画像の平坦ベクトルを 8 ビット P5 で保存する"""
    img = np.asarray(image, dtype=float)
    if img.ndim == 1:
        side = side or int(round(np.sqrt(img.size)))
        if side * side != img.size:
            raise FormatError(f"長さ {img.size} のベクトルは正方形画像ではありません", 0)
        img = img.reshape(side, side)
    if not np.all(np.isfinite(img)):
        raise FormatError("有限でない画素は保存できません", 0)
    pixels = np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    header = f"P5\n{pixels.shape[1]} {pixels.shape[0]}\n255\n".encode("ascii")
    path = Path(path)
    path.write_bytes(header + pixels.tobytes())
    logger.debug("画像を保存しました: %s", path)
    return path
