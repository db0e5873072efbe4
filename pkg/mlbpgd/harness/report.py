"""収束トレースの書き出し（CSV・プロット用データ・Excel・サマリー JSON）"""
import json
import logging
from pathlib import Path

import numpy as np
import pandas as pd

from ..errors import ArgError

logger = logging.getLogger(__name__)

TRACE_COLUMNS = ["iter", "fval", "normalized_fval", "cpu_seconds", "deepest_level", "triggered", "alpha_finest"]
FLOAT_FORMAT = "%.17g"


def reference_value(traces):
    """比較する全実行を通じた最良の目的関数値"""
    traces = list(traces)
    if not traces or any(len(t) == 0 for t in traces):
        raise ArgError("空のトレースがあります")
    return float(min(t.fvals.min() for t in traces))


def normalized(trace, f_ref):
    """(f - f_ref) / (f₀ - f_ref) を [0,1] に収めたもの"""
    fvals = trace.fvals
    span = fvals[0] - f_ref
    if span <= 0:
        return np.zeros_like(fvals)
    return np.clip((fvals - f_ref) / span, 0.0, 1.0)


def trace_frame(trace, f_ref=None):
    if len(trace) == 0:
        raise ArgError(f"トレース '{trace.label}' が空です")
    f_ref = reference_value([trace]) if f_ref is None else f_ref
    df = trace.to_frame()
    df["normalized_fval"] = normalized(trace, f_ref)
    return df[TRACE_COLUMNS]


def write_trace_csv(trace, path, f_ref=None):
    df = trace_frame(trace, f_ref)
    df.to_csv(path, index=False, float_format=FLOAT_FORMAT)
    logger.info("トレースを書き出しました: %s", path)
    return Path(path)


def read_trace_csv(path):
    return pd.read_csv(path, float_precision="round_trip")


def plot_frame(traces):
    """cpu_seconds の和集合で揃えた正規化値（各列は直前の値で埋める）"""
    if not traces:
        raise ArgError("トレースがありません")
    f_ref = reference_value(traces.values())
    series = []
    for label, trace in traces.items():
        df = trace_frame(trace, f_ref)
        s = df.groupby("cpu_seconds")["normalized_fval"].last()
        series.append(s.rename(label))
    frame = pd.concat(series, axis=1).sort_index().ffill()
    frame.index.name = "cpu_seconds"
    return frame.reset_index()


def emit_plot_data(traces, path):
    plot_frame(traces).to_csv(path, index=False, float_format=FLOAT_FORMAT)
    logger.info("プロット用データを書き出しました: %s", path)
    return Path(path)


def iterations_to_reach(trace, target, rtol=1e-10):
    """f ≤ target となる最初の反復番号（到達しなければ None）"""
    for record in trace.records:
        if record.fval <= target + rtol * abs(target):
            return record.iter
    return None


def write_trace_workbook(traces, path, summary=None):
    """実行ごとに1シート、最後にサマリーのシートを持つ Excel ファイル"""
    if not traces:
        raise ArgError("トレースがありません")
    f_ref = reference_value(traces.values())
    with pd.ExcelWriter(path, engine="openpyxl") as writer:
        for label, trace in traces.items():
            frame = trace.to_frame()
            frame.insert(2, "normalized_fval", normalized(trace, f_ref))
            frame.to_excel(writer, sheet_name=label[:31], index=False)
        if summary:
            flat = [{"項目": key, "値": json.dumps(value, ensure_ascii=False) if isinstance(value, (dict, list)) else value}
                    for key, value in summary.items()]
            pd.DataFrame(flat).to_excel(writer, sheet_name="summary", index=False)
    return path


def write_summary(summary, path):
    Path(path).write_text(json.dumps(summary, indent=2, ensure_ascii=False, default=_json_default), encoding="utf-8")
    logger.info("サマリーを書き出しました: %s", path)
    return Path(path)


def _json_default(value):
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"JSON に変換できない値: {type(value).__name__}")
