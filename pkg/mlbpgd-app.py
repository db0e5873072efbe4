import io
import json
import logging
from pathlib import Path

import numpy as np
import pandas as pd
import streamlit as st

from mlbpgd.errors import ConfigError, MLBPGDError
from mlbpgd.harness.config import SCENARIOS, apply_scenario, default_config, load_presets, save_preset
from mlbpgd.harness.experiments import run_experiment
from mlbpgd.harness.report import plot_frame, write_trace_workbook
from mlbpgd.harness.selftest import run_selftest

# ★★★ バージョン情報 ★★★
APP_VERSION = "0.3.0"  # D-最適計画の上位角度と等間隔角度の比較を追加
PRESETS_PATH = Path(__file__).with_name("presets.json")

EXPERIMENT_LABELS = {
    "deconv": "Poisson ぼかし除去",
    "tomo": "断層再構成 (B-SMART)",
    "ddesign": "D-最適計画（投影角度の選択）",
    "selftest": "セルフテスト",
}

# プリセットに保存する UI の値
KEYS_TO_SAVE = [
    "experiment", "grid_exponent", "levels", "smoother_text", "kappa", "epsilon", "epsilon_x",
    "armijo_sigma", "armijo_beta", "psf_dim", "psf_sigma", "noise_lambda", "noisy",
    "angles_text", "seed", "iters", "sl_iters", "top_k", "min_angle_gap", "ls_iters",
]

logging.basicConfig(level=logging.INFO)


def gather_current_ui_settings():
    """UIから現在の設定をすべて集めて辞書として返す"""
    return {key: st.session_state[key] for key in KEYS_TO_SAVE if key in st.session_state}


def parse_int_list(text, name):
    try:
        return [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"{name} はカンマ区切りの整数で入力してください") from None


def build_config(experiment):
    """UI の値から ExperimentConfig を作って検証する"""
    cfg = default_config(experiment)
    ss = st.session_state
    cfg.grid_exponent = int(ss.grid_exponent)
    cfg.levels = int(ss.levels)
    cfg.smoother_iters = parse_int_list(ss.smoother_text, "平滑化回数")
    cfg.kappa, cfg.epsilon, cfg.epsilon_x = float(ss.kappa), float(ss.epsilon), float(ss.epsilon_x)
    cfg.armijo_sigma, cfg.armijo_beta = float(ss.armijo_sigma), float(ss.armijo_beta)
    cfg.psf_dim, cfg.psf_sigma = int(ss.psf_dim), float(ss.psf_sigma)
    cfg.noise_lambda, cfg.noisy = float(ss.noise_lambda), bool(ss.noisy)
    cfg.angles = parse_int_list(ss.angles_text, "角度数")
    if experiment == "ddesign":
        cfg.detectors = [2 ** (cfg.grid_exponent - ell) - 1 for ell in range(cfg.levels)]
    cfg.seed = int(ss.seed)
    cfg.iters, cfg.sl_iters = int(ss.iters), int(ss.sl_iters)
    cfg.top_k, cfg.ls_iters = int(ss.top_k), int(ss.ls_iters)
    cfg.min_angle_gap = int(ss.min_angle_gap)
    return cfg.validate()


def reset_defaults(experiment):
    """実験を切り替えたときに既定値を入れ直す"""
    cfg = default_config(experiment)
    st.session_state.update({
        "grid_exponent": cfg.grid_exponent, "levels": cfg.levels,
        "smoother_text": ",".join(map(str, cfg.smoother_iters)),
        "kappa": cfg.kappa, "epsilon": cfg.epsilon, "epsilon_x": cfg.epsilon_x,
        "armijo_sigma": cfg.armijo_sigma, "armijo_beta": cfg.armijo_beta,
        "psf_dim": cfg.psf_dim, "psf_sigma": cfg.psf_sigma, "noise_lambda": cfg.noise_lambda,
        "noisy": cfg.noisy, "angles_text": ",".join(map(str, cfg.angles)), "seed": cfg.seed,
        "iters": cfg.iters, "sl_iters": cfg.sl_iters, "top_k": cfg.top_k, "ls_iters": cfg.ls_iters,
        "min_angle_gap": cfg.min_angle_gap,
    })


def to_display(image):
    img = np.asarray(image, dtype=float)
    return np.clip(img, 0.0, 1.0)


# --- Streamlit UI ---
st.set_page_config(layout="wide")
st.title("多段階 Bregman 近接勾配法 (ML-BPGD) 実験アプリ")

if "experiment" not in st.session_state:
    st.session_state.experiment = "deconv"
    reset_defaults("deconv")

# --- 上書き確認 ---
if st.session_state.get("confirm_overwrite"):
    st.warning(f"設定名 '{st.session_state.preset_name_to_save}' は既に存在します。上書きしますか？")
    c1, c2, c3 = st.columns([1, 1, 5])
    if c1.button("はい、上書きします"):
        save_preset(PRESETS_PATH, st.session_state.preset_name_to_save, st.session_state.settings_to_save)
        st.session_state.confirm_overwrite = False
        st.rerun()
    if c2.button("いいえ"):
        st.session_state.confirm_overwrite = False
        st.rerun()

# --- 設定の保存・読み込み ---
with st.expander("▼ 設定の保存・読み込み", expanded=False):
    try:
        presets = load_presets(PRESETS_PATH)
    except ConfigError as e:
        st.error(f"プリセットの読み込み中にエラーが発生しました: {e}")
        presets = {}
    c1, c2 = st.columns(2)
    with c1:
        st.subheader("設定を読み込む")
        preset_to_load = st.selectbox("保存済み設定", options=[""] + sorted(presets), label_visibility="collapsed")
        if st.button("選択した設定を読み込み", disabled=not preset_to_load):
            for key, value in presets[preset_to_load].items():
                st.session_state[key] = value
            st.success(f"設定 '{preset_to_load}' を読み込みました。")
            st.rerun()
    with c2:
        st.subheader("現在の設定を保存")
        preset_name_to_save = st.text_input("設定名を入力", label_visibility="collapsed")
        if st.button("現在の設定を保存", disabled=not preset_name_to_save):
            settings = gather_current_ui_settings()
            if preset_name_to_save in presets:
                st.session_state.confirm_overwrite = True
                st.session_state.preset_name_to_save = preset_name_to_save
                st.session_state.settings_to_save = settings
                st.rerun()
            else:
                save_preset(PRESETS_PATH, preset_name_to_save, settings)
                st.success(f"設定 '{preset_name_to_save}' を保存しました。")

# --- パラメータ ---
with st.expander("▼ 実験と各種パラメータを設定する", expanded=True):
    c1, c2 = st.columns([1, 2])
    with c1:
        experiment = st.selectbox("実験", options=list(EXPERIMENT_LABELS),
                                  format_func=EXPERIMENT_LABELS.get, key="experiment")
        if st.button("この実験の既定値に戻す"):
            reset_defaults(experiment)
            st.rerun()
        st.number_input("格子の指数 m（画像の一辺 2^m - 1）", min_value=2, max_value=10, step=1, key="grid_exponent")
        st.number_input("レベル数", min_value=1, max_value=6, step=1, key="levels")
        st.text_input("平滑化回数（細かい順、カンマ区切り）", key="smoother_text")
        st.number_input("乱数シード", min_value=0, step=1, key="seed")
    with c2:
        iter_tab, data_tab, rule_tab = st.tabs(["反復回数", "データ", "粗い補正の条件"])
        with iter_tab:
            c2_1, c2_2 = st.columns(2)
            with c2_1: st.number_input("ML-BPGD の反復回数", min_value=0, step=10, key="iters")
            with c2_2: st.number_input("SL-BPGD の反復回数", min_value=0, step=10, key="sl_iters")
            if experiment == "ddesign":
                c2_3, c2_4, c2_5 = st.columns(3)
                with c2_3: st.number_input("選ぶ角度数 k", min_value=1, step=1, key="top_k")
                with c2_4: st.number_input("角度の最小間隔（添字）", min_value=1, step=1, key="min_angle_gap")
                with c2_5: st.number_input("最小二乗の反復回数", min_value=1, step=100, key="ls_iters")
        with data_tab:
            if experiment == "deconv":
                scenario = st.selectbox("シナリオ", options=[""] + list(SCENARIOS))
                if scenario:
                    st.info(f"ℹ️ シナリオ **{scenario}**: {SCENARIOS[scenario]}（実行時に下の値を上書きします）")
                c2_1, c2_2, c2_3 = st.columns(3)
                with c2_1: st.number_input("PSF のサイズ（奇数）", min_value=1, step=2, key="psf_dim")
                with c2_2: st.number_input("PSF の σ", min_value=0.1, step=0.5, key="psf_sigma")
                with c2_3: st.number_input("ノイズ λ", min_value=1.0, step=100.0, key="noise_lambda")
            else:
                scenario = ""
            st.toggle("Poisson ノイズを加える", key="noisy", disabled=experiment in ("ddesign", "selftest"))
            st.text_input("投影角度数（レベルごと、カンマ区切り）", key="angles_text",
                          disabled=experiment not in ("tomo", "ddesign"))
        with rule_tab:
            c2_1, c2_2, c2_3 = st.columns(3)
            with c2_1: st.number_input("κ", min_value=0.01, max_value=0.99, step=0.01, key="kappa")
            with c2_2: st.number_input("ε", min_value=1e-8, max_value=0.99, format="%.1e", key="epsilon")
            with c2_3: st.number_input("ε_x", min_value=1e-8, format="%.1e", key="epsilon_x")
            c2_4, c2_5 = st.columns(2)
            with c2_4: st.number_input("Armijo σ", min_value=1e-8, max_value=0.99, format="%.1e", key="armijo_sigma")
            with c2_5: st.number_input("Armijo β", min_value=0.05, max_value=0.95, step=0.05, key="armijo_beta")

run_button = st.button("実験を実行", type="primary", use_container_width=True)

if run_button:
    if st.session_state.get("confirm_overwrite"):
        st.warning("設定の上書き確認が完了していません。'はい'または'いいえ'を選択してください。")
        st.stop()
    try:
        cfg = build_config(experiment)
        if scenario:
            apply_scenario(cfg, scenario).validate()

        if experiment == "selftest":
            st.info("🔄 セルフテストを実行しています...")
            report = run_selftest(cfg)
            st.dataframe(pd.DataFrame(report.results, columns=["チェック", "成功", "詳細"]), use_container_width=True)
            if report.passed:
                st.success("✅ すべてのチェックに成功しました。")
            else:
                st.error(f"失敗したチェック: {', '.join(report.failures)}")
            st.stop()

        st.info(f"🔄 {EXPERIMENT_LABELS[experiment]} を実行しています（SL {cfg.sl_iters} 回 / ML {cfg.iters} 回）...")
        result = run_experiment(cfg)
        st.success("✅ 実行が完了しました。")

        if result.total_violations:
            with st.expander("⚠️ 不変条件の違反", expanded=True):
                for label, trace in result.traces.items():
                    st.warning(f"**[{label}]** {trace.violations}")

        st.header("収束の比較")
        chart = plot_frame(result.traces).set_index("cpu_seconds")
        st.line_chart(chart)
        c1, c2, c3 = st.columns(3)
        c1.metric("SL の最終値", f"{result.summary['sl_final_fval']:.6g}")
        c2.metric("ML の最終値", f"{result.summary['ml_final_fval']:.6g}")
        c3.metric("SL の最終値に ML が到達した反復", result.summary["ml_iters_to_sl_final"] or "-")

        st.header("画像")
        cols = st.columns(len(result.images))
        for col, (name, image) in zip(cols, result.images.items()):
            col.image(to_display(image), caption=name, clamp=True, use_container_width=True)

        with st.expander("サマリー", expanded=False):
            st.json(json.loads(json.dumps(result.summary, default=float)))

        output = io.BytesIO()
        write_trace_workbook(result.traces, output, result.summary)
        st.download_button(label="📥 Excelでダウンロード", data=output.getvalue(),
                           file_name=f"mlbpgd_{experiment}_seed{cfg.seed}.xlsx",
                           mime="application/vnd.openxmlformats-officedocument.spreadsheetml.sheet")
    except ConfigError as e:
        st.error(f"設定エラー: {e}")
    except MLBPGDError as e:
        st.error(f"実行中にエラーが発生しました: {e}")
    except Exception as e:
        st.error(f"予期せぬエラーが発生しました: {e}")
        st.exception(e)

st.markdown("---")
st.markdown(f"<div style='text-align: right; color: grey;'>ML-BPGD | Version: {APP_VERSION}</div>", unsafe_allow_html=True)
