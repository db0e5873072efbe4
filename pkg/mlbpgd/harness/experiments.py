"""3つの実験（Poisson ぼかし除去・断層再構成・D-最適計画）の実行と成果物の書き出し"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import ConfigError, DomainError, RankError, SingularError
from ..geometry import Box, GeometryKind, GeometrySpec, TranslatedSimplex
from ..hierarchy import TriggerParams, assemble_levels
from ..linops import Conv2DOperator, TransferPair, equidistant_angles, gaussian_psf, parallel_beam
from ..objectives import DDesign, KLAxb, KLbAx, LeastSquares
from ..solver import ArmijoParams, bpgd_run, ml_bpgd_run, sublinear_diagnostic
from .data import crater_phantom, disc_phantom, load_or_generate, poisson_degrade, sprite_phantom
from .imageio import save_pgm
from .report import (emit_plot_data, iterations_to_reach, reference_value, write_summary,
                     write_trace_csv, write_trace_workbook)

logger = logging.getLogger(__name__)


@dataclass
class ExperimentResult:
    name: str
    traces: dict
    images: dict
    summary: dict
    snapshots: dict = field(default_factory=dict)

    @property
    def total_violations(self):
        return sum(t.total_violations for t in self.traces.values())


def _trigger_params(cfg):
    return TriggerParams(kappa=cfg.kappa, epsilon=cfg.epsilon, epsilon_x=cfg.epsilon_x)


def _armijo_params(cfg):
    return ArmijoParams(sigma=cfg.armijo_sigma, beta=cfg.armijo_beta, alpha_bar=cfg.armijo_alpha_bar)


def _run_pair(cfg, run_sl, run_ml):
    """SL と ML の比較実行（parallel なら2スレッドで同時に）"""
    if cfg.parallel:
        with ThreadPoolExecutor(max_workers=2) as pool:
            sl, ml = pool.submit(run_sl), pool.submit(run_ml)
            return sl.result(), ml.result()
    return run_sl(), run_ml()


def _callback(cfg, side, store, prefix, extra=None):
    wanted = set(cfg.snapshot_iters)

    def callback(k, x):
        if k in wanted:
            store[f"{prefix}_iter{k:04d}"] = x.reshape(side, side).copy()
        if extra is not None:
            extra(k, x)
    return callback


def _number(value):
    if value is None:
        return None
    value = float(value)
    return value if np.isfinite(value) else None


def _relative_error(x, clean):
    return float(np.linalg.norm(x - clean) / np.linalg.norm(clean))


def _comparison_summary(cfg, sl_trace, ml_trace):
    sl_final = float(sl_trace.fvals[-1])
    coherence = [r.coherence_error for r in ml_trace.records if np.isfinite(r.coherence_error)]
    return {
        "experiment": cfg.experiment,
        "seed": cfg.seed,
        "sl_iters": len(sl_trace) - 1,
        "ml_iters": len(ml_trace) - 1,
        "sl_final_fval": sl_final,
        "ml_final_fval": float(ml_trace.fvals[-1]),
        "ml_iters_to_sl_final": iterations_to_reach(ml_trace, sl_final),
        "ml_coarse_corrections": int(sum(r.corrected for r in ml_trace.records)),
        "max_coherence_error": _number(max(coherence)) if coherence else None,
        "violations": {"SL": dict(sl_trace.violations), "ML": dict(ml_trace.violations)},
    }


# --- ぼかし除去 ---
def run_deconv(cfg):
    sides = cfg.sides()
    side = sides[0]
    clean = load_or_generate(cfg, crater_phantom)
    psf = gaussian_psf(min(cfg.psf_dim, side), cfg.psf_sigma)
    ops = [Conv2DOperator(psf, s) for s in sides]
    b = poisson_degrade(clean, ops[0], cfg.noise_lambda, cfg.seed) if cfg.noisy else ops[0].apply(clean)

    transfers = [TransferPair(s, dim=2) for s in sides[1:]]
    data = [b]
    for T in transfers:
        data.append(T.restrict(data[-1]))
    objectives = [KLbAx(A, d) for A, d in zip(ops, data)]
    region = Box(lower=0.0)
    levels = assemble_levels(objectives, GeometryKind.SHIFTED_LOG_BARRIER, region, transfers,
                             cfg.smoother_iters, lower_floor=0.0)
    geometry = levels[0].make_geometry(region)
    x0 = np.full(side * side, 0.5)
    logger.info("deconv: %d×%d, レベル %s, PSF(%d, %.2f), λ=%s", side, side, sides, psf.shape[0],
                cfg.psf_sigma, cfg.noise_lambda if cfg.noisy else "∞")

    snapshots = {}
    (x_sl, sl), (x_ml, ml) = _run_pair(
        cfg,
        lambda: bpgd_run(objectives[0], geometry, region, x0, levels[0].tau, cfg.sl_iters,
                         callback=_callback(cfg, side, snapshots, "sl"), label="SL", debug=cfg.debug),
        lambda: ml_bpgd_run(levels, _trigger_params(cfg), _armijo_params(cfg), x0, cfg.iters,
                            callback=_callback(cfg, side, snapshots, "ml"), label="ML", debug=cfg.debug),
    )

    summary = _comparison_summary(cfg, sl, ml)
    summary.update({
        "sides": sides,
        "psf": [int(psf.shape[0]), cfg.psf_sigma],
        "noise_lambda": cfg.noise_lambda if cfg.noisy else None,
        "fval_at_clean": objectives[0].value(clean),
        "sl_relative_error": _relative_error(x_sl, clean),
        "ml_relative_error": _relative_error(x_ml, clean),
        "iterates_positive": bool(np.all(x_sl > 0) and np.all(x_ml > 0)),
    })
    if cfg.reference_iters > 0:
        k = min(200, cfg.reference_iters)
        summary["sublinear"] = sublinear_diagnostic(objectives[0], geometry, region, x0, levels[0].tau,
                                                    k, cfg.reference_iters)
    images = {
        "clean": clean.reshape(side, side),
        "observed": b.reshape(side, side),
        "sl_reconstruction": x_sl.reshape(side, side),
        "ml_reconstruction": x_ml.reshape(side, side),
    }
    return ExperimentResult("deconv", {"SL": sl, "ML": ml}, images, summary, snapshots)


# --- 断層再構成 ---
def _coarse_sinogram(b_fine, angles_fine, angles_coarse, det_coarse, side_fine, side_coarse):
    """角度を間引き、検出器方向に 1D ステンシルで制限し、画素幅の比で縮める"""
    sino = b_fine.reshape(angles_fine, -1)[::angles_fine // angles_coarse]
    T = TransferPair(det_coarse, dim=1, repeats=angles_coarse)
    return T.restrict(sino.ravel()) * side_coarse / side_fine


def _tomography_objective(op, b, level):
    kept, keep = op.without_zero_rows()
    dropped = int((~keep).sum())
    if dropped:
        logger.info("レベル %d: 画像に当たらない光線 %d 本を除きました", level, dropped)
    b = np.array(b[keep], dtype=float)
    nonpositive = b <= 0
    if nonpositive.any():
        floor = 1e-8 * max(float(b[~nonpositive].mean()) if (~nonpositive).any() else 1.0, 1e-300)
        b[nonpositive] = floor
        logger.info("レベル %d: 正でない測定値 %d 個を %.3e に置き換えました", level, int(nonpositive.sum()), floor)
    return KLAxb(kept, b)


def run_tomo(cfg):
    sides = cfg.sides()
    side = sides[0]
    detectors = cfg.detector_counts()
    clean = load_or_generate(cfg, disc_phantom)
    full_ops = [parallel_beam(s, equidistant_angles(a), d) for s, a, d in zip(sides, cfg.angles, detectors)]
    b = poisson_degrade(clean, full_ops[0], cfg.noise_lambda, cfg.seed) if cfg.noisy else full_ops[0].apply(clean)

    data = [b]
    for ell in range(1, cfg.levels):
        data.append(_coarse_sinogram(data[-1], cfg.angles[ell - 1], cfg.angles[ell], detectors[ell],
                                     sides[ell - 1], sides[ell]))
    objectives = [_tomography_objective(op, d, ell) for ell, (op, d) in enumerate(zip(full_ops, data))]
    transfers = [TransferPair(s, dim=2) for s in sides[1:]]
    region = Box(lower=0.0, upper=1.0)
    levels = assemble_levels(objectives, GeometryKind.FERMI_DIRAC, region, transfers,
                             cfg.smoother_iters, lower_floor=0.0)
    geometry = levels[0].make_geometry(region)
    x0 = np.full(side * side, 0.5)
    logger.info("tomo: %d×%d, 角度 %s, 検出器 %s", side, side, cfg.angles, detectors)

    snapshots = {}
    ml_errors = [_relative_error(x0, clean)]
    (x_sl, sl), (x_ml, ml) = _run_pair(
        cfg,
        lambda: bpgd_run(objectives[0], geometry, region, x0, levels[0].tau, cfg.sl_iters,
                         callback=_callback(cfg, side, snapshots, "sl"), label="SL", debug=cfg.debug),
        lambda: ml_bpgd_run(levels, _trigger_params(cfg), _armijo_params(cfg), x0, cfg.iters,
                            callback=_callback(cfg, side, snapshots, "ml",
                                               lambda k, x: ml_errors.append(_relative_error(x, clean))),
                            label="ML", debug=cfg.debug),
    )

    head = np.array(ml_errors[:51])
    summary = _comparison_summary(cfg, sl, ml)
    summary.update({
        "sides": sides,
        "angles": list(cfg.angles),
        "detectors": detectors,
        "sl_relative_error": _relative_error(x_sl, clean),
        "ml_relative_error": _relative_error(x_ml, clean),
        "ml_error_monotone_first50": bool(np.all(np.diff(head) <= 1e-12)),
        "iterates_in_unit_box": bool(all(np.all((x > 0) & (x < 1)) for x in (x_sl, x_ml))),
    })
    images = {
        "clean": clean.reshape(side, side),
        "sl_reconstruction": x_sl.reshape(side, side),
        "ml_reconstruction": x_ml.reshape(side, side),
    }
    return ExperimentResult("tomo", {"SL": sl, "ML": ml}, images, summary, snapshots)


# --- D-最適計画 ---
def _least_squares_reconstruction(clean, side, angles, detectors, iters):
    """選んだ角度だけの投影から勾配法（固定回数）で最小二乗再構成する"""
    A = parallel_beam(side, angles, detectors)
    b = A.apply(clean)
    obj = LeastSquares(A, b)
    x, _ = bpgd_run(obj, GeometrySpec(GeometryKind.QUADRATIC), Box(), np.zeros(side * side),
                    1.0 / obj.lipschitz_bound(), iters, label="LS")
    residual = float(np.linalg.norm(A.apply(x) - b))
    return x, _relative_error(x, clean), residual


def select_angles(weights, k, min_gap=1):
    """重みの大きい順に k 個の角度を選ぶ。選んだ角度どうしの添字の差（巡回）は min_gap 以上"""
    n = len(weights)
    chosen = []
    for i in np.argsort(-np.asarray(weights), kind="stable"):
        if all(min(abs(i - j), n - abs(i - j)) >= min_gap for j in chosen):
            chosen.append(int(i))
            if len(chosen) == k:
                return np.sort(np.array(chosen))
    raise ConfigError(f"添字の間隔 {min_gap} 以上で {k} 個の角度を選べません（角度数 {n}）")


def _design_objective(side, angles, detectors):
    H = parallel_beam(side, angles, detectors).to_dense().T
    if H.shape[1] < H.shape[0]:
        raise RankError(f"光線数 {H.shape[1]} が画素数 {H.shape[0]} より少なく M(x) は正則になりません")
    return DDesign(H)


def run_ddesign(cfg):
    side = cfg.fine_side
    sides = cfg.sides()
    detectors = cfg.detector_counts()
    n_angles = cfg.angles[0]
    thetas = equidistant_angles(n_angles)

    objectives = [_design_objective(s, thetas, d) for s, d in zip(sides, detectors)]
    kinds = [GeometryKind.LOG_BARRIER] + [GeometryKind.SHIFTED_LOG_BARRIER] * (cfg.levels - 1)
    transfers = [TransferPair(d, dim=1, repeats=n_angles) for d in detectors[1:cfg.levels]]
    region = TranslatedSimplex(lower=0.0, total=1.0)
    levels = assemble_levels(objectives, kinds, region, transfers, cfg.smoother_iters,
                             taus=[1.0] * cfg.levels, lower_floor=0.0)
    geometry = levels[0].make_geometry(region)
    fine = objectives[0]
    x0 = np.full(fine.size, 1.0 / fine.size)
    try:
        fine.eval_grad(x0)
    except (DomainError, SingularError) as exc:
        raise RankError(f"一様な重みで M(x⁰) が正定値になりません: {exc}") from exc
    logger.info("ddesign: %d×%d 画像, %d 角度 × %d 検出器 (設計変数 %d)", side, side, n_angles, detectors[0], fine.size)

    identity_error = [0.0]

    def check_identity(k, x):
        _, grad = fine.eval_grad(x)
        err = abs(float(x @ -grad) - fine.m) / fine.m
        identity_error[0] = max(identity_error[0], err)

    (x_sl, sl), (x_ml, ml) = _run_pair(
        cfg,
        lambda: bpgd_run(fine, geometry, region, x0, levels[0].tau, cfg.sl_iters, label="SL", debug=cfg.debug),
        lambda: ml_bpgd_run(levels, _trigger_params(cfg), _armijo_params(cfg), x0, cfg.iters,
                            callback=check_identity, label="ML", debug=cfg.debug),
    )

    weights = x_ml.reshape(n_angles, detectors[0]).sum(axis=1)
    k = cfg.top_k
    top = select_angles(weights, k, cfg.min_angle_gap)
    equi = (np.arange(k) * n_angles) // k

    clean = load_or_generate(cfg, sprite_phantom)
    if cfg.noisy:
        logger.info("ddesign の最小二乗比較はノイズなしの投影で行います")
    x_top, err_top, res_top = _least_squares_reconstruction(clean, side, thetas[top], detectors[0], cfg.ls_iters)
    x_eq, err_eq, res_eq = _least_squares_reconstruction(clean, side, thetas[equi], detectors[0], cfg.ls_iters)
    logger.info("ddesign: 上位 %d 角度の残差 %.4f / 等間隔 %.4f（誤差 %.4f / %.4f）", k, res_top, res_eq, err_top, err_eq)
    if res_top > res_eq:
        logger.warning("ddesign: 上位 %d 角度の残差が等間隔の角度より大きくなりました", k)

    summary = _comparison_summary(cfg, sl, ml)
    summary.update({
        "pixels": fine.m,
        "rays": fine.size,
        "weight_sum": float(x_ml.sum()),
        "max_trace_identity_error": identity_error[0],
        "topk_angles": top.tolist(),
        "equidistant_angles": equi.tolist(),
        "topk_relative_error": err_top,
        "equidistant_relative_error": err_eq,
        "topk_residual": res_top,
        "equidistant_residual": res_eq,
        "topk_not_worse": bool(res_top <= res_eq),
    })
    design = x_ml.reshape(n_angles, detectors[0])
    images = {
        "clean": clean.reshape(side, side),
        "design_weights": design / design.max(),
        "ls_topk": x_top.reshape(side, side),
        "ls_equidistant": x_eq.reshape(side, side),
    }
    return ExperimentResult("ddesign", {"SL": sl, "ML": ml}, images, summary)


RUNNERS = {"deconv": run_deconv, "tomo": run_tomo, "ddesign": run_ddesign}


def run_experiment(cfg):
    try:
        runner = RUNNERS[cfg.experiment]
    except KeyError:
        raise ConfigError(f"'{cfg.experiment}' は実験ではありません") from None
    result = runner(cfg)
    logger.info("%s: SL f=%.10g, ML f=%.10g, ML が SL の最終値に到達した反復 %s", cfg.experiment,
                result.summary["sl_final_fval"], result.summary["ml_final_fval"],
                result.summary["ml_iters_to_sl_final"])
    return result


def write_artifacts(result, out_dir):
    """トレース CSV、プロット用データ、画像、サマリー JSON、Excel を書き出す"""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    f_ref = reference_value(result.traces.values())
    paths = [write_trace_csv(trace, out / f"{label.lower()}_trace.csv", f_ref)
             for label, trace in result.traces.items()]
    paths.append(emit_plot_data(result.traces, out / "plot_data.csv"))
    for name, image in {**result.images, **result.snapshots}.items():
        paths.append(save_pgm(image, out / f"{name}.pgm"))
    paths.append(write_summary(result.summary, out / "summary.json"))
    paths.append(write_trace_workbook(result.traces, out / "traces.xlsx", result.summary))
    logger.info("成果物 %d 件を %s に書き出しました", len(paths), out)
    return paths
