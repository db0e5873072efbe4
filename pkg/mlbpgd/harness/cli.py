"""コマンドライン: python -m mlbpgd {deconv|tomo|ddesign|selftest} --config <path> ...

終了コード: 0 成功、1 不変条件違反・セルフテスト失敗、2 設定エラー
"""
import argparse
import logging

from ..errors import ConfigError, FormatError, InvariantError, MLBPGDError
from .config import EXPERIMENTS, SCENARIOS, apply_scenario, load_config
from .experiments import run_experiment, write_artifacts
from .selftest import run_selftest

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2


def build_parser():
    parser = argparse.ArgumentParser(prog="mlbpgd", description="多段階 Bregman 近接勾配法の実験を実行します")
    parser.add_argument("experiment", choices=EXPERIMENTS)
    parser.add_argument("--config", help="key = value 形式の設定ファイル")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--out", help="成果物の出力先ディレクトリ")
    parser.add_argument("--levels", type=int)
    parser.add_argument("--iters", type=int)
    parser.add_argument("--scenario", choices=sorted(SCENARIOS), help="deconv のぼかし・ノイズの組み合わせ")
    parser.add_argument("--debug", action="store_true", help="不変条件の違反で即座に停止する")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")

    overrides = {"seed": args.seed, "output_dir": args.out, "iters": args.iters}
    if args.debug:
        overrides["debug"] = True
    try:
        cfg = load_config(args.config, args.experiment, overrides)
        if args.levels is not None:
            # レベル数を変えたときは平滑化回数も合わせる（足りない分は最後の値）
            smoother = (list(cfg.smoother_iters) + [cfg.smoother_iters[-1]] * args.levels)[:args.levels]
            cfg.levels, cfg.smoother_iters = args.levels, smoother
            if cfg.experiment == "tomo" and len(cfg.angles) != args.levels:
                cfg.angles = (list(cfg.angles) + [cfg.angles[-1]] * args.levels)[:args.levels]
        if args.scenario:
            apply_scenario(cfg, args.scenario)
        cfg.validate()
    except ConfigError as exc:
        logger.error("設定エラー: %s", exc)
        return EXIT_CONFIG

    if cfg.experiment == "selftest":
        report = run_selftest(cfg)
        if not report.passed:
            logger.error("セルフテスト失敗: %s", ", ".join(report.failures))
            return EXIT_FAILURE
        return EXIT_OK

    try:
        result = run_experiment(cfg)
        write_artifacts(result, cfg.output_dir)
    except (ConfigError, FormatError) as exc:
        logger.error("入力エラー: %s", exc)
        return EXIT_CONFIG
    except InvariantError as exc:
        logger.error("不変条件違反: %s", exc)
        return EXIT_FAILURE
    except MLBPGDError as exc:
        logger.error("実行に失敗しました: %s", exc)
        return EXIT_FAILURE

    if result.total_violations:
        logger.error("不変条件違反が %d 件ありました", result.total_violations)
        return EXIT_FAILURE
    return EXIT_OK
