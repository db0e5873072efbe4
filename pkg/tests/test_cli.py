import json

from mlbpgd.harness.cli import EXIT_CONFIG, EXIT_OK, build_parser, main


def _write_config(tmp_path, text):
    path = tmp_path / "run.cfg"
    path.write_text(text, encoding="utf-8")
    return str(path)


SMALL_DECONV = "grid_exponent = 4\nlevels = 2\nsmoother_iters = 1, 5\npsf_dim = 5\niters = 3\nsl_iters = 3\n"


def test_parser_defaults():
    args = build_parser().parse_args(["tomo"])
    assert args.experiment == "tomo" and args.config is None and not args.debug


def test_deconv_run_writes_artifacts(tmp_path):
    out = tmp_path / "out"
    code = main(["deconv", "--config", _write_config(tmp_path, SMALL_DECONV), "--out", str(out), "--seed", "5"])
    assert code == EXIT_OK
    summary = json.loads((out / "summary.json").read_text(encoding="utf-8"))
    assert summary["seed"] == 5 and summary["ml_iters"] == 3
    assert (out / "plot_data.csv").exists() and (out / "ml_reconstruction.pgm").exists()


def test_scenario_and_levels(tmp_path):
    out = tmp_path / "out"
    code = main(["deconv", "--config", _write_config(tmp_path, SMALL_DECONV), "--out", str(out),
                 "--levels", "1", "--scenario", "low_blur_high_noise", "--iters", "2"])
    assert code == EXIT_OK
    summary = json.loads((out / "summary.json").read_text(encoding="utf-8"))
    assert summary["sides"] == [15] and summary["noise_lambda"] == 15.0


def test_missing_config_file(tmp_path):
    assert main(["deconv", "--config", str(tmp_path / "nope.cfg")]) == EXIT_CONFIG


def test_invalid_value(tmp_path):
    assert main(["deconv", "--config", _write_config(tmp_path, "kappa = 1.5\n")]) == EXIT_CONFIG


def test_too_many_levels(tmp_path):
    assert main(["deconv", "--config", _write_config(tmp_path, SMALL_DECONV), "--levels", "4"]) == EXIT_CONFIG


def test_missing_input_image(tmp_path):
    text = SMALL_DECONV + f"input_image = {tmp_path / 'missing.pgm'}\n"
    assert main(["deconv", "--config", _write_config(tmp_path, text), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
