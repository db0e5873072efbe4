import json

import numpy as np
import pandas as pd
import pytest
from openpyxl import load_workbook

from mlbpgd.errors import ArgError, ConfigError, FormatError
from mlbpgd.harness.config import default_config
from mlbpgd.harness.data import crater_phantom, disc_phantom, load_or_generate, poisson_degrade, sprite_phantom
from mlbpgd.harness.imageio import load_pgm, parse_pgm, save_pgm
from mlbpgd.harness.report import (TRACE_COLUMNS, iterations_to_reach, plot_frame, read_trace_csv,
                                   reference_value, write_summary, write_trace_csv, write_trace_workbook)
from mlbpgd.linops import Conv2DOperator, gaussian_psf
from mlbpgd.solver import SolverTrace, TraceRecord


def _trace(label, fvals, step=0.1):
    trace = SolverTrace(label=label)
    for k, f in enumerate(fvals):
        trace.append(TraceRecord(iter=k, fval=f, cpu_seconds=k * step))
    return trace


class TestPgm:
    def test_roundtrip_within_quantization(self, tmp_path):
        img = np.random.default_rng(0).uniform(0.0, 1.0, (5, 7))
        path = save_pgm(img, tmp_path / "a.pgm")
        assert np.max(np.abs(load_pgm(path) - img)) <= 1.0 / 255.0

    def test_half_gray_rounds_up(self, tmp_path):
        path = save_pgm(np.full((3, 3), 0.5), tmp_path / "half.pgm")
        np.testing.assert_array_equal(load_pgm(path), 128.0 / 255.0)

    def test_flat_vector_is_square(self, tmp_path):
        path = save_pgm(np.linspace(0, 1, 16), tmp_path / "flat.pgm")
        assert load_pgm(path).shape == (4, 4)
        with pytest.raises(FormatError):
            save_pgm(np.ones(15), tmp_path / "bad.pgm")

    def test_bad_magic(self):
        with pytest.raises(FormatError) as info:
            parse_pgm(b"P6\n1 1\n255\n\x00")
        assert info.value.offset == 0

    def test_ascii_with_comments(self):
        img = parse_pgm(b"P2\n# comment\n2 2\n# another\n4\n0 1\n2 4\n")
        np.testing.assert_allclose(img, [[0.0, 0.25], [0.5, 1.0]])

    def test_truncated_pixels(self):
        with pytest.raises(FormatError):
            parse_pgm(b"P5\n2 2\n255\n\x00\x01")


class TestReport:
    def test_reference_value_needs_traces(self):
        with pytest.raises(ArgError):
            reference_value([])
        with pytest.raises(ArgError):
            reference_value([SolverTrace(label="empty")])

    def test_csv_columns_and_precision(self, tmp_path):
        fvals = [10.0, 3.0 + 1e-13, 2.5]
        path = write_trace_csv(_trace("SL", fvals), tmp_path / "sl.csv", f_ref=2.0)
        df = read_trace_csv(path)
        assert list(df.columns) == TRACE_COLUMNS
        assert df["fval"].tolist() == fvals
        np.testing.assert_allclose(df["normalized_fval"], [1.0, 0.125 + 1e-13 / 8, 0.0625])

    def test_plot_frame_aligns_times(self):
        frame = plot_frame({"SL": _trace("SL", [4.0, 3.0, 2.0], 0.1), "ML": _trace("ML", [4.0, 1.0], 0.15)})
        assert frame["cpu_seconds"].tolist() == pytest.approx([0.0, 0.1, 0.15, 0.2])
        assert frame["ML"].tolist() == pytest.approx([1.0, 1.0, 0.0, 0.0])
        assert frame["SL"].tolist() == pytest.approx([1.0, 2.0 / 3.0, 2.0 / 3.0, 1.0 / 3.0])

    def test_iterations_to_reach(self):
        trace = _trace("ML", [5.0, 3.0, 1.0])
        assert iterations_to_reach(trace, 3.0) == 1
        assert iterations_to_reach(trace, 0.5) is None

    def test_workbook_sheets(self, tmp_path):
        traces = {"SL": _trace("SL", [2.0, 1.0]), "ML": _trace("ML", [2.0, 0.5])}
        path = write_trace_workbook(traces, tmp_path / "traces.xlsx", {"seed": 0, "sides": [7, 3]})
        assert load_workbook(path).sheetnames == ["SL", "ML", "summary"]
        summary = pd.read_excel(path, sheet_name="summary")
        assert summary["項目"].tolist() == ["seed", "sides"]

    def test_summary_json(self, tmp_path):
        path = write_summary({"value": np.float64(1.5), "flags": np.array([1, 2])}, tmp_path / "s.json")
        assert json.loads(path.read_text(encoding="utf-8")) == {"value": 1.5, "flags": [1, 2]}


class TestData:
    @pytest.mark.parametrize("phantom", [crater_phantom, disc_phantom, sprite_phantom])
    def test_phantoms_in_unit_interval(self, phantom):
        img = phantom(15)
        assert img.shape == (15, 15)
        assert img.min() > 0.0 and img.max() <= 1.0

    def test_poisson_is_deterministic(self):
        A = Conv2DOperator(gaussian_psf(3, 1.0), 15)
        clean = crater_phantom(15).ravel()
        np.testing.assert_array_equal(poisson_degrade(clean, A, 100.0, 3), poisson_degrade(clean, A, 100.0, 3))
        assert not np.array_equal(poisson_degrade(clean, A, 100.0, 3), poisson_degrade(clean, A, 100.0, 4))

    def test_poisson_concentrates_for_large_lambda(self):
        A = Conv2DOperator(gaussian_psf(3, 1.0), 31)
        clean = crater_phantom(31).ravel()
        mean = A.apply(clean)
        worst = max(np.max(np.abs(poisson_degrade(clean, A, 1e6, seed) - mean)) for seed in range(10))
        assert worst / np.max(np.abs(mean)) <= 0.05

    def test_zero_counts_are_floored(self):
        A = Conv2DOperator(np.ones((1, 1)), 3)
        b = poisson_degrade(np.full(9, 1e-6), A, 1.0, 0)
        assert np.all(b > 0)

    def test_input_image(self, tmp_path):
        cfg = default_config("deconv")
        cfg.grid_exponent, cfg.levels, cfg.smoother_iters = 3, 1, [1]
        cfg.input_image = str(save_pgm(np.zeros((7, 7)), tmp_path / "in.pgm"))
        x = load_or_generate(cfg, crater_phantom)
        assert x.shape == (49,) and np.all(x > 0)
        cfg.input_image = str(save_pgm(np.zeros((5, 5)), tmp_path / "small.pgm"))
        with pytest.raises(ConfigError):
            load_or_generate(cfg, crater_phantom)
