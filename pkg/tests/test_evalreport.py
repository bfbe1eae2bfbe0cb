"""Tests for experiment orchestration, grids, and report artifacts."""

import os

import numpy as np
import pytest

from ssdgm import evalreport as ev
from ssdgm.errors import UsageError
from ssdgm.model import MODE_BAYES, MODE_POINT, build_baseline, build_model
from ssdgm.predictor import PredictConfig
from ssdgm.trainer import TrainConfig


def zeroed_baseline(seed=0):
    model = build_baseline(d_x=2, n_classes=2, hidden_dims=(8,), seed=seed)
    for _, p in model.params.items():
        p.data[...] = 0.0
    return model


def small_model(mode, seed=0):
    return build_model(d_x=2, d_z=2, n_classes=2, hidden_dims=(8,),
                       mode=mode, seed=seed, init_w_log_std=-5.0)


class TestGridSpec:
    def test_node_order_x2_outer(self):
        """Rows scan x1 fastest: the first resolution rows share x2_lo."""
        grid = ev.GridSpec(0.0, 1.0, 10.0, 12.0, resolution=3)
        nodes = grid.nodes()
        assert nodes.shape == (9, 2)
        np.testing.assert_allclose(nodes[:3, 1], 10.0)
        np.testing.assert_allclose(nodes[:3, 0], [0.0, 0.5, 1.0])
        np.testing.assert_allclose(nodes[-1], [1.0, 12.0])

    def test_from_data_expands_bbox(self):
        x = np.array([[0.0, 0.0], [2.0, 4.0]])
        grid = ev.GridSpec.from_data(x, expand=0.5, resolution=5)
        assert (grid.x1_lo, grid.x1_hi) == (-1.0, 3.0)
        assert (grid.x2_lo, grid.x2_hi) == (-2.0, 6.0)

    def test_from_data_degenerate_span_gets_fixed_pad(self):
        """A single point still yields a usable box, padded by 0.5."""
        grid = ev.GridSpec.from_data(np.array([[1.0, 2.0]]))
        assert (grid.x1_lo, grid.x1_hi) == (0.5, 1.5)
        assert (grid.x2_lo, grid.x2_hi) == (1.5, 2.5)

    def test_bad_ranges_rejected(self):
        with pytest.raises(UsageError):
            ev.GridSpec(1.0, 1.0, 0.0, 1.0)
        with pytest.raises(UsageError):
            ev.GridSpec(0.0, 1.0, 0.0, 1.0, resolution=1)


class TestContourGrid:
    def test_baseline_grid_three_columns_uniform(self):
        """A zero-weight classifier scores p1 = 0.5 at every node."""
        grid = ev.GridSpec(-1.0, 1.0, -1.0, 1.0, resolution=4)
        rows = ev.contour_grid(zeroed_baseline(), grid, PredictConfig())
        assert rows.shape == (16, 3)
        np.testing.assert_allclose(rows[:, 2], 0.5)
        np.testing.assert_allclose(rows[:, :2], grid.nodes())

    def test_point_model_grid_three_columns(self):
        grid = ev.GridSpec(-1.0, 1.0, -1.0, 1.0, resolution=3)
        cfg = PredictConfig(gibbs_steps=2, chains=2, seed=0)
        rows = ev.contour_grid(small_model(MODE_POINT), grid, cfg)
        assert rows.shape == (9, 3)
        assert np.all((rows[:, 2] >= 0.0) & (rows[:, 2] <= 1.0))

    def test_bayes_grid_adds_chain_spread_column(self):
        grid = ev.GridSpec(-1.0, 1.0, -1.0, 1.0, resolution=3)
        cfg = PredictConfig(gibbs_steps=2, chains=3, seed=0)
        rows = ev.contour_grid(small_model(MODE_BAYES), grid, cfg)
        assert rows.shape == (9, 4)
        assert np.all(rows[:, 3] >= 0.0)
        assert np.all(np.isfinite(rows[:, 3]))

    def test_bayes_single_chain_spread_is_zero(self):
        grid = ev.GridSpec(0.0, 1.0, 0.0, 1.0, resolution=2)
        cfg = PredictConfig(gibbs_steps=2, chains=1, seed=0)
        rows = ev.contour_grid(small_model(MODE_BAYES), grid, cfg)
        np.testing.assert_allclose(rows[:, 3], 0.0)


class TestArtifactFiles:
    def test_grid_csv_headers_by_width(self, tmp_path):
        three = np.zeros((2, 3))
        four = np.zeros((2, 4))
        p3, p4 = tmp_path / "g3.csv", tmp_path / "g4.csv"
        ev.save_grid(p3, three)
        ev.save_grid(p4, four)
        assert p3.read_text().splitlines()[0] == "x1,x2,p1"
        assert p4.read_text().splitlines()[0] == "x1,x2,p1,p1_std"

    def test_grid_csv_round_trip(self, tmp_path):
        rng = np.random.default_rng(5)
        rows = rng.standard_normal((7, 3))
        path = tmp_path / "grid.csv"
        ev.save_grid(path, rows)
        back = np.loadtxt(path, delimiter=",", skiprows=1)
        np.testing.assert_allclose(back, rows, rtol=0, atol=0)

    def test_samples_csv_header_and_round_trip(self, tmp_path):
        rng = np.random.default_rng(6)
        z = rng.standard_normal((4, 3))
        x = rng.standard_normal((4, 2))
        y = np.array([0, 1, 1, 0])
        path = tmp_path / "samples.csv"
        ev.save_samples(path, z, x, y)
        lines = path.read_text().splitlines()
        assert lines[0] == "z1,z2,z3,x1,x2,y"
        back = np.loadtxt(path, delimiter=",", skiprows=1)
        np.testing.assert_allclose(back[:, :3], z, rtol=0, atol=0)
        np.testing.assert_allclose(back[:, 3:5], x, rtol=0, atol=0)
        np.testing.assert_allclose(back[:, 5], y, rtol=0, atol=0)

    def test_emit_report_files(self, tmp_path):
        report = ev.ExperimentReport([
            ev.MethodResult("dnn", 0.75, -1.25, 1.5, 7),
            ev.MethodResult("sslpe", 0.96875, -0.125, 30.25, 7),
        ])
        ev.emit_report(report, tmp_path)
        lines = (tmp_path / "report.csv").read_text().splitlines()
        assert lines[0] == "method,accuracy,avg_loglik,seed"
        assert lines[1] == "dnn,0.75,-1.25,7"
        assert lines[2] == "sslpe,0.96875,-0.125,7"
        timing = (tmp_path / "timings.csv").read_text().splitlines()
        assert timing[0] == "method,seconds"
        assert timing[1] == "dnn,1.500"
        text = (tmp_path / "report.txt").read_text()
        assert "accuracy" in text and "sslpe" in text

    def test_by_method_lookup(self):
        report = ev.ExperimentReport([ev.MethodResult("dnn", 1.0, 0.0, 0.1, 0)])
        assert report.by_method()["dnn"].accuracy == 1.0


class TestExperimentConfig:
    def test_unknown_method_rejected(self):
        with pytest.raises(UsageError):
            ev.ExperimentConfig(methods=("dnn", "svm"))

    def test_bad_sample_count_rejected(self):
        with pytest.raises(UsageError):
            ev.ExperimentConfig(n_samples=0)

    def test_echo_lines_flatten_nested_configs(self):
        cfg = ev.ExperimentConfig(seed=3, methods=("dnn", "sslpe"),
                                  train=TrainConfig(epochs=2, lr=0.5),
                                  predict=PredictConfig(chains=4))
        lines = cfg.echo_lines()
        assert "seed=3" in lines
        assert "methods=dnn,sslpe" in lines
        assert "train.epochs=2" in lines
        assert "train.lr=0.5" in lines
        assert "predict.chains=4" in lines
        assert "labeled_indices=" in lines

    def test_echo_lines_include_explicit_indices(self):
        cfg = ev.ExperimentConfig(labeled_indices=(4, 9))
        assert "labeled_indices=4,9" in cfg.echo_lines()


def tiny_experiment(out_dir, seed=0, figures=False):
    return ev.ExperimentConfig(
        out_dir=str(out_dir), seed=seed, n=400, per_class=3,
        train=TrainConfig(epochs=1, unlabeled_batch=50, hidden_dims=(8,),
                          d_z=2, dnn_steps=20, log_every=2),
        predict=PredictConfig(gibbs_steps=2, chains=2, seed=seed),
        grid_resolution=6, n_samples=20, render_figures=figures)


class TestRunExperiment:
    def test_artifact_inventory(self, tmp_path):
        out = tmp_path / "run"
        report = ev.run_experiment(tiny_experiment(out, figures=True))
        assert set(report.by_method()) == {"dnn", "sslpe", "sslapd"}
        expected = [
            "config.echo", "report.csv", "report.txt", "timings.csv",
            "data.labeled.csv", "data.unlabeled.csv", "data.test.csv",
            "fig_data.png", "fig_training.png",
        ]
        for method in ("dnn", "sslpe", "sslapd"):
            expected += [f"history.{method}.csv", f"timings.{method}.csv",
                         f"checkpoint.{method}", f"grid.{method}.csv",
                         f"fig_contour_{method}.png"]
        for method in ("sslpe", "sslapd"):
            expected += [f"samples.{method}.csv", f"fig_samples_{method}.png"]
        for name in expected:
            assert (out / name).exists(), name
        assert not (out / "FAILED").exists()
        assert not (out / "samples.dnn.csv").exists()

    def test_value_artifacts_reproduce_byte_identical(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        ev.run_experiment(tiny_experiment(a, seed=7))
        ev.run_experiment(tiny_experiment(b, seed=7))
        names = ["report.csv", "data.labeled.csv"]
        for method in ("dnn", "sslpe", "sslapd"):
            names += [f"history.{method}.csv", f"grid.{method}.csv"]
        names += ["samples.sslpe.csv", "samples.sslapd.csv"]
        for name in names:
            assert (a / name).read_bytes() == (b / name).read_bytes(), name

    def test_different_seed_changes_report(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        ev.run_experiment(tiny_experiment(a, seed=0))
        ev.run_experiment(tiny_experiment(b, seed=1))
        assert (a / "report.csv").read_bytes() != (b / "report.csv").read_bytes()

    def test_failed_marker_written(self, tmp_path):
        out = tmp_path / "bad"
        cfg = tiny_experiment(out)
        cfg.labeled_indices = (10 ** 9,)
        with pytest.raises(UsageError):
            ev.run_experiment(cfg)
        marker = (out / "FAILED").read_text()
        assert "UsageError" in marker
        assert "labeled_indices" in marker

    def test_seconds_recorded_positive(self, tmp_path):
        report = ev.run_experiment(tiny_experiment(tmp_path / "run"))
        for result in report.results:
            assert result.seconds > 0.0
